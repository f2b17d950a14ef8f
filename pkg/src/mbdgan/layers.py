"""Parameter containers shared by every network in the package."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class LayerInfo:
    """One row of a parameter audit."""

    name: str
    kind: str
    in_ch: int
    out_ch: int
    kernel: int
    params: int
    groups: int = 1
    role: str = "hidden"
    weights: int = 0  # connection count, i.e. params minus biases / norm terms


class Module:
    """Minimal container tracking parameters and sub-modules in insertion order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: Module) -> Module:
        setattr(self, name, module)
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.dtype, copy=True)

    def layer_infos(self, prefix: str = "") -> list[LayerInfo]:
        out = []
        for name, child in self._children.items():
            out.extend(child.layer_infos(prefix + name + "."))
        return out

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _kaiming(rng: np.random.Generator, shape, fan_in: int, slope: float, dtype) -> np.ndarray:
    std = np.sqrt(2.0 / ((1 + slope**2) * fan_in))
    return (rng.standard_normal(shape) * std).astype(dtype)


class Conv2d(Module):
    def __init__(self, cin, cout, k, stride=1, pad=0, bias=True, groups=1, *, rng, dtype=np.float32, slope=0.0, role="hidden"):
        super().__init__()
        if cin % groups or cout % groups:
            raise ad.ConfigurationError(f"conv {cin}->{cout} cannot be split into {groups} groups")
        self.cin, self.cout, self.k, self.stride, self.pad, self.groups = cin, cout, k, stride, pad, groups
        self.role = role
        self.weight = ad.parameter(_kaiming(rng, (cout, cin // groups, k, k), k * k * cin // groups, slope, dtype), dtype=dtype)
        self.bias = ad.parameter(np.zeros(cout), dtype=dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.pad, self.groups)

    def layer_infos(self, prefix=""):
        n = self.weight.size + (self.bias.size if self.bias is not None else 0)
        return [LayerInfo(prefix.rstrip("."), "conv", self.cin, self.cout, self.k, n, self.groups, self.role, self.weight.size)]


class ConvTranspose2d(Module):
    def __init__(self, cin, cout, k, stride=1, pad=0, bias=True, *, rng, dtype=np.float32, role="hidden"):
        super().__init__()
        self.cin, self.cout, self.k, self.stride, self.pad = cin, cout, k, stride, pad
        self.role = role
        # each output pixel sees roughly k*k/stride^2 input taps per channel
        fan_in = max(1, cin * k * k // (stride * stride))
        self.weight = ad.parameter(_kaiming(rng, (cin, cout, k, k), fan_in, 0.0, dtype), dtype=dtype)
        self.bias = ad.parameter(np.zeros(cout), dtype=dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ad.conv_transpose2d(x, self.weight, self.bias, self.stride, self.pad)

    def layer_infos(self, prefix=""):
        n = self.weight.size + (self.bias.size if self.bias is not None else 0)
        return [LayerInfo(prefix.rstrip("."), "tconv", self.cin, self.cout, self.k, n, 1, self.role, self.weight.size)]


class Dense(Module):
    def __init__(self, fin, fout, bias=True, *, rng, dtype=np.float32, scale=None, role="dense"):
        super().__init__()
        self.fin, self.fout, self.role = fin, fout, role
        std = scale if scale is not None else np.sqrt(1.0 / fin)
        self.weight = ad.parameter(rng.standard_normal((fin, fout)) * std, dtype=dtype)
        self.bias = ad.parameter(np.zeros(fout), dtype=dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ad.dense(x, self.weight, self.bias)

    def layer_infos(self, prefix=""):
        n = self.weight.size + (self.bias.size if self.bias is not None else 0)
        return [LayerInfo(prefix.rstrip("."), "dense", self.fin, self.fout, 1, n, 1, self.role, self.weight.size)]


class InstanceNorm(Module):
    def __init__(self, channels, affine=True, *, dtype=np.float32):
        super().__init__()
        self.channels = channels
        self.gamma = ad.parameter(np.ones(channels), dtype=dtype) if affine else None
        self.beta = ad.parameter(np.zeros(channels), dtype=dtype) if affine else None

    def forward(self, x: Tensor) -> Tensor:
        return ad.instance_norm(x, self.gamma, self.beta)

    def layer_infos(self, prefix=""):
        n = 2 * self.channels if self.gamma is not None else 0
        return [LayerInfo(prefix.rstrip("."), "norm", self.channels, self.channels, 1, n, 1, "norm")]


def one_hot(labels, num_classes: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label out of range for {num_classes} classes: {labels}")
    out = np.zeros((labels.size, num_classes), dtype=dtype)
    out[np.arange(labels.size), labels] = 1
    return out


def check_one_hot(c, num_classes: int) -> np.ndarray:
    arr = np.asarray(c.data if isinstance(c, Tensor) else c)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.shape[-1] != num_classes:
        raise ValueError(f"label length {arr.shape[-1]} != number of classes {num_classes}")
    if not (np.all((arr == 0) | (arr == 1)) and np.all(arr.sum(axis=-1) == 1)):
        raise ValueError("labels must be one-hot")
    return arr
