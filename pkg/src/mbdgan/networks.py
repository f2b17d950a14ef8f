"""Conditional generator, multi-branch discriminator, refiner and evaluation classifier."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigurationError, Tensor
from .layers import Conv2d, ConvTranspose2d, Dense, InstanceNorm, Module, check_one_hot

LEAK = 0.2


@dataclass
class GeneratorSpec:
    in_channels: int = 3
    base_channels: int = 32
    n_downsample: int = 2
    n_res_blocks: int = 4
    num_classes: int = 3
    image_side: int = 64
    edge_kernel: int = 7

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigurationError("generator needs at least 2 classes")
        if self.image_side % (2**self.n_downsample):
            raise ConfigurationError(f"image_side {self.image_side} not divisible by 2^{self.n_downsample}")
        if self.edge_kernel % 2 == 0:
            raise ConfigurationError("edge_kernel must be odd")

    @property
    def bottleneck_channels(self) -> int:
        return self.base_channels * 2**self.n_downsample


@dataclass
class MultiBranchDiscriminatorSpec:
    branches: int = 4
    base_channels: int = 64
    n_layers: int = 4
    num_classes: int = 3
    image_side: int = 64
    in_channels: int = 3
    max_channels: int | None = None
    head_bias: bool = False

    def validate(self) -> None:
        if not 1 <= self.branches <= self.base_channels:
            raise ConfigurationError(f"branches must lie in [1, {self.base_channels}], got {self.branches}")
        if self.base_channels % self.branches:
            raise ConfigurationError(
                f"base_channels {self.base_channels} is not divisible by branches {self.branches}"
            )
        if self.max_channels is not None and self.max_channels % self.branches:
            raise ConfigurationError(f"max_channels {self.max_channels} is not divisible by branches {self.branches}")
        if self.image_side % (2**self.n_layers):
            raise ConfigurationError(f"image_side {self.image_side} not divisible by 2^{self.n_layers}")

    def widths(self) -> list[int]:
        """Total channel count (all branches together) of each body layer."""
        out = []
        for layer in range(self.n_layers):
            c = self.base_channels * 2**layer
            if self.max_channels is not None:
                c = min(c, self.max_channels)
            out.append(c)
        return out

    @property
    def final_side(self) -> int:
        return self.image_side // 2**self.n_layers


# ---------------------------------------------------------------------------
# label conditioning
# ---------------------------------------------------------------------------


def _label_tensor(c, num_classes: int, dtype) -> Tensor:
    return Tensor(check_one_hot(c, num_classes).astype(dtype))


def label_to_input_map(c, w_o: Dense, side: int) -> Tensor:
    """Project a one-hot label to a single side x side channel.

    A projection with one output is broadcast over the whole map (a spatially
    constant label plane); one with ``side * side`` outputs is reshaped.
    """
    lab = _label_tensor(c, w_o.fin, w_o.weight.dtype)
    b = lab.shape[0]
    if w_o.fout == 1:
        return w_o(lab).reshape(b, 1, 1, 1) * Tensor(np.ones((1, 1, side, side), dtype=w_o.weight.dtype))
    if w_o.fout != side * side:
        raise ConfigurationError(f"input map projection has {w_o.fout} outputs, need 1 or {side * side}")
    return w_o(lab).reshape(b, 1, side, side)


def label_to_bottleneck_mod(c, w_t: Dense, features: Tensor) -> Tensor:
    """``features * (1 + gamma) + beta`` with (gamma, beta) = dense(c) split in half."""
    channels = features.shape[1]
    if w_t.fout != 2 * channels:
        raise ConfigurationError(f"modulation size {w_t.fout} != 2 x {channels} channels")
    lab = _label_tensor(c, w_t.fin, w_t.weight.dtype)
    gb = w_t(lab)
    b = lab.shape[0]
    gamma = gb[:, :channels].reshape(b, channels, 1, 1)
    beta = gb[:, channels:].reshape(b, channels, 1, 1)
    return features * (gamma + 1.0) + beta


# ---------------------------------------------------------------------------
# generator
# ---------------------------------------------------------------------------


class ResBlock(Module):
    def __init__(self, ch, *, rng, dtype):
        super().__init__()
        self.conv1 = Conv2d(ch, ch, 3, 1, 1, rng=rng, dtype=dtype)
        self.norm1 = InstanceNorm(ch, dtype=dtype)
        self.conv2 = Conv2d(ch, ch, 3, 1, 1, rng=rng, dtype=dtype)
        self.norm2 = InstanceNorm(ch, dtype=dtype)

    def forward(self, x):
        h = ad.relu(self.norm1(self.conv1(x)))
        return x + self.norm2(self.conv2(h))


class Generator(Module):
    """Encoder / residual bottleneck / decoder translating images between classes.

    The source label enters as one extra input channel and the target label as
    a per-channel affine modulation after the last residual block.
    """

    def __init__(self, spec: GeneratorSpec, rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        spec.validate()
        self.spec = spec
        rng = rng or np.random.default_rng(0)
        side, k = spec.image_side, spec.edge_kernel
        ch = spec.base_channels
        # spatially constant label plane, as in label-tiling conditional generators
        self.w_o = Dense(spec.num_classes, 1, rng=rng, dtype=dtype, scale=1.0)
        self.conv_in = Conv2d(spec.in_channels + 1, ch, k, 1, k // 2, rng=rng, dtype=dtype)
        self.norm_in = InstanceNorm(ch, dtype=dtype)
        self.down = []
        for i in range(spec.n_downsample):
            conv = self.add_module(f"down{i}", Conv2d(ch, ch * 2, 4, 2, 1, rng=rng, dtype=dtype))
            norm = self.add_module(f"down{i}_norm", InstanceNorm(ch * 2, dtype=dtype))
            self.down.append((conv, norm))
            ch *= 2
        self.blocks = [self.add_module(f"res{i}", ResBlock(ch, rng=rng, dtype=dtype)) for i in range(spec.n_res_blocks)]
        self.w_t = Dense(spec.num_classes, 2 * ch, rng=rng, dtype=dtype, scale=0.5)
        self.up = []
        for i in range(spec.n_downsample):
            conv = self.add_module(f"up{i}", ConvTranspose2d(ch, ch // 2, 4, 2, 1, rng=rng, dtype=dtype))
            norm = self.add_module(f"up{i}_norm", InstanceNorm(ch // 2, dtype=dtype))
            self.up.append((conv, norm))
            ch //= 2
        self.conv_out = Conv2d(ch, spec.in_channels, k, 1, k // 2, rng=rng, dtype=dtype)
        self.conv_out.weight.data *= 0.1
        self.trace: tuple[np.ndarray, np.ndarray] | None = None

    def forward(self, x: Tensor, c_in, c_bn) -> Tensor:
        spec = self.spec
        if x.ndim != 4 or x.shape[1:] != (spec.in_channels, spec.image_side, spec.image_side):
            raise ValueError(f"generator expects (B, {spec.in_channels}, {spec.image_side}, {spec.image_side}), got {x.shape}")
        cin = check_one_hot(c_in, spec.num_classes)
        cbn = check_one_hot(c_bn, spec.num_classes)
        if cin.shape[0] != x.shape[0] or cbn.shape[0] != x.shape[0]:
            raise ValueError("one label per image is required")
        self.trace = (cin.argmax(axis=1), cbn.argmax(axis=1))
        h = ad.concat([x, label_to_input_map(cin, self.w_o, spec.image_side)], axis=1)
        h = ad.relu(self.norm_in(self.conv_in(h)))
        for conv, norm in self.down:
            h = ad.relu(norm(conv(h)))
        for block in self.blocks:
            h = block(h)
        h = label_to_bottleneck_mod(cbn, self.w_t, h)
        for conv, norm in self.up:
            h = ad.relu(norm(conv(h)))
        return ad.tanh(self.conv_out(h))

    def translate(self, x: Tensor, source, target) -> Tensor:
        return self.forward(x, source, target)

    def recycle(self, x: Tensor, target) -> Tensor:
        return self.forward(x, target, target)


def build_generator(spec: GeneratorSpec, seed: int = 0, dtype=np.float32) -> Generator:
    return Generator(spec, np.random.default_rng(seed), dtype)


def generator_forward(g: Generator, x: Tensor, c_in, c_bn) -> Tensor:
    return g(x, c_in, c_bn)


# ---------------------------------------------------------------------------
# multi-branch discriminator
# ---------------------------------------------------------------------------


@dataclass
class BranchOutput:
    adv: Tensor  # (B, 1, h, w) probabilities
    cls: Tensor  # (B, K) logits


@dataclass
class DiscriminatorOutput:
    branches: list[BranchOutput]
    adv_mean: Tensor
    cls_prob_mean: Tensor
    extras: dict = field(default_factory=dict)

    @property
    def adv(self) -> list[Tensor]:
        return [b.adv for b in self.branches]

    @property
    def cls(self) -> list[Tensor]:
        return [b.cls for b in self.branches]


class MultiBranchDiscriminator(Module):
    """N parameter-disjoint patch discriminators sharing only the input image.

    Branches are stored as grouped convolutions: output channel block ``b`` of
    every layer belongs to branch ``b``. The first layer sees the full input
    in every branch, so it is an ordinary convolution whose output channels are
    partitioned by branch.
    """

    def __init__(self, spec: MultiBranchDiscriminatorSpec, rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        spec.validate()
        self.spec = spec
        rng = rng or np.random.default_rng(0)
        n = spec.branches
        widths = spec.widths()
        self.body = []
        cin = spec.in_channels
        for i, cout in enumerate(widths):
            groups = 1 if i == 0 else n
            role = "first" if i == 0 else "hidden"
            conv = Conv2d(cin, cout, 4, 2, 1, groups=groups, rng=rng, dtype=dtype, slope=LEAK, role=role)
            self.body.append(self.add_module(f"conv{i}", conv))
            cin = cout
        self.adv_head = Conv2d(cin, n, 3, 1, 1, bias=spec.head_bias, groups=n, rng=rng, dtype=dtype, role="head")
        self.cls_head = Conv2d(
            cin, n * spec.num_classes, spec.final_side, 1, 0, bias=spec.head_bias, groups=n, rng=rng, dtype=dtype, role="head"
        )
        for head in (self.adv_head, self.cls_head):
            head.weight.data *= 0.5

    def forward(self, img: Tensor) -> DiscriminatorOutput:
        spec = self.spec
        if img.ndim != 4 or img.shape[1:] != (spec.in_channels, spec.image_side, spec.image_side):
            raise ValueError(f"discriminator expects (B, {spec.in_channels}, {spec.image_side}, {spec.image_side}), got {img.shape}")
        h = img
        for conv in self.body:
            h = ad.leaky_relu(conv(h), LEAK)
        b, n, k = img.shape[0], spec.branches, spec.num_classes
        adv = ad.sigmoid(self.adv_head(h))
        logits = self.cls_head(h).reshape(b, n, k)
        probs = ad.softmax(logits, axis=-1)
        outs = [BranchOutput(adv[:, i : i + 1], logits[:, i]) for i in range(n)]
        return DiscriminatorOutput(outs, adv.mean(axis=1, keepdims=True), probs.mean(axis=1))

    def branch_slices(self, branch: int) -> list[tuple[Tensor, slice]]:
        """(parameter, leading-axis slice) pairs owned by ``branch``."""
        out = []
        for conv in [*self.body, self.adv_head, self.cls_head]:
            per = conv.cout // self.spec.branches
            sl = slice(branch * per, (branch + 1) * per)
            out.append((conv.weight, sl))
            if conv.bias is not None:
                out.append((conv.bias, sl))
        return out

    def clone_branch(self, source: int = 0) -> None:
        """Overwrite every branch with a copy of ``source``."""
        src = self.branch_slices(source)
        for b in range(self.spec.branches):
            for (p, sl), (_, ssl) in zip(self.branch_slices(b), src):
                p.data[sl] = p.data[ssl]


def build_discriminator(spec: MultiBranchDiscriminatorSpec, seed: int = 0, dtype=np.float32) -> MultiBranchDiscriminator:
    return MultiBranchDiscriminator(spec, np.random.default_rng(seed), dtype)


def discriminator_forward(d: MultiBranchDiscriminator, img: Tensor) -> DiscriminatorOutput:
    return d(img)


# ---------------------------------------------------------------------------
# refiner and evaluation classifier
# ---------------------------------------------------------------------------


class Refiner(Module):
    """Two-level encoder/decoder with skip connections (label free)."""

    def __init__(self, base_channels: int = 16, in_channels: int = 3, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        c = base_channels
        self.enc0 = Conv2d(in_channels, c, 3, 1, 1, rng=rng, dtype=dtype)
        self.enc1 = Conv2d(c, 2 * c, 4, 2, 1, rng=rng, dtype=dtype)
        self.enc1_norm = InstanceNorm(2 * c, dtype=dtype)
        self.enc2 = Conv2d(2 * c, 4 * c, 4, 2, 1, rng=rng, dtype=dtype)
        self.enc2_norm = InstanceNorm(4 * c, dtype=dtype)
        self.dec2 = ConvTranspose2d(4 * c, 2 * c, 4, 2, 1, rng=rng, dtype=dtype)
        self.dec2_norm = InstanceNorm(2 * c, dtype=dtype)
        self.dec1 = ConvTranspose2d(4 * c, c, 4, 2, 1, rng=rng, dtype=dtype)
        self.dec1_norm = InstanceNorm(c, dtype=dtype)
        self.out = Conv2d(2 * c, in_channels, 3, 1, 1, rng=rng, dtype=dtype)
        self.out.weight.data[:] = 0
        self.out.bias.data[:] = 0

    def forward(self, x: Tensor) -> Tensor:
        e0 = ad.leaky_relu(self.enc0(x), LEAK)
        e1 = ad.leaky_relu(self.enc1_norm(self.enc1(e0)), LEAK)
        e2 = ad.leaky_relu(self.enc2_norm(self.enc2(e1)), LEAK)
        d2 = ad.relu(self.dec2_norm(self.dec2(e2)))
        d1 = ad.relu(self.dec1_norm(self.dec1(ad.concat([d2, e1], axis=1))))
        # residual in pre-activation space: a zero correction returns the input unchanged
        base = Tensor(np.arctanh(np.clip(x.data, -1 + 1e-6, 1 - 1e-6)))
        return ad.tanh(self.out(ad.concat([d1, e0], axis=1)) + base)


class Classifier(Module):
    """Four stride-2 conv layers, global average pooling, linear read-out."""

    def __init__(self, num_classes: int, base_channels: int = 16, in_channels: int = 3, rng=None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        c = base_channels
        widths = [c, 2 * c, 4 * c, 4 * c]
        self.convs = []
        cin = in_channels
        for i, cout in enumerate(widths):
            self.convs.append(self.add_module(f"conv{i}", Conv2d(cin, cout, 4, 2, 1, rng=rng, dtype=dtype, slope=LEAK)))
            cin = cout
        self.fc = Dense(cin, num_classes, rng=rng, dtype=dtype)
        self.num_classes = num_classes

    def forward(self, x: Tensor) -> Tensor:
        h = x
        for conv in self.convs:
            h = ad.leaky_relu(conv(h), LEAK)
        return self.fc(h.mean(axis=(2, 3)))
