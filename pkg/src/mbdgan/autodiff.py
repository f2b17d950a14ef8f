"""Minimal reverse-mode automatic differentiation over numpy arrays.

Operations executed while a :class:`Tape` is active (``with Tape() as tape:``)
and touching at least one tensor with ``requires_grad`` are recorded in
creation order. Because every op is appended after its inputs exist, the
recorded list is already topologically sorted, and :func:`backward` simply
walks it in reverse.

Outside of a tape nothing is recorded, which doubles as inference mode.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

LOG_FLOOR = 1e-8

_state = threading.local()


class ConfigurationError(ValueError):
    """Raised when shapes or hyper-parameters cannot be combined."""


class Tensor:
    """Dense array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- conveniences -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not part of the primitive set")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def parameter(data, name: str | None = None, dtype=np.float32) -> Tensor:
    return Tensor(np.array(data, dtype=dtype), requires_grad=True, name=name)


def _as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or np.float32))


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


class Tape:
    """Records differentiable ops executed inside its ``with`` block."""

    def __init__(self):
        self.nodes: list[Tensor] = []
        self.leaves: dict[int, Tensor] = {}

    def __enter__(self) -> Tape:
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def record(self, node: Tensor) -> None:
        for p in node._parents:
            if p.requires_grad and p.is_leaf:
                self.leaves.setdefault(id(p), p)
        self.nodes.append(node)


def _tape_stack() -> list[Tape]:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def current_tape() -> Tape | None:
    stack = _tape_stack()
    return stack[-1] if stack else None


class no_tape:
    """Temporarily suspend recording (e.g. for detached forward passes)."""

    def __enter__(self):
        self._saved = list(_tape_stack())
        _tape_stack().clear()

    def __exit__(self, *exc):
        stack = _tape_stack()
        stack.clear()
        stack.extend(self._saved)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    tape = current_tape()
    if tape is None or not any(p.requires_grad for p in parents):
        return Tensor(data)
    out = Tensor(data, requires_grad=True)
    out._parents = tuple(parents)
    out._backward = backward
    tape.record(out)
    return out


def backward(tape: Tape, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(leaf) through ``tape``.

    Gradients are accumulated into each reached leaf's ``.grad`` and also
    returned as a mapping. Leaves listed in ``params`` that the loss does not
    depend on map to zero arrays.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaf_grads: dict[int, np.ndarray] = {}
    if loss.is_leaf and loss.requires_grad:
        leaf_grads[id(loss)] = grads[id(loss)]
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            target = leaf_grads if p.is_leaf else grads
            key = id(p)
            if key in target:
                target[key] = target[key] + pg
            else:
                target[key] = pg

    out: dict[Tensor, np.ndarray] = {}
    leaves = dict(tape.leaves)
    if loss.is_leaf and loss.requires_grad:
        leaves[id(loss)] = loss
    for p in params or ():
        leaves.setdefault(id(p), p)
    for key, leaf in leaves.items():
        g = leaf_grads.get(key)
        if g is None:
            g = np.zeros_like(leaf.data)
        else:
            g = g.astype(leaf.dtype, copy=False)
        leaf.grad = g if leaf.grad is None else leaf.grad + g
        out[leaf] = g
    return out


# ---------------------------------------------------------------------------
# elementwise / structural ops
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, getattr(b, "dtype", None))
    b = _as_tensor(b, a.dtype)
    ad, bd = a.data, b.data
    return _make(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def take(a: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing."""
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] += g
        return (full,)

    return _make(a.data[index], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    data = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _make(data, tuple(tensors), bw)


def stack_mean(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise arithmetic mean of equally shaped tensors."""
    total = tensors[0]
    for t in tensors[1:]:
        total = add(total, t)
    return mul(total, 1.0 / len(tensors))


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _make(a.data * scale, (a,), lambda g: (g * scale,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    y = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(a.dtype)
    return _make(y, (a,), lambda g: (g * y * (1 - y),))


def log(a: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log of max(a, floor); clamped entries get zero gradient."""
    x = a.data
    live = x > floor
    y = np.log(np.where(live, x, floor)).astype(a.dtype)
    safe = np.where(live, x, 1)
    return _make(y, (a,), lambda g: (np.where(live, g / safe, 0).astype(g.dtype),))


def tabs(a: Tensor) -> Tensor:
    s = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * s,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), bw)


# ---------------------------------------------------------------------------
# linear layers
# ---------------------------------------------------------------------------


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` laid out as (in_features, out_features)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ConfigurationError(f"dense: cannot multiply {x.shape} by {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ConfigurationError(f"dense: bias {bias.shape} does not match {weight.shape[1]} outputs")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out = out + bias.data

    def bw(g):
        grads = [g @ wd.T if x.requires_grad else None, xd.T @ g if weight.requires_grad else None]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, bw)


def _im2col(xp: np.ndarray, k: int, stride: int, groups: int) -> tuple[np.ndarray, int, int]:
    """(N, C, Hp, Wp) -> (groups, C/groups*k*k, N*Ho*Wo) patch matrix."""
    n, c, hp, wp = xp.shape
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    xt = np.ascontiguousarray(xp.transpose(1, 0, 2, 3))
    cols = np.empty((c, k, k, n, ho, wo), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = xt[:, :, i : i + hspan : stride, j : j + wspan : stride]
    return cols.reshape(groups, (c // groups) * k * k, n * ho * wo), ho, wo


def _col2im(cols: np.ndarray, padded_shape, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add patches back into an image."""
    n, c, hp, wp = padded_shape
    patches = cols.reshape(c, k, k, n, ho, wo)
    out = np.zeros((c, n, hp, wp), dtype=cols.dtype)
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + hspan : stride, j : j + wspan : stride] += patches[:, i, j]
    return out.transpose(1, 0, 2, 3)


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0, groups: int = 1) -> Tensor:
    """Cross-correlation; ``weight`` is (Cout, Cin/groups, k, k)."""
    n, cin, h, w = x.shape
    cout, cin_g, k, k2 = weight.shape
    if k != k2:
        raise ConfigurationError("conv2d: only square kernels are supported")
    if cin_g * groups != cin or cout % groups:
        raise ConfigurationError(f"conv2d: input has {cin} channels, weight expects {cin_g}x{groups}")
    if k < 1 or stride < 1 or h + 2 * pad < k or w + 2 * pad < k:
        raise ConfigurationError(f"conv2d: kernel {k} does not fit input {h}x{w} with pad {pad}")
    cout_g = cout // groups
    xp = _pad(x.data, pad)
    cols, ho, wo = _im2col(xp, k, stride, groups)
    wm = weight.data.reshape(groups, cout_g, cin_g * k * k)
    out = np.matmul(wm, cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def bw(g):
        gm = g.transpose(1, 0, 2, 3).reshape(groups, cout_g, n * ho * wo)
        gw = np.matmul(gm, cols.transpose(0, 2, 1)).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = np.matmul(wm.transpose(0, 2, 1), gm)
            gxp = _col2im(gcols, xp.shape, k, stride, ho, wo)
            gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(np.ascontiguousarray(out), parents, bw)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Adjoint of :func:`conv2d`; ``weight`` is (Cin, Cout, k, k)."""
    n, cin, h, w = x.shape
    if weight.shape[0] != cin:
        raise ConfigurationError(f"conv_transpose2d: input has {cin} channels, weight expects {weight.shape[0]}")
    _, cout, k, _ = weight.shape
    hp, wp = (h - 1) * stride + k, (w - 1) * stride + k
    ho, wo = hp - 2 * pad, wp - 2 * pad
    if ho < 1 or wo < 1:
        raise ConfigurationError("conv_transpose2d: padding larger than output")
    xm = x.data.transpose(1, 0, 2, 3).reshape(cin, n * h * w)
    wm = weight.data.reshape(cin, cout * k * k)
    cols = wm.T @ xm
    outp = _col2im(cols, (n, cout, hp, wp), k, stride, h, w)
    out = outp[:, :, pad : pad + ho, pad : pad + wo]
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)

    def bw(g):
        gcols, _, _ = _im2col(_pad(g, pad), k, stride, 1)
        gcols = gcols[0]
        gw = (xm @ gcols.T).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gx = (wm @ gcols).reshape(cin, n, h, w).transpose(1, 0, 2, 3)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(np.ascontiguousarray(out), parents, bw)


def instance_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Per-sample, per-channel normalization over the spatial axes."""
    xd = x.data
    m = xd.shape[2] * xd.shape[3]
    mu = xd.mean(axis=(2, 3), keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=(2, 3), keepdims=True) + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data.reshape(1, -1, 1, 1) + beta.data.reshape(1, -1, 1, 1)

    def bw(g):
        dxhat = g * gamma.data.reshape(1, -1, 1, 1) if gamma is not None else g
        s1 = dxhat.sum(axis=(2, 3), keepdims=True)
        s2 = (dxhat * xhat).sum(axis=(2, 3), keepdims=True)
        gx = inv * (dxhat - s1 / m - xhat * s2 / m)
        if gamma is None:
            return (gx,)
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    parents = (x,) if gamma is None else (x, gamma, beta)
    return _make(out.astype(xd.dtype, copy=False), parents, bw)


def nearest_index(src_side: int, dst_side: int) -> np.ndarray:
    return (np.arange(dst_side) * src_side) // dst_side


def nearest_resize(x: Tensor, side: int) -> Tensor:
    """Nearest-neighbour resize of the two trailing axes to ``side``x``side``."""
    h, w = x.shape[-2:]
    ih, iw = nearest_index(h, side), nearest_index(w, side)
    out = x.data[..., ih, :][..., iw]
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, (..., ih[:, None], iw[None, :]), g)
        return (full,)

    return _make(out, (x,), bw)


# ---------------------------------------------------------------------------
# numerical gradient check
# ---------------------------------------------------------------------------


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-4) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a tensor to a scalar tensor. ``x`` is copied to float64.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(xt)
    if not np.all(np.isfinite(y.data)):
        raise FloatingPointError("grad_check: f(x) is not finite")
    analytic = backward(tape, y, params=[xt])[xt].reshape(-1)

    numeric = np.empty_like(analytic)
    flat = base.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = float(f(Tensor(base.copy())).data)
        flat[i] = old - eps
        lo = float(f(Tensor(base.copy())).data)
        flat[i] = old
        numeric[i] = (hi - lo) / (2 * eps)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + np.abs(numeric) + 1e-8)
    return float(err.max()) if err.size else 0.0
