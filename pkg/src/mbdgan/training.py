"""Alternating G/D optimisation with the epoch-gated recycling pass."""

from __future__ import annotations

import contextlib
import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigurationError, Tape, Tensor
from .data import Prefetcher, iterate_batches, save_grid
from .layers import Module, one_hot
from .losses import LossReport, adv_loss, cls_loss, cycle_loss
from .networks import Generator, GeneratorSpec, MultiBranchDiscriminator, MultiBranchDiscriminatorSpec

log = logging.getLogger(__name__)

HISTORY_COLUMNS = ("step", "epoch", "adv_d", "adv_g", "cls_real", "cls_fake", "cyc", "sec_per_1k")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    total_epochs: int = 50
    batch_size: int = 16
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    recycling_enabled: bool = True
    lambda_cls: float = 1.0
    lambda_cyc: float = 10.0
    seed: int = 0
    image_side: int = 64
    branches: int = 4
    non_saturating: bool = True

    def validate(self) -> None:
        if self.total_epochs < 1:
            raise ConfigurationError("total_epochs must be >= 1")
        if self.recycling_enabled and self.total_epochs < 2:
            raise ConfigurationError("recycling needs total_epochs >= 2")
        if self.lr < 0:
            raise ConfigurationError("lr must be non-negative")
        if not all(0 <= b < 1 for b in self.betas):
            raise ConfigurationError(f"betas must lie in [0, 1), got {self.betas}")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be positive")


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def optimizer_update(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState,
                     lr: float, betas=(0.5, 0.999), eps: float = 1e-8) -> None:
    """In-place Adam step.

    m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2
    p <- p - lr * (m / (1-b1^t)) / (sqrt(v / (1-b2^t)) + eps)
    """
    b1, b2 = betas
    state.t += 1
    c1 = 1 - b1**state.t
    c2 = 1 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise TrainingError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        if lr == 0:
            continue
        step = (lr / c1) * m / (np.sqrt(v / c2) + eps)
        p.data = p.data - step.astype(p.dtype, copy=False)


@contextlib.contextmanager
def frozen(module: Module):
    """Stop parameter gradients of ``module`` while still propagating through it."""
    params = module.parameters()
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, s in zip(params, saved):
            p.requires_grad = s


# ---------------------------------------------------------------------------
# state
# ---------------------------------------------------------------------------


@dataclass
class HistoryRow:
    step: int
    epoch: int
    report: LossReport
    sec_per_1k: float = float("nan")

    def csv_row(self) -> list:
        r = self.report
        return [self.step, self.epoch, r.adv_d, r.adv_g, r.cls_real, r.cls_fake, r.cyc, self.sec_per_1k]


@dataclass
class GAN:
    generator: Generator
    discriminator: MultiBranchDiscriminator

    @classmethod
    def build(cls, gspec: GeneratorSpec, dspec: MultiBranchDiscriminatorSpec, seed: int = 0, dtype=np.float32) -> GAN:
        if gspec.num_classes != dspec.num_classes or gspec.image_side != dspec.image_side:
            raise ConfigurationError("generator and discriminator disagree on classes or image size")
        rng = np.random.default_rng(seed)
        return cls(Generator(gspec, rng, dtype), MultiBranchDiscriminator(dspec, rng, dtype))

    @property
    def num_classes(self) -> int:
        return self.generator.spec.num_classes


@dataclass
class TrainState:
    epoch: int = 0  # completed epochs
    step: int = 0
    g_opt: AdamState = field(default_factory=AdamState)
    d_opt: AdamState = field(default_factory=AdamState)
    history: list[HistoryRow] = field(default_factory=list)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    seconds: float = 0.0

    @classmethod
    def fresh(cls, seed: int) -> TrainState:
        return cls(rng=np.random.default_rng(seed))


def recycling_gate(epoch: int, total_epochs: int) -> bool:
    """Recycling runs only once ``epoch`` exceeds half the epoch budget."""
    return epoch > total_epochs / 2


# ---------------------------------------------------------------------------
# one step
# ---------------------------------------------------------------------------


def _finite_or_raise(value: float, what: str, state: TrainState) -> None:
    if not np.isfinite(value):
        raise TrainingError(f"non-finite {what} ({value}) at epoch {state.epoch + 1}, step {state.step}; step aborted")


def sample_targets(rng: np.random.Generator, labels: np.ndarray, k: int) -> np.ndarray:
    """Uniform over the k-1 labels different from each source label."""
    return (labels + rng.integers(1, k, size=labels.shape)) % k


def d_objective(gan: GAN, x: Tensor, fake: Tensor, c_src: np.ndarray, cfg: TrainConfig):
    out_real = gan.discriminator(x)
    out_fake = gan.discriminator(fake)
    d_term, _ = adv_loss(out_real.adv, out_fake.adv, cfg.non_saturating)
    cls_real, _ = cls_loss(out_real.cls, c_src, None, None)
    return -d_term + cls_real * cfg.lambda_cls, d_term, cls_real


def train_step(gan: GAN, batch_x: np.ndarray, batch_y: np.ndarray, state: TrainState, cfg: TrainConfig) -> LossReport:
    g, d = gan.generator, gan.discriminator
    k = gan.num_classes
    labels = np.asarray(batch_y, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"batch labels outside [0, {k})")
    targets = sample_targets(state.rng, labels, k)
    c_src, c_tgt = one_hot(labels, k, batch_x.dtype), one_hot(targets, k, batch_x.dtype)
    x = Tensor(batch_x)
    epoch_now = state.epoch + 1
    recycle = cfg.recycling_enabled and recycling_gate(epoch_now, cfg.total_epochs)

    g_params = dict(g.named_parameters())
    d_params = dict(d.named_parameters())

    g_tape = Tape()
    with g_tape:
        fake = g(x, c_src, c_tgt)

    # (1) discriminator on real images and detached translations
    with Tape() as d_tape:
        loss_d, d_term, cls_real = d_objective(gan, x, fake.detach(), c_src, cfg)
    _finite_or_raise(float(loss_d.data), "discriminator loss", state)
    grads = ad.backward(d_tape, loss_d, d_params.values())
    # kept so a failing G step can undo the D update and leave the state untouched
    d_saved = ({n: p.data for n, p in d_params.items()}, copy.deepcopy(state.d_opt))
    optimizer_update(d_params, {n: grads[p] for n, p in d_params.items()}, state.d_opt, cfg.lr, cfg.betas)

    # (2) generator: adversarial + class on the translation, cycle back to the source
    with frozen(d), g_tape:
        out = d(fake)
        _, g_adv = adv_loss(None, out.adv, cfg.non_saturating)
        _, cls_fake = cls_loss(None, None, out.cls, c_tgt)
        back = g(fake, c_src, c_src)
        cyc = cycle_loss(x, back)
        loss_g = g_adv + cls_fake * cfg.lambda_cls + cyc * cfg.lambda_cyc
        # (3) recycling pass: same weights, target label at both positions
        if recycle:
            rec = g(fake, c_tgt, c_tgt)
            out_r = d(rec)
            _, g_adv_r = adv_loss(None, out_r.adv, cfg.non_saturating)
            _, cls_r = cls_loss(None, None, out_r.cls, c_tgt)
            loss_g = loss_g + g_adv_r + cls_r * cfg.lambda_cls
    if not np.isfinite(float(loss_g.data)):
        for n, p in d_params.items():
            p.data = d_saved[0][n]
        state.d_opt = d_saved[1]
        _finite_or_raise(float(loss_g.data), "generator loss", state)
    grads = ad.backward(g_tape, loss_g, g_params.values())
    optimizer_update(g_params, {n: grads[p] for n, p in g_params.items()}, state.g_opt, cfg.lr, cfg.betas)
    for p in (*g_params.values(), *d_params.values()):
        p.grad = None

    return LossReport(
        adv_d=float(d_term.data), adv_g=float(g_adv.data), cls_real=float(cls_real.data),
        cls_fake=float(cls_fake.data), cyc=float(cyc.data), total_d=float(loss_d.data), total_g=float(loss_g.data),
    )


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


def train_loop(cfg: TrainConfig, gan: GAN, train_x: np.ndarray, train_y: np.ndarray, *, state: TrainState | None = None,
               out_dir=None, checkpoint_every: int = 0, sample_every: int = 0, until_epoch: int | None = None,
               on_epoch: Callable[[GAN, TrainState], None] | None = None) -> TrainState:
    """Run epochs ``state.epoch+1 .. until_epoch`` (default: the full budget)."""
    cfg.validate()
    train_y = np.asarray(train_y, dtype=np.int64)
    if len(train_y) == 0:
        raise ConfigurationError("empty training set")
    if len(np.unique(train_y)) < 2:
        raise ConfigurationError("training set must contain at least two classes")
    state = state or TrainState.fresh(cfg.seed)
    stop = cfg.total_epochs if until_epoch is None else min(until_epoch, cfg.total_epochs)
    out = Path(out_dir) if out_dir else None
    n = len(train_y)
    while state.epoch < stop:
        order = state.rng.permutation(n)
        batches = Prefetcher(((train_x[idx], train_y[idx]) for idx in iterate_batches(n, cfg.batch_size, order)), depth=2)
        for bx, by in batches:
            t0 = time.perf_counter()
            report = train_step(gan, bx, by, state, cfg)
            state.seconds += time.perf_counter() - t0
            state.step += 1
            state.history.append(HistoryRow(state.step, state.epoch + 1, report, 1000.0 * state.seconds / state.step))
        state.epoch += 1
        last = state.history[-1].report
        log.info("epoch %d/%d step %d  adv_d %.3f adv_g %.3f cls_r %.3f cls_f %.3f cyc %.3f", state.epoch,
                 cfg.total_epochs, state.step, last.adv_d, last.adv_g, last.cls_real, last.cls_fake, last.cyc)
        if out is not None:
            if sample_every and (state.epoch % sample_every == 0 or state.epoch == stop):
                write_samples(gan, train_x[:4], train_y[:4], out / "samples" / f"epoch_{state.epoch:03d}.png")
            if checkpoint_every and (state.epoch % checkpoint_every == 0 or state.epoch == stop):
                save_checkpoint(out / "checkpoints" / f"epoch_{state.epoch:03d}", gan, state, cfg)
        if on_epoch is not None:
            on_epoch(gan, state)
    return state


def translate_batch(g: Generator, x: np.ndarray, source, target, batch_size: int = 32) -> np.ndarray:
    k = g.spec.num_classes
    src = np.broadcast_to(np.asarray(source), (len(x),))
    tgt = np.broadcast_to(np.asarray(target), (len(x),))
    outs = []
    for i in range(0, len(x), batch_size):
        xb = Tensor(x[i : i + batch_size])
        outs.append(g(xb, one_hot(src[i : i + batch_size], k, x.dtype), one_hot(tgt[i : i + batch_size], k, x.dtype)).data)
    return np.concatenate(outs) if outs else np.zeros_like(x)


def recycle_batch(g: Generator, x: np.ndarray, target, batch_size: int = 32) -> np.ndarray:
    return translate_batch(g, x, target, target, batch_size)


def write_samples(gan: GAN, x: np.ndarray, y: np.ndarray, path) -> None:
    """Row 0: inputs; row 1+k: translation of every input to class k."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [x]
    for t in range(gan.num_classes):
        rows.append(translate_batch(gan.generator, x, y, t))
    save_grid(path, rows)


# ---------------------------------------------------------------------------
# checkpoints: text manifest + one little-endian float32 blob
# ---------------------------------------------------------------------------

MANIFEST = "tensors.manifest"
BLOB = "tensors.bin"


def write_tensors(directory, tensors: dict[str, np.ndarray]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    offset = 0
    lines = []
    with open(directory / BLOB, "wb") as fh:
        for name, arr in tensors.items():
            if any(ch.isspace() for ch in name):
                raise ValueError(f"tensor name {name!r} contains whitespace")
            buf = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            fh.write(buf)
            shape = "x".join(str(s) for s in arr.shape) or "scalar"
            lines.append(f"{name} float32 {shape} {offset}")
            offset += len(buf)
    (directory / MANIFEST).write_text("\n".join(lines) + "\n")


def read_tensors(directory) -> dict[str, np.ndarray]:
    directory = Path(directory)
    blob = (directory / BLOB).read_bytes()
    out = {}
    for line in (directory / MANIFEST).read_text().splitlines():
        if not line.strip():
            continue
        name, dtype, shape, offset = line.split()
        if dtype != "float32":
            raise ValueError(f"unsupported dtype {dtype} for {name}")
        dims = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
        count = int(np.prod(dims)) if dims else 1
        start = int(offset)
        out[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(dims).astype(np.float32)
    return out


def _spec_dict(obj) -> dict:
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def save_checkpoint(directory, gan: GAN, state: TrainState, cfg: TrainConfig) -> Path:
    directory = Path(directory)
    tensors = {}
    for prefix, module in (("G", gan.generator), ("D", gan.discriminator)):
        for name, p in module.named_parameters():
            tensors[f"{prefix}/{name}"] = p.data
    for prefix, opt in (("G", state.g_opt), ("D", state.d_opt)):
        for name in opt.m:
            tensors[f"adam_m/{prefix}/{name}"] = opt.m[name]
            tensors[f"adam_v/{prefix}/{name}"] = opt.v[name]
    write_tensors(directory, tensors)
    meta = {
        "epoch": state.epoch,
        "step": state.step,
        "seconds": state.seconds,
        "g_opt_t": state.g_opt.t,
        "d_opt_t": state.d_opt.t,
        "rng": state.rng.bit_generator.state,
        "train_config": asdict(cfg),
        "generator_spec": _spec_dict(gan.generator.spec),
        "discriminator_spec": _spec_dict(gan.discriminator.spec),
        "history": [{"step": h.step, "epoch": h.epoch, "sec_per_1k": h.sec_per_1k, **h.report.as_dict()} for h in state.history],
    }
    (directory / "state.json").write_text(json.dumps(meta, indent=1))
    write_history_csv(directory / "history.csv", state.history)
    return directory


def write_history_csv(path, history: list[HistoryRow]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for h in history:
            w.writerow(h.csv_row())


def load_checkpoint(directory) -> tuple[GAN, TrainState, TrainConfig]:
    directory = Path(directory)
    if not (directory / "state.json").exists() or not (directory / MANIFEST).exists():
        raise FileNotFoundError(f"no checkpoint found in {directory}")
    meta = json.loads((directory / "state.json").read_text())
    cfg_d = meta["train_config"]
    cfg_d["betas"] = tuple(cfg_d["betas"])
    cfg = TrainConfig(**cfg_d)
    gan = GAN.build(GeneratorSpec(**meta["generator_spec"]), MultiBranchDiscriminatorSpec(**meta["discriminator_spec"]))
    tensors = read_tensors(directory)
    for prefix, module in (("G", gan.generator), ("D", gan.discriminator)):
        module.load_state_dict({n[len(prefix) + 1 :]: a for n, a in tensors.items() if n.startswith(prefix + "/")})
    state = TrainState(epoch=meta["epoch"], step=meta["step"], seconds=meta["seconds"])
    state.g_opt.t, state.d_opt.t = meta["g_opt_t"], meta["d_opt_t"]
    for name, arr in tensors.items():
        if name.startswith("adam_"):
            kind, prefix, pname = name.split("/", 2)
            opt = state.g_opt if prefix == "G" else state.d_opt
            (opt.m if kind == "adam_m" else opt.v)[pname] = arr.copy()
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    state.rng = rng
    for h in meta["history"]:
        rep = LossReport(**{k: h[k] for k in ("adv_d", "adv_g", "cls_real", "cls_fake", "cyc", "total_d", "total_g")})
        state.history.append(HistoryRow(h["step"], h["epoch"], rep, h["sec_per_1k"]))
    return gan, state, cfg
