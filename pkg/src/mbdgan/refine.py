"""Refiner training: undo nearest-neighbour down/up-sampling on full-size images."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .audit import PatchDiscriminator
from .autodiff import Tape, Tensor
from .data import make_refiner_pairs
from .losses import adv_loss, l1_loss
from .networks import Refiner
from .training import AdamState, frozen, optimizer_update, read_tensors, write_tensors


@dataclass
class RefinerConfig:
    low_side: int = 8
    epochs: int = 10
    batch_size: int = 16
    lr: float = 2e-4
    betas: tuple[float, float] = (0.5, 0.999)
    lambda_l1: float = 100.0
    base_channels: int = 8
    seed: int = 0


@dataclass
class RefinerResult:
    refiner: Refiner
    history: list[dict] = field(default_factory=list)


def _critic(seed: int) -> PatchDiscriminator:
    # conditional on the degraded input: 6 channels in, one patch map out
    return PatchDiscriminator(6, [16, 32, 64], [2, 2, 1], norm="affine", hidden_bias=False, seed=seed)


def train_refiner(images: np.ndarray, cfg: RefinerConfig = RefinerConfig()) -> RefinerResult:
    """Fit a refiner on (degraded, original) pairs built from ``images``.

    Generator loss: non-saturating patch adversarial term plus ``lambda_l1``
    times the L1 distance to the original.
    """
    rng = np.random.default_rng(cfg.seed)
    low, high = make_refiner_pairs(images, cfg.low_side)
    refiner = Refiner(cfg.base_channels, images.shape[1], rng=rng)
    critic = _critic(cfg.seed + 1)
    r_params = dict(refiner.named_parameters())
    c_params = dict(critic.named_parameters())
    r_opt, c_opt = AdamState(), AdamState()
    result = RefinerResult(refiner)
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(images))
        totals = np.zeros(3)
        batches = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xl, xh = Tensor(low[idx]), Tensor(high[idx])
            with Tape() as tape:
                out = refiner(xl)
                with frozen(critic):
                    fake_score = critic(ad.concat([xl, out], axis=1))
                _, adv_g = adv_loss(None, fake_score)
                l1 = l1_loss(out, xh)
                loss_r = adv_g + cfg.lambda_l1 * l1
            grads = ad.backward(tape, loss_r, r_params.values())
            optimizer_update(r_params, {n: grads[p] for n, p in r_params.items()}, r_opt, cfg.lr, cfg.betas)
            detached = Tensor(out.data)
            with Tape() as tape:
                real_score = critic(ad.concat([xl, xh], axis=1))
                fake_score = critic(ad.concat([xl, detached], axis=1))
                adv_d, _ = adv_loss(real_score, fake_score)
            grads = ad.backward(tape, -adv_d, c_params.values())
            optimizer_update(c_params, {n: grads[p] for n, p in c_params.items()}, c_opt, cfg.lr, cfg.betas)
            for p in (*r_params.values(), *c_params.values()):
                p.grad = None
            totals += (float(adv_d.data), float(adv_g.data), float(l1.data))
            batches += 1
        adv_d_m, adv_g_m, l1_m = totals / max(batches, 1)
        result.history.append({"epoch": epoch + 1, "adv_d": adv_d_m, "adv_g": adv_g_m, "l1": l1_m})
    return result


def apply_refiner(refiner: Refiner, images: np.ndarray, batch_size: int = 32) -> np.ndarray:
    outs = [refiner(Tensor(images[i : i + batch_size])).data for i in range(0, len(images), batch_size)]
    return np.concatenate(outs) if outs else np.zeros_like(images)


@dataclass
class RefinerGain:
    l1_degraded: float
    l1_refined: float

    @property
    def improved(self) -> bool:
        return self.l1_refined < self.l1_degraded


def refiner_gain(refiner: Refiner, images: np.ndarray, low_side: int = 8) -> RefinerGain:
    """Mean L1 to the originals before and after refining held-out pairs."""
    low, high = make_refiner_pairs(images, low_side)
    refined = apply_refiner(refiner, low)
    return RefinerGain(float(np.abs(low - high).mean()), float(np.abs(refined - high).mean()))


def save_refiner(directory, refiner: Refiner, cfg: RefinerConfig) -> Path:
    directory = Path(directory)
    write_tensors(directory, refiner.state_dict())
    (directory / "refiner.json").write_text(json.dumps(asdict(cfg), indent=1))
    return directory


def load_refiner(directory) -> tuple[Refiner, RefinerConfig]:
    directory = Path(directory)
    if not (directory / "refiner.json").exists():
        raise FileNotFoundError(f"no refiner checkpoint found in {directory}")
    meta = json.loads((directory / "refiner.json").read_text())
    meta["betas"] = tuple(meta["betas"])
    cfg = RefinerConfig(**meta)
    refiner = Refiner(cfg.base_channels)
    refiner.load_state_dict(read_tensors(directory))
    return refiner, cfg
