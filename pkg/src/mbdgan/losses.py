"""Branch-averaged adversarial and classification objectives."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import check_one_hot

LAMBDA_CLS = 1.0
LAMBDA_CYC = 10.0


@dataclass
class LossReport:
    adv_d: float
    adv_g: float
    cls_real: float
    cls_fake: float
    cyc: float
    total_d: float
    total_g: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)

    def is_finite(self) -> bool:
        return all(np.isfinite(v) for v in asdict(self).values())


def adv_loss(branch_real: list[Tensor] | None, branch_fake: list[Tensor], non_saturating: bool = True) -> tuple[Tensor | None, Tensor]:
    """Return ``(d_term, g_term)``.

    ``d_term`` is the value the discriminator maximises,
    (1/N) sum_i [mean log D_i(y) + mean log(1 - D_i(fake))].
    ``g_term`` is what the generator minimises: (1/N) sum_i mean log(1 - D_i(fake)),
    or (1/N) sum_i mean -log D_i(fake) when ``non_saturating``.
    ``branch_real`` may be None when only the generator term is needed.
    """
    if not branch_fake or (branch_real is not None and len(branch_real) != len(branch_fake)):
        raise ValueError("adv_loss needs one non-empty list of branch maps per side, equal lengths")
    n = len(branch_fake)
    d_parts, g_parts = [], []
    for i, fake in enumerate(branch_fake):
        log_not_fake = ad.log(1.0 - fake).mean()
        if branch_real is not None:
            d_parts.append(ad.log(branch_real[i]).mean() + log_not_fake)
        g_parts.append(-ad.log(fake).mean() if non_saturating else log_not_fake)
    d_term = _branch_mean(d_parts, n) if d_parts else None
    return d_term, _branch_mean(g_parts, n)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label], log clamped at 1e-8."""
    lab = check_one_hot(labels, logits.shape[-1]).astype(logits.dtype)
    if lab.shape[0] != logits.shape[0]:
        raise ValueError(f"{lab.shape[0]} labels for {logits.shape[0]} logits")
    logp = ad.log(ad.softmax(logits, axis=-1))
    return -(logp * lab).sum() / lab.shape[0]


def cls_loss(branch_cls_real: list[Tensor] | None, real_label, branch_cls_fake: list[Tensor] | None, target_label) -> tuple[Tensor | None, Tensor | None]:
    """Branch-averaged cross-entropy: (real images vs true labels, translated images vs target labels)."""
    real = fake = None
    if branch_cls_real:
        real = _branch_mean([cross_entropy(c, real_label) for c in branch_cls_real], len(branch_cls_real))
    if branch_cls_fake:
        fake = _branch_mean([cross_entropy(c, target_label) for c in branch_cls_fake], len(branch_cls_fake))
    if real is None and fake is None:
        raise ValueError("cls_loss needs at least one branch list")
    return real, fake


def cycle_loss(x: Tensor, x_back: Tensor) -> Tensor:
    if x.shape != x_back.shape:
        raise ValueError(f"cycle_loss: shapes differ {x.shape} vs {x_back.shape}")
    return ad.tabs(x - x_back).mean()


def l1_loss(a: Tensor, b: Tensor) -> Tensor:
    return cycle_loss(a, b)


def _branch_mean(parts: list[Tensor], n: int) -> Tensor:
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total * (1.0 / n)
