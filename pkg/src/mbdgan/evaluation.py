"""Inception score, the frozen evaluation classifier, translation metrics and timing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .audit import ParamAudit, count_parameters  # noqa: F401  (re-exported)
from .data import centroid_match
from .layers import one_hot
from .losses import cross_entropy
from .networks import Classifier, Generator
from .training import AdamState, optimizer_update, translate_batch


class EvaluationError(RuntimeError):
    pass


@dataclass
class ISReport:
    mean: float
    std: float
    splits: int
    per_split: list[float]

    def __str__(self) -> str:
        return f"{self.mean:.3f} ± {self.std:.3f} ({self.splits} split{'s' if self.splits != 1 else ''})"


def default_splits(m: int) -> int:
    return 10 if m >= 500 else 1


def inception_score(prob_matrix, splits: int | None = None) -> ISReport:
    """exp(E_x KL(p(y|x) || p(y))) per contiguous split, then mean and std."""
    p = np.asarray(prob_matrix, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] == 0:
        raise ValueError("prob_matrix must be a non-empty M x K array")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1) > 1e-6):
        raise ValueError("every row must be a probability distribution (sum to 1 within 1e-6)")
    s = default_splits(len(p)) if splits is None else splits
    if not 1 <= s <= len(p):
        raise ValueError(f"need 1 <= splits <= {len(p)}, got {s}")
    scores = []
    for part in np.array_split(p, s):
        marginal = part.mean(axis=0)
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(part > 0, part * (np.log(part) - np.log(marginal)), 0.0)
        scores.append(math.exp(terms.sum(axis=1).mean()))
    return ISReport(float(np.mean(scores)), float(np.std(scores)), s, scores)


# ---------------------------------------------------------------------------
# evaluation classifier
# ---------------------------------------------------------------------------


def predict_proba(clf: Classifier, x: np.ndarray, batch_size: int = 64) -> np.ndarray:
    outs = []
    for i in range(0, len(x), batch_size):
        outs.append(ad.softmax(clf(Tensor(x[i : i + batch_size])), axis=-1).data)
    return np.concatenate(outs).astype(np.float64)


def accuracy(clf: Classifier, x: np.ndarray, y: np.ndarray) -> float:
    return float((predict_proba(clf, x).argmax(axis=1) == np.asarray(y)).mean())


def train_eval_classifier(train_x, train_y, test_x, test_y, num_classes: int, *, epochs: int = 6, batch_size: int = 32,
                          lr: float = 2e-3, seed: int = 0, base_channels: int = 8, min_accuracy: float = 0.95,
                          ) -> tuple[Classifier, float]:
    """Fit the small conv classifier used for p(y|x); refuse if held-out accuracy < ``min_accuracy``."""
    if len(np.unique(train_y)) < num_classes:
        raise EvaluationError("classifier training data must cover every class")
    rng = np.random.default_rng(seed)
    clf = Classifier(num_classes, base_channels, train_x.shape[1], rng=rng)
    params = dict(clf.named_parameters())
    opt = AdamState()
    for _ in range(epochs):
        order = rng.permutation(len(train_y))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            with Tape() as tape:
                loss = cross_entropy(clf(Tensor(train_x[idx])), one_hot(train_y[idx], num_classes))
            grads = ad.backward(tape, loss, params.values())
            optimizer_update(params, {n: grads[p] for n, p in params.items()}, opt, lr, (0.9, 0.999))
            for p in params.values():
                p.grad = None
    acc = accuracy(clf, test_x, test_y)
    if acc < min_accuracy:
        raise EvaluationError(f"evaluation classifier reached {acc:.3f} < {min_accuracy:.2f}; scores not certified")
    return clf, acc


# ---------------------------------------------------------------------------
# translation metrics
# ---------------------------------------------------------------------------


@dataclass
class TranslationReport:
    inception: ISReport
    target_accuracy: float
    median_displacement: float | None = None
    count_match_rate: float | None = None
    failures: int = 0
    n: int = 0
    extras: dict = field(default_factory=dict)

    def lines(self) -> list[str]:
        out = [f"inception_score  {self.inception}", f"target_accuracy  {self.target_accuracy:.4f}"]
        if self.median_displacement is not None:
            out.append(f"median_centroid_displacement_px  {self.median_displacement:.3f}")
            out.append(f"count_match_rate  {self.count_match_rate:.4f}")
            out.append(f"empty_foreground_failures  {self.failures}")
        out.append(f"images  {self.n}")
        return out


def evaluate_translations(g: Generator, clf: Classifier, x: np.ndarray, y: np.ndarray, targets: np.ndarray,
                          annotations: list[dict] | None = None, refine=None, recycle: bool = False) -> TranslationReport:
    """Translate ``x`` (labels ``y``) to ``targets`` and score the outputs.

    ``recycle`` adds the second generator pass; ``refine`` is an optional
    callable applied to the final images.
    """
    out = translate_batch(g, x, y, targets)
    if recycle:
        out = translate_batch(g, out, targets, targets)
    if refine is not None:
        out = refine(out)
    probs = predict_proba(clf, out)
    report = TranslationReport(inception_score(probs), float((probs.argmax(axis=1) == targets).mean()), n=len(x))
    if annotations is not None:
        matches = [centroid_match(a, img) for a, img in zip(annotations, out)]
        disp = [m.displacement for m in matches]
        report.median_displacement = float(np.median(disp))
        report.count_match_rate = float(np.mean([m.count_match for m in matches]))
        report.failures = sum(m.failure for m in matches)
    report.extras["images"] = out
    return report


# ---------------------------------------------------------------------------
# timing
# ---------------------------------------------------------------------------


@dataclass
class TimingReport:
    sec_per_1k: float
    std: float
    repeats: int
    iterations: int
    note: str = "wall-clock on this machine; not comparable to published hardware timings"


def timing_report(iterations: int, seconds, repeats: int | None = None) -> TimingReport:
    """Seconds per 1000 iterations from one or several timed runs of ``iterations`` steps."""
    if iterations < 100:
        raise ValueError(f"timing needs at least 100 iterations, got {iterations}")
    secs = np.atleast_1d(np.asarray(seconds, dtype=np.float64))
    per_1k = 1000.0 * secs / iterations
    return TimingReport(float(per_1k.mean()), float(per_1k.std()), repeats or len(secs), iterations)
