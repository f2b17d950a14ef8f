"""Report figures rendered to PNG files (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .audit import ScalingTable  # noqa: E402


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_branch_scaling(table: ScalingTable, path) -> Path:
    """Discriminator size against branch count, with the ideal 1/N curve per method."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for method in dict.fromkeys(r.method for r in table.rows):
        rows = table.for_method(method)
        n = np.array([r.branches for r in rows])
        p = np.array([r.disc_params for r in rows]) / 1e6
        (line,) = ax.plot(n, p, "o-", label=method)
        ax.plot(n, p[0] * n[0] / n, ":", color=line.get_color(), alpha=0.6)
        pub = [(r.branches, r.published) for r in rows if r.published is not None]
        if pub:
            ax.plot(*zip(*pub), "x", color=line.get_color(), ms=8)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log")
    ax.set_xlabel("branches N")
    ax.set_ylabel("discriminator parameters (M)")
    ax.set_title("measured (o), published (x), ideal 1/N (dotted)")
    ax.legend()
    return _save(fig, path)


def plot_loss_history(history, path) -> Path:
    """Per-step losses from a list of :class:`~mbdgan.training.HistoryRow`."""
    steps = np.array([h.step for h in history])
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    for key in ("adv_d", "adv_g"):
        axes[0].plot(steps, [getattr(h.report, key) for h in history], label=key, lw=0.8)
    for key in ("cls_real", "cls_fake"):
        axes[1].plot(steps, [getattr(h.report, key) for h in history], label=key, lw=0.8)
    axes[2].plot(steps, [h.report.cyc for h in history], label="cyc", lw=0.8)
    for ax in axes:
        ax.set_xlabel("step")
        ax.legend()
    return _save(fig, path)


def plot_branch_ablation(results: dict[int, dict], path) -> Path:
    """Inception score and target accuracy for each branch count.

    ``results`` maps N to a dict with keys ``is_mean``, ``is_std`` and
    ``target_accuracy``.
    """
    ns = sorted(results)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.errorbar(ns, [results[n]["is_mean"] for n in ns], yerr=[results[n]["is_std"] for n in ns], fmt="o-", label="IS")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("branches N")
    ax.set_ylabel("inception score")
    ax2 = ax.twinx()
    ax2.plot(ns, [results[n]["target_accuracy"] for n in ns], "s--", color="tab:orange", label="target acc.")
    ax2.set_ylabel("target accuracy")
    ax2.set_ylim(0, 1.05)
    return _save(fig, path)
