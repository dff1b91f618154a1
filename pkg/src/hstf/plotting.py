"""Figures written next to the delimited report files."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "figure.dpi": 120,
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps PNG bytes stable across runs
    fig.savefig(path, bbox_inches="tight", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_roc(curves: dict[str, Sequence[tuple[float, float, float]]], path, aucs: dict[str, float] | None = None):
    """One ROC line per labeled curve of (fpr, tpr, lambda) points."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 3.4))
        for name, pts in curves.items():
            fpr = [p[0] for p in pts]
            tpr = [p[1] for p in pts]
            label = name if not aucs else f"{name} (AUC={aucs[name]:.4f})"
            ax.plot(fpr, tpr, lw=1.2, label=label)
        ax.plot([0, 1], [0, 1], ls=":", c="0.5", lw=0.8)
        ax.set_xlim(-0.01, 1.01)
        ax.set_ylim(-0.01, 1.01)
        ax.set_xlabel("False positive rate")
        ax.set_ylabel("True positive rate")
        ax.legend(loc="lower right")
        return _save(fig, path)


def plot_history(histories: dict[str, Sequence[dict]], path):
    """Training accuracy and validation recall per epoch, one line per run."""
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(7, 2.8))
        for name, hist in histories.items():
            ep = [h["epoch"] for h in hist]
            a1.plot(ep, [h["acc"] for h in hist], lw=1, label=name)
            a2.plot(ep, [h["val_recall"] for h in hist], lw=1, label=name)
        a1.set_xlabel("epoch")
        a1.set_ylabel("train accuracy")
        a2.set_xlabel("epoch")
        a2.set_ylabel("validation recall")
        a2.legend(loc="lower right")
        fig.tight_layout()
        return _save(fig, path)


def plot_comparison(rows: Sequence[dict], path):
    """Measured F1 per scenario against the published values where known."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5, 2.8))
        xs = range(len(rows))
        ax.plot(xs, [r["F1"] for r in rows], "o-", label="measured")
        ref = [(i, r["ref_F1"]) for i, r in enumerate(rows) if "ref_F1" in r]
        if ref:
            ax.plot([i for i, _ in ref], [v for _, v in ref], "s--", label="published")
        ax.set_xticks(list(xs))
        ax.set_xticklabels([r["ratio"] for r in rows])
        ax.set_xlabel("malicious : benign (train)")
        ax.set_ylabel("F1 (%)")
        ax.legend()
        return _save(fig, path)


def plot_timing(rows, path):
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(7, 2.8))
        ns = [r.n for r in rows]
        a1.plot(ns, [r.seconds_per_epoch for r in rows], "o-")
        a1.set_xlabel("samples per epoch")
        a1.set_ylabel("seconds / epoch")
        a2.plot(ns, [r.peak_bytes / 2**20 for r in rows], "o-")
        a2.set_xlabel("samples per epoch")
        a2.set_ylabel("peak traced memory (MiB)")
        a2.set_ylim(bottom=0)
        fig.tight_layout()
        return _save(fig, path)
