"""Report figures written next to the JSON/CSV outputs."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .score import Segment  # noqa: E402

# strip version/date metadata so identical inputs give identical bytes
_PNG_META = {"Software": None}

LOSS_KEYS = ("total", "track_recon", "function_recon", "aux_recon", "kl_mix", "kl_function", "kl_track")


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_loss_curves(history: Sequence[dict], path) -> Path:
    """One panel of loss terms per epoch (log scale) and one of the schedule."""
    if not history:
        raise ValueError("no epochs to plot")
    epochs = [r["epoch"] for r in history]
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for key in LOSS_KEYS:
        vals = [r.get(key) for r in history]
        if all(v is not None and v > 0 for v in vals):
            ax.plot(epochs, vals, label=key, marker=".")
    val = [r.get("val_total") for r in history]
    if all(v is not None and np.isfinite(v) for v in val):
        ax.plot(epochs, val, label="val_total", linestyle="--", color="k")
    ax.set_yscale("log")
    ax.set_xlabel("epoch")
    ax.set_title("loss")
    ax.legend(fontsize=7)
    for key in ("beta_f", "tf_rate"):
        ax2.plot(epochs, [r[key] for r in history], label=key)
    ax2.plot(epochs, [r["lr"] * 1e3 for r in history], label="lr x1e3")
    ax2.set_xlabel("epoch")
    ax2.set_title("schedule")
    ax2.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_fold_accuracy(folds: Sequence, path, baseline: float | None = None) -> Path:
    """Per-fold voice accuracy with and without entry hints."""
    idx = np.arange(len(folds))
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(folds) + 2), 3.5))
    ax.bar(idx - 0.2, [f.accuracy for f in folds], 0.4, label="no hints")
    ax.bar(idx + 0.2, [f.accuracy_hints for f in folds], 0.4, label="hints")
    if baseline is not None:
        ax.axhline(baseline, color="grey", linestyle=":", label="random")
    ax.set_xticks(idx, [str(f.fold) for f in folds])
    ax.set_xlabel("fold")
    ax.set_ylabel("note accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend(fontsize=7)
    fig.tight_layout()
    return _save(fig, path)


def plot_segment(seg: Segment, path, title: str | None = None) -> Path:
    """Piano roll with one colour per track; bars span note durations."""
    fig, ax = plt.subplots(figsize=(8, 4))
    cmap = plt.get_cmap("tab10")
    for k, track in enumerate(seg.tracks):
        notes = track.notes()
        if notes:
            for p, t, d in notes:
                ax.broken_barh([(t, d)], (p - 0.4, 0.8), color=cmap(k % 10))
        ax.plot([], [], color=cmap(k % 10), label=track.name or track.instrument, linewidth=6)
    ax.set_xlim(0, 32)
    ax.set_xlabel("step")
    ax.set_ylabel("pitch")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=7, loc="upper right")
    fig.tight_layout()
    return _save(fig, path)
