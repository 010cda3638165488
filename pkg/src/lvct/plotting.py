"""Report figures rendered to PNG files (Agg backend, no display needed)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_comparison", "plot_preview", "plot_training_log", "plot_damage_sweep"]

# no timestamps or version strings, so reruns give identical bytes
_PNG_META = {"Software": None}


def _save(fig, path):
    fig.savefig(path, dpi=100, metadata=_PNG_META)
    plt.close(fig)


def plot_comparison(rows, path):
    """Side-by-side PSNR and SSIM bars, one per algorithm."""
    labels = [r.label for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.8))
    for ax, key, name in ((axes[0], "psnr", "PSNR (dB)"), (axes[1], "ssim", "SSIM")):
        vals = [getattr(r, key) for r in rows]
        ax.bar(range(len(vals)), vals, color=["#4c72b0" if "+MR" not in lab else "#dd8452" for lab in labels])
        ax.set_xticks(range(len(vals)))
        ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
        ax.set_ylabel(name)
        ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def plot_preview(panels: dict, path, title=None):
    """Grey-scale panels sharing one intensity window (that of the first panel)."""
    first = np.asarray(next(iter(panels.values())))
    lo, hi = float(first.min()), float(first.max())
    if hi <= lo:
        hi = lo + 1.0
    fig, axes = plt.subplots(1, len(panels), figsize=(2.6 * len(panels), 2.9))
    for ax, (name, img) in zip(np.atleast_1d(axes), panels.items()):
        ax.imshow(img, cmap="gray", vmin=lo, vmax=hi, interpolation="nearest")
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    _save(fig, path)


def plot_training_log(tlog, path):
    """Per-iteration training MSE and, when recorded, per-epoch validation PSNR."""
    val = [(r["epoch"], r["val_PSNR"]) for r in tlog.rows if np.isfinite(r["val_PSNR"])]
    fig, axes = plt.subplots(1, 2 if val else 1, figsize=(9 if val else 5, 3.2))
    axes = np.atleast_1d(axes)
    if tlog.iter_mse:
        axes[0].semilogy(np.arange(1, len(tlog.iter_mse) + 1), tlog.iter_mse, lw=0.8)
    axes[0].set_xlabel("iteration")
    axes[0].set_ylabel("training MSE")
    axes[0].grid(alpha=0.3)
    if val:
        axes[1].plot([v[0] for v in val], [v[1] for v in val], "o-", ms=3)
        axes[1].set_xlabel("epoch")
        axes[1].set_ylabel("validation PSNR (dB)")
        axes[1].grid(alpha=0.3)
    fig.tight_layout()
    _save(fig, path)


def plot_damage_sweep(table: dict, path):
    """``table`` maps cut name -> {algorithm: MetricReport}; one PSNR line per algorithm."""
    cuts = list(table)
    algs = list(next(iter(table.values())))
    fig, ax = plt.subplots(figsize=(6, 3.8))
    for a in algs:
        ax.plot(cuts, [table[c][a].psnr for c in cuts], "o-", label=a, lw=1.2)
    ax.set_ylabel("PSNR (dB)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=7, ncol=3)
    fig.tight_layout()
    _save(fig, path)
