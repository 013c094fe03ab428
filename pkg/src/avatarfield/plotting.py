"""Report figures written with the non-interactive Agg backend."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _read_metrics(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    steps = np.array([int(r["step"]) for r in rows])
    cols = {k: np.array([float(r[k]) if r[k] else np.nan for r in rows]) for k in rows[0] if k != "step"} if rows else {}
    return steps, cols


def plot_loss_curves(metrics_csv, out_png):
    steps, cols = _read_metrics(metrics_csv)
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(10, 3.8))
    for key in ("overall", "l1_lr", "l1_hr"):
        if key in cols:
            ax.semilogy(steps, cols[key], label=key, lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    if "psnr_holdout" in cols:
        keep = np.isfinite(cols["psnr_holdout"])
        ax2.plot(steps[keep], cols["psnr_holdout"][keep], "o-")
    ax2.set_xlabel("step")
    ax2.set_ylabel("held-out PSNR (dB)")
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)


def plot_comparison(pairs, out_png, titles=None):
    """Rows of (rendered, target) images with their absolute difference."""
    n = len(pairs)
    fig, axes = plt.subplots(n, 3, figsize=(7.5, 2.6 * n), squeeze=False)
    for i, (img, tgt) in enumerate(pairs):
        for j, (im, lab) in enumerate(((img, "render"), (tgt, "target"),
                                       (np.abs(img - tgt).mean(-1), "|diff|"))):
            ax = axes[i, j]
            ax.imshow(np.clip(im, 0, 1), cmap="magma" if im.ndim == 2 else None, vmin=0, vmax=1 if j < 2 else 0.25)
            ax.set_axis_off()
            ax.set_title(lab if titles is None or j else f"{titles[i]}: {lab}", fontsize=8)
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)


def plot_knn_bench(rows, out_png):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for kind in sorted({r["index"] for r in rows}):
        for k in sorted({r["K"] for r in rows}):
            sel = [r for r in rows if r["index"] == kind and r["K"] == k]
            ax.loglog([r["P"] for r in sel], [r["queries_per_sec"] for r in sel], "o-", label=f"{kind} K={k}")
    ax.set_xlabel("points P")
    ax.set_ylabel("queries / s")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(Path(out_png), dpi=110)
    plt.close(fig)
