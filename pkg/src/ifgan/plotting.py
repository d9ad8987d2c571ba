"""Report figures, rendered headless to PNG files."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .data.synth import EXPRESSION_NAMES  # noqa: E402


def _labels(K: int) -> list[str]:
    return list(EXPRESSION_NAMES[:K]) if K <= len(EXPRESSION_NAMES) else [str(k) for k in range(K)]


def read_metrics(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


def plot_losses(metrics_csv, out_path) -> Path:
    m = read_metrics(metrics_csv)
    fig, axes = plt.subplots(1, 3, figsize=(12, 3.2))
    if m:
        s = m["step"]
        axes[0].plot(s, m["d_loss"], label="D")
        axes[0].plot(s, m["g_adv"], label="G adversarial")
        axes[0].set_title("adversarial")
        axes[0].legend()
        axes[1].plot(s, m["l1"], color="tab:green")
        axes[1].set_title("L1 reconstruction")
        axes[2].plot(s, m["expr_real"], label="real pair")
        axes[2].plot(s, m["expr_fake"], label="generated pair")
        axes[2].set_title("expression CE")
        axes[2].legend()
    for ax in axes:
        ax.set_xlabel("step")
    fig.tight_layout()
    fig.savefig(out_path, dpi=90)
    plt.close(fig)
    return Path(out_path)


def plot_confusion(confusion, out_path, title: str = "confusion") -> Path:
    c = np.asarray(confusion, dtype=float)
    K = c.shape[0]
    rows = c.sum(axis=1, keepdims=True)
    frac = np.divide(c, rows, out=np.zeros_like(c), where=rows > 0)
    fig, ax = plt.subplots(figsize=(4.6, 4))
    im = ax.imshow(frac, cmap="Blues", vmin=0, vmax=1)
    names = _labels(K)
    ax.set_xticks(range(K), names, rotation=45, ha="right")
    ax.set_yticks(range(K), names)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    for i in range(K):
        for j in range(K):
            if c[i, j]:
                ax.text(j, i, int(c[i, j]), ha="center", va="center",
                        color="white" if frac[i, j] > 0.5 else "black", fontsize=8)
    ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(out_path, dpi=90)
    plt.close(fig)
    return Path(out_path)


def plot_transfer(grid: np.ndarray, out_path, caption: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(grid.shape[1] / 40, grid.shape[0] / 40 + 0.4))
    ax.imshow(grid, cmap="gray", vmin=0, vmax=255)
    ax.axis("off")
    if caption:
        ax.set_title(caption, fontsize=9)
    fig.tight_layout()
    fig.savefig(out_path, dpi=90)
    plt.close(fig)
    return Path(out_path)


def plot_cv_summary(report: dict, out_path) -> Path:
    folds = report["per_fold"]
    x = np.arange(len(folds))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 3.5))
    ax1.bar(x - 0.2, [f["accuracy"] for f in folds], 0.4, label="IF-GAN")
    ax1.bar(x + 0.2, [f["baseline_accuracy"] for f in folds], 0.4, label="raw baseline")
    ax1.axhline(report["chance"], color="gray", ls="--", lw=1, label="chance")
    ax1.set_xticks(x, [str(f["fold"]) for f in folds])
    ax1.set_xlabel("fold")
    ax1.set_ylabel("test accuracy")
    ax1.set_ylim(0, 1)
    ax1.legend(fontsize=8)
    ax2.bar([0, 1], [report["probe_input"], report["probe_generated"]], color=["tab:orange", "tab:purple"])
    ax2.set_xticks([0, 1], ["input faces", "generated faces"])
    ax2.set_ylabel("identity probe accuracy")
    ax2.set_ylim(0, 1)
    fig.tight_layout()
    fig.savefig(out_path, dpi=90)
    plt.close(fig)
    return Path(out_path)
