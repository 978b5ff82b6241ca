"""Matplotlib figures written straight to files (SVG by default)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rcParams.update({
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "mtalab",
    "svg.fonttype": "none",
})


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight", metadata={"Date": None} if path.suffix == ".svg" else None)
    plt.close(fig)
    return path


def heatmap(matrix, path, row_labels=None, col_labels=None, title="", xlabel="", ylabel="", cmap="RdBu_r"):
    """Annotated-free heatmap; diverging colours are centred on zero."""
    m = np.asarray(matrix, dtype=float)
    shown = np.where(np.isfinite(m), m, np.nan)
    lim = np.nanmax(np.abs(shown)) if np.isfinite(shown).any() else 1.0
    lim = lim or 1.0
    h, w = m.shape
    fig, ax = plt.subplots(figsize=(min(1.0 + 0.35 * w, 12), min(0.8 + 0.35 * h, 12)))
    im = ax.imshow(shown, cmap=cmap, vmin=-lim if cmap == "RdBu_r" else None, vmax=lim, aspect="auto")
    if row_labels is not None and len(row_labels) <= 40:
        ax.set_yticks(range(h), labels=[str(r) for r in row_labels])
    if col_labels is not None and len(col_labels) <= 40:
        ax.set_xticks(range(w), labels=[str(c) for c in col_labels])
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    fig.colorbar(im, ax=ax, shrink=0.8)
    return _save(fig, path)


def loss_curve(steps, losses, path, evals=None, title="training loss"):
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot(steps, losses, lw=0.8, label="loss")
    ax.set_xlabel("step")
    ax.set_ylabel("masked cross-entropy")
    ax.set_title(title)
    if evals:
        ax2 = ax.twinx()
        es, ev = zip(*evals)
        ax2.plot(es, ev, "o-", color="C3", ms=3, lw=0.8, label="test error %")
        ax2.set_ylabel("test error (%)")
    return _save(fig, path)


def error_bars(rows, path, title="test error by architecture"):
    """Grouped bars of mean error with std whiskers; ``rows`` are dicts with arch/variant/mean/std."""
    archs = list(dict.fromkeys(r["arch"] for r in rows))
    variants = list(dict.fromkeys(r["variant"] for r in rows))
    width = 0.8 / max(1, len(archs))
    fig, ax = plt.subplots(figsize=(1.2 + 1.2 * len(variants), 3))
    x = np.arange(len(variants))
    for k, arch in enumerate(archs):
        by = {r["variant"]: r for r in rows if r["arch"] == arch}
        means = [by[v]["mean"] if v in by else np.nan for v in variants]
        stds = [by[v]["std"] if v in by else 0.0 for v in variants]
        ax.bar(x + k * width - 0.4 + width / 2, means, width, yerr=stds, capsize=2, label=arch)
    ax.set_xticks(x, labels=variants)
    ax.set_ylabel("error (%)")
    ax.set_title(title)
    ax.legend(frameon=False)
    return _save(fig, path)
