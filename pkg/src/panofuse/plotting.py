"""Matplotlib figures for evaluation, ablation and depth-fill reports (files only, Agg backend)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {"figure.dpi": 100, "axes.spines.top": False, "axes.spines.right": False,
          "axes.grid": True, "grid.alpha": 0.3, "font.size": 9}


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return str(path)


def plot_coverage(report: dict, path, title: str = "coverage per trajectory mode"):
    """Per-pose coverage of each trajectory mode as a strip plot with the mean marked."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        modes = list(report)
        for i, m in enumerate(modes):
            cov = np.asarray(report[m]["coverage"])
            jitter = np.linspace(-0.15, 0.15, len(cov)) if len(cov) > 1 else np.zeros(1)
            ax.scatter(i + jitter, cov, s=10, alpha=0.6)
            ax.hlines(report[m]["coverage_mean"], i - 0.3, i + 0.3, color="k", lw=1.5)
        ax.set_xticks(range(len(modes)), modes)
        ax.set_ylabel("coverage")
        ax.set_title(title)
        return _save(fig, path)


def plot_ablation(results: dict, path):
    """Grouped bars of mean coverage, one group per trajectory mode and one bar per variant."""
    with plt.rc_context(_STYLE):
        variants = list(results)
        modes = list(next(iter(results.values())))
        fig, ax = plt.subplots(figsize=(6, 3.2))
        width = 0.8 / max(len(variants), 1)
        lo = 1.0
        for k, v in enumerate(variants):
            vals = [results[v][m]["coverage_mean"] for m in modes]
            lo = min(lo, *vals)
            ax.bar(np.arange(len(modes)) + (k - (len(variants) - 1) / 2) * width, vals, width, label=v)
        ax.set_xticks(range(len(modes)), modes)
        ax.set_ylim(max(0.0, lo - 0.01), 1.0)
        ax.set_ylabel("mean coverage")
        ax.legend(fontsize=7, frameon=False)
        return _save(fig, path)


def plot_depthfill(rows: list[dict], path):
    """Transition score and transition-region MAE per scene for each reconstruction method."""
    with plt.rc_context(_STYLE):
        methods = list(rows[0]["methods"])
        x = np.arange(len(rows))
        fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
        for ax, key in zip(axes, ("transition_score", "transition_region_mae")):
            for m in methods:
                ax.plot(x, [r["methods"][m][key] for r in rows], marker="o", ms=3, label=m)
            ax.set_yscale("log")
            ax.set_xlabel("scene")
            ax.set_title(key.replace("_", " "))
        axes[0].legend(fontsize=7, frameon=False)
        return _save(fig, path)


def plot_depth_panel(images: dict, path, cols: int = 3):
    """Grid of named rasters; 2D arrays are shown as depth (NaN transparent), 3D as RGB."""
    with plt.rc_context(_STYLE):
        n = len(images)
        rows = int(np.ceil(n / cols))
        fig, axes = plt.subplots(rows, cols, figsize=(3.2 * cols, 1.9 * rows), squeeze=False)
        for ax, (name, img) in zip(axes.ravel(), images.items()):
            img = np.asarray(img)
            if img.ndim == 2:
                ax.imshow(np.ma.masked_invalid(img.astype(np.float64)), cmap="viridis")
            else:
                ax.imshow(np.clip(img, 0, 1))
            ax.set_title(name)
        for ax in axes.ravel():
            ax.axis("off")
        return _save(fig, path)
