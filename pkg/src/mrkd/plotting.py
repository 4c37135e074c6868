"""Static figures: heatmap overlays, score densities and loss curves."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402
from scipy.integrate import trapezoid  # noqa: E402
from scipy.stats import gaussian_kde  # noqa: E402

from mrkd.data import denormalize  # noqa: E402
from mrkd.scoring import ScoreMap  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "figure.dpi": 100,
}
NORMAL_COLOR = "tab:blue"
ABNORMAL_COLOR = "tab:red"
HEATMAP_CMAP = "jet"
OVERLAY_WEIGHT = 0.5
# PNG metadata is pinned so identical inputs give identical bytes
_PNG_META = {"Software": None}


def _save(fig: plt.Figure, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path


def overlay_heatmap(pixels: np.ndarray, smap: ScoreMap, path: str | Path, vmax: float | None = None) -> Path:
    """Blend the input image with a color-mapped score map, at image resolution.

    ``vmax`` fixes the color scale; by default the map's own maximum is used.
    """
    rgb = np.clip(denormalize(pixels), 0.0, 1.0).transpose(1, 2, 0)
    values = smap.values.astype(np.float64)
    top = float(values.max()) if vmax is None else float(vmax)
    scaled = values / top if top > 0 else np.zeros_like(values)
    colored = matplotlib.colormaps[HEATMAP_CMAP](np.clip(scaled, 0.0, 1.0))[..., :3]
    blended = (1.0 - OVERLAY_WEIGHT) * rgb + OVERLAY_WEIGHT * colored
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((blended * 255.0 + 0.5).astype(np.uint8)).save(path)
    return path


def heatmap_panel(pixels: np.ndarray, smap: ScoreMap, path: str | Path, gt_mask: np.ndarray | None = None,
                  title: str = "") -> Path:
    """Image, score map and (optionally) ground truth side by side."""
    rgb = np.clip(denormalize(pixels), 0.0, 1.0).transpose(1, 2, 0)
    ncols = 3 if gt_mask is not None else 2
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, ncols, figsize=(3.0 * ncols, 3.2))
        axes[0].imshow(rgb)
        axes[0].set_title("input")
        axes[1].imshow(rgb)
        im = axes[1].imshow(smap.values, cmap=HEATMAP_CMAP, alpha=OVERLAY_WEIGHT)
        axes[1].set_title(f"score {smap.image_score:.3f}")
        fig.colorbar(im, ax=axes[1], fraction=0.046, pad=0.04)
        if gt_mask is not None:
            axes[2].imshow(gt_mask, cmap="gray", vmin=0, vmax=1)
            axes[2].set_title("ground truth")
        for ax in axes:
            ax.set_axis_off()
        if title:
            fig.suptitle(title)
        fig.tight_layout()
        return _save(fig, path)


def minmax(scores: Sequence[float]) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    if s.size == 0:
        return s
    lo, hi = s.min(), s.max()
    return (s - lo) / (hi - lo) if hi > lo else np.zeros_like(s)


def kde_density(values: Sequence[float], grid: np.ndarray) -> np.ndarray | None:
    """Gaussian KDE on ``grid``; None when the sample is degenerate."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2 or np.ptp(v) == 0:
        return None
    try:
        return gaussian_kde(v)(grid)
    except np.linalg.LinAlgError:
        return None


def density_overlap(normal: Sequence[float], abnormal: Sequence[float], n_grid: int = 2001) -> float:
    """Integral of min(p_normal, p_abnormal) over [0, 1] after joint min-max scaling."""
    both = minmax(list(normal) + list(abnormal))
    a, b = both[:len(normal)], both[len(normal):]
    grid = np.linspace(0.0, 1.0, n_grid)
    pa, pb = kde_density(a, grid), kde_density(b, grid)
    if pa is None or pb is None:
        return float("nan")
    return float(trapezoid(np.minimum(pa, pb), grid))


def plot_score_distribution(normal: Sequence[float], abnormal: Sequence[float], path: str | Path,
                            title: str = "", n_grid: int = 512) -> Path:
    """Normal (blue) and abnormal (red) densities of min-max scaled scores."""
    both = minmax(list(normal) + list(abnormal))
    groups = [(both[:len(normal)], NORMAL_COLOR, "normal"), (both[len(normal):], ABNORMAL_COLOR, "abnormal")]
    grid = np.linspace(0.0, 1.0, n_grid)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        for values, color, name in groups:
            if values.size == 0:
                continue
            dens = kde_density(values, grid)
            if dens is None:
                ax.axvline(float(values[0]), color=color, lw=2, label=f"{name} (degenerate)")
            else:
                ax.plot(grid, dens, color=color, lw=1.5, label=name)
                ax.fill_between(grid, dens, color=color, alpha=0.25)
        ax.set_xlim(0.0, 1.0)
        ax.set_xlabel("normalized anomaly score")
        ax.set_ylabel("density")
        ax.legend(frameon=False)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)


def plot_loss_curve(losses: Sequence[float], path: str | Path, title: str = "") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.0))
        epochs = np.arange(1, len(losses) + 1)
        ax.plot(epochs, losses, marker="o", ms=3, lw=1.2, color="black")
        ax.set_xlabel("epoch")
        ax.set_ylabel("mean loss")
        if title:
            ax.set_title(title)
        fig.tight_layout()
        return _save(fig, path)
