"""Image-level masking: blend patches cropped from other normal images.

Patches are placed with their centers on the estimated foreground of the
target and blended either by a hard paste or by gradient-domain (Poisson)
cloning, where the patch keeps the source gradients and takes its border
values from the target.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image
from scipy.fft import dstn, idstn
from skimage.filters import threshold_otsu

from mrkd.data import ImageRecord, denormalize

log = logging.getLogger(__name__)

# Pixels outside the anomaly mask are copied verbatim in both blend modes.
SEAMLESS_OUTSIDE_TOL = 0.0
MIN_PATCH_SIDE = 3


class SynthesisWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SynthesisParams:
    alpha: float = 1.0
    patch_count_range: tuple[int, int] = (1, 3)
    patch_area_range: tuple[float, float] = (0.01, 0.15)
    aspect_range: tuple[float, float] = (0.3, 3.0)
    blend: str = "seamless"
    foreground: str = "otsu"

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        lo, hi = self.patch_count_range
        if not 0 <= lo <= hi:
            raise ValueError(f"bad patch_count_range {self.patch_count_range}")
        lo, hi = self.patch_area_range
        if not 0 < lo <= hi <= 0.25:
            raise ValueError(f"patch_area_range must be ordered within (0, 0.25], got {self.patch_area_range}")
        lo, hi = self.aspect_range
        if not 0 < lo <= hi:
            raise ValueError(f"bad aspect_range {self.aspect_range}")
        if self.blend not in ("seamless", "paste"):
            raise ValueError(f"unknown blend mode {self.blend!r}")
        if self.foreground not in ("otsu", "full"):
            raise ValueError(f"unknown foreground mode {self.foreground!r}")


@dataclass
class SyntheticSample:
    image: np.ndarray  # [3, H, W]
    anomaly_mask: np.ndarray  # [H, W] uint8
    was_augmented: bool


def estimate_foreground(pixels: np.ndarray, mode: str = "otsu") -> np.ndarray:
    """Boolean [H, W] foreground estimate of a standardized image."""
    h, w = pixels.shape[1:]
    if mode == "full":
        return np.ones((h, w), dtype=bool)
    gray = denormalize(pixels).mean(axis=0)
    if np.ptp(gray) == 0:
        return np.zeros((h, w), dtype=bool)
    fg = gray > threshold_otsu(gray)
    border = np.concatenate([fg[0], fg[-1], fg[:, 0], fg[:, -1]])
    # the background is whichever class dominates the image border
    if border.mean() > 0.5:
        fg = ~fg
    return fg


def sample_patch_shape(rng: np.random.Generator, height: int, width: int,
                       params: SynthesisParams) -> tuple[int, int]:
    area = rng.uniform(*params.patch_area_range) * height * width
    lo, hi = params.aspect_range
    aspect = float(np.exp(rng.uniform(np.log(lo), np.log(hi))))  # height / width
    ph = int(np.clip(round(np.sqrt(area * aspect)), MIN_PATCH_SIDE, height))
    pw = int(np.clip(round(np.sqrt(area / aspect)), MIN_PATCH_SIDE, width))
    if ph == height and pw == width:
        pw -= 1
    return ph, pw


def _harmonic_fill(boundary: np.ndarray) -> np.ndarray:
    """Solve the discrete Laplace equation inside a [C, h, w] block.

    Only the outer ring of ``boundary`` is read; the returned block equals it
    on the ring and is harmonic (5-point stencil) inside.
    """
    out = boundary.copy()
    _, h, w = boundary.shape
    n, m = h - 2, w - 2
    if n <= 0 or m <= 0:
        return out
    rhs = np.zeros((boundary.shape[0], n, m), dtype=np.float64)
    rhs[:, 0, :] -= boundary[:, 0, 1:-1]
    rhs[:, -1, :] -= boundary[:, -1, 1:-1]
    rhs[:, :, 0] -= boundary[:, 1:-1, 0]
    rhs[:, :, -1] -= boundary[:, 1:-1, -1]
    ev_y = 2.0 * np.cos(np.pi * np.arange(1, n + 1) / (n + 1)) - 2.0
    ev_x = 2.0 * np.cos(np.pi * np.arange(1, m + 1) / (m + 1)) - 2.0
    eig = ev_y[:, None] + ev_x[None, :]
    coef = dstn(rhs, type=1, axes=(1, 2)) / eig
    out[:, 1:-1, 1:-1] = idstn(coef, type=1, axes=(1, 2))
    return out


def poisson_blend(target_block: np.ndarray, source_block: np.ndarray) -> np.ndarray:
    """Clone ``source_block`` into ``target_block`` matching the target on the border."""
    src = source_block.astype(np.float64)
    correction = _harmonic_fill(target_block.astype(np.float64) - src)
    return (src + correction).astype(target_block.dtype)


def _pick_center(rng: np.random.Generator, fg: np.ndarray, ph: int, pw: int) -> tuple[int, int] | None:
    h, w = fg.shape
    valid = np.zeros_like(fg)
    cy0, cx0 = ph // 2, pw // 2
    valid[cy0:h - ph + cy0 + 1, cx0:w - pw + cx0 + 1] = True
    ys, xs = np.nonzero(fg & valid)
    if len(ys) == 0:
        return None
    i = rng.integers(len(ys))
    return int(ys[i]) - cy0, int(xs[i]) - cx0


def synthesize(target: ImageRecord, source: ImageRecord, params: SynthesisParams,
               rng: np.random.Generator) -> SyntheticSample:
    image = target.pixels
    _, h, w = image.shape
    if source.pixels.shape != image.shape:
        raise ValueError(f"source shape {source.pixels.shape} != target shape {image.shape}")
    mask = np.zeros((h, w), dtype=np.uint8)
    k = int(rng.integers(params.patch_count_range[0], params.patch_count_range[1] + 1))
    if k == 0:
        return SyntheticSample(image.copy(), mask, False)

    fg = estimate_foreground(image, params.foreground)
    if not fg.any():
        msg = f"empty foreground for {target.source_path}; placing patches anywhere"
        log.warning(msg)
        warnings.warn(msg, SynthesisWarning, stacklevel=2)
        fg = np.ones_like(fg)

    out = image.copy()
    for _ in range(k):
        ph, pw = sample_patch_shape(rng, h, w, params)
        sy = int(rng.integers(0, h - ph + 1))
        sx = int(rng.integers(0, w - pw + 1))
        crop = source.pixels[:, sy:sy + ph, sx:sx + pw]
        pos = _pick_center(rng, fg, ph, pw)
        if pos is None:
            msg = f"no foreground position fits a {ph}x{pw} patch; placing anywhere"
            log.warning(msg)
            warnings.warn(msg, SynthesisWarning, stacklevel=2)
            pos = _pick_center(rng, np.ones_like(fg), ph, pw)
        y, x = pos
        region = (slice(None), slice(y, y + ph), slice(x, x + pw))
        if params.blend == "paste":
            out[region] = crop
        else:
            out[region] = poisson_blend(out[region], crop)
        mask[y:y + ph, x:x + pw] = 1
    return SyntheticSample(out, mask, True)


def apply_ilm(batch: Sequence[ImageRecord], params: SynthesisParams, rng: np.random.Generator,
              pool: Sequence[ImageRecord] | None = None) -> list[SyntheticSample]:
    """Augment each record with probability ``alpha``; sources come from ``pool``."""
    if len(batch) == 0:
        raise ValueError("apply_ilm needs a nonempty batch")
    pool = list(pool) if pool is not None else list(batch)
    out = []
    for rec in batch:
        if rng.random() >= params.alpha:
            out.append(SyntheticSample(rec.pixels.copy(), np.zeros(rec.pixels.shape[1:], np.uint8), False))
            continue
        others = [p for p in pool if p is not rec] or pool
        source = others[int(rng.integers(len(others)))]
        out.append(synthesize(rec, source, params, rng))
    return out


def dump_sample(sample: SyntheticSample, directory: str | Path, stem: str) -> tuple[Path, Path]:
    """Write the augmented image and its mask as a PNG pair for inspection."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rgb = np.clip(denormalize(sample.image), 0, 1).transpose(1, 2, 0)
    img_path = directory / f"{stem}_image.png"
    mask_path = directory / f"{stem}_mask.png"
    Image.fromarray((rgb * 255 + 0.5).astype(np.uint8)).save(img_path)
    Image.fromarray(sample.anomaly_mask * 255).save(mask_path)
    return img_path, mask_path
