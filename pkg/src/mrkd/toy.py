"""Procedural striped-texture dataset in the MVTec layout, for CPU smoke runs."""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

DEFECTS = ("blotch", "crossed", "scratch")
TOY_CATEGORY = "toy_texture"


def _stripes(rng: np.random.Generator, size: int, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    freq = 1.0 / rng.uniform(9.0, 11.0)
    phase = rng.uniform(0, 2 * np.pi)
    wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
    return 0.5 + 0.25 * wave


def _colorize(gray: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    tint = np.array([0.75, 0.6, 0.45])
    rgb = gray[..., None] * tint + np.array([0.12, 0.15, 0.2])
    rgb += rng.normal(0.0, 0.025, rgb.shape)
    return np.clip(rgb, 0.0, 1.0)


def normal_image(rng: np.random.Generator, size: int = 128) -> np.ndarray:
    theta = np.deg2rad(30.0 + rng.uniform(-4.0, 4.0))
    return _colorize(_stripes(rng, size, theta), rng)


def _ellipse(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = rng.uniform(0.25 * size, 0.75 * size, 2)
    ry, rx = rng.uniform(0.08 * size, 0.16 * size, 2)
    return ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0


def abnormal_image(rng: np.random.Generator, size: int = 128, kind: str = "blotch") -> tuple[np.ndarray, np.ndarray]:
    """Normal texture with one defect; returns (rgb in [0, 1], boolean mask)."""
    theta = np.deg2rad(30.0 + rng.uniform(-4.0, 4.0))
    gray = _stripes(rng, size, theta)
    rgb = _colorize(gray, rng)
    if kind == "blotch":
        mask = _ellipse(rng, size)
        color = np.array([0.55, 0.12, 0.1]) + rng.normal(0.0, 0.03, (size, size, 3))
        rgb[mask] = np.clip(color[mask], 0, 1)
    elif kind == "crossed":
        mask = _ellipse(rng, size)
        other = _colorize(_stripes(rng, size, theta + np.pi / 2), rng)
        rgb[mask] = other[mask]
    elif kind == "scratch":
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
        angle = rng.uniform(0, np.pi)
        cy, cx = rng.uniform(0.3 * size, 0.7 * size, 2)
        half = rng.uniform(0.2 * size, 0.35 * size)
        along = (xx - cx) * np.cos(angle) + (yy - cy) * np.sin(angle)
        across = -(xx - cx) * np.sin(angle) + (yy - cy) * np.cos(angle)
        mask = (np.abs(along) <= half) & (np.abs(across) <= max(2.0, 0.025 * size))
        rgb[mask] = np.clip(0.95 + rng.normal(0, 0.02, (int(mask.sum()), 3)), 0, 1)
    else:
        raise ValueError(f"unknown defect kind {kind!r}")
    return rgb, mask


def _save_rgb(rgb: np.ndarray, path: Path) -> None:
    Image.fromarray((rgb * 255.0 + 0.5).astype(np.uint8)).save(path)


def make_toy_dataset(root: str | Path, category: str = TOY_CATEGORY, n_train: int = 50,
                     n_test_normal: int = 15, n_test_abnormal: int = 15, size: int = 128,
                     seed: int = 0) -> Path:
    """Write a toy dataset under ``root/category`` and return the root."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    base = root / category
    train_dir = base / "train" / "good"
    train_dir.mkdir(parents=True, exist_ok=True)
    for i in range(n_train):
        _save_rgb(normal_image(rng, size), train_dir / f"{i:03d}.png")
    good = base / "test" / "good"
    good.mkdir(parents=True, exist_ok=True)
    for i in range(n_test_normal):
        _save_rgb(normal_image(rng, size), good / f"{i:03d}.png")
    for i in range(n_test_abnormal):
        kind = DEFECTS[i % len(DEFECTS)]
        img_dir = base / "test" / kind
        gt_dir = base / "ground_truth" / kind
        img_dir.mkdir(parents=True, exist_ok=True)
        gt_dir.mkdir(parents=True, exist_ok=True)
        rgb, mask = abnormal_image(rng, size, kind)
        _save_rgb(rgb, img_dir / f"{i:03d}.png")
        Image.fromarray(mask.astype(np.uint8) * 255).save(gt_dir / f"{i:03d}_mask.png")
    return root
