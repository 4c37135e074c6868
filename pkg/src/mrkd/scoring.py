"""Anomaly maps from teacher/restored feature discrepancy, plus map export."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy.ndimage import gaussian_filter
from torch import Tensor

from mrkd.data import ImageRecord
from mrkd.networks import MRKDModel
from mrkd.rng import torch_stream
from mrkd.training import Checkpoint, CheckpointError, cosine, restore_pyramid

# Bilinear upsampling convention; pinned so maps are reproducible.
ALIGN_CORNERS = False
RAW_MAGIC = b"MRKDMAP1"
_RAW_HEADER = struct.Struct("<8sIIB3BQ")


@dataclass
class ScoreMap:
    values: np.ndarray  # [H, W] float32
    image_score: float
    layers: tuple[int, ...] = (1, 2, 3)
    layer_maps: dict[int, np.ndarray] = field(default_factory=dict)
    seed: int | None = None


def _as_batch(level: Tensor) -> Tensor:
    return level if level.ndim == 4 else level[None]


def layer_discrepancy(teacher: Tensor, restored: Tensor, out_size: int) -> Tensor:
    """Per-pixel 1 - channel cosine, bilinearly resized to ``out_size``; [B, out, out]."""
    teacher, restored = _as_batch(teacher), _as_batch(restored)
    if teacher.shape != restored.shape:
        raise ValueError(f"level shape mismatch {tuple(teacher.shape)} vs {tuple(restored.shape)}")
    d = (1.0 - cosine(teacher.float(), restored.float(), dim=1))[:, None]
    if d.shape[-2:] != (out_size, out_size):
        d = F.interpolate(d, size=(out_size, out_size), mode="bilinear", align_corners=ALIGN_CORNERS)
    return d[:, 0]


def anomaly_maps(teacher_pyr: Sequence[Tensor], restored_pyr: Sequence[Tensor], out_size: int,
                 layers: Sequence[int] = (1, 2, 3)) -> list[ScoreMap]:
    layers = tuple(sorted(set(int(l) for l in layers)))
    if not layers:
        raise ValueError("layer set must not be empty")
    if any(l < 1 or l > len(teacher_pyr) for l in layers):
        raise ValueError(f"layers {layers} out of range 1..{len(teacher_pyr)}")
    per_layer = {
        l: layer_discrepancy(teacher_pyr[l - 1], restored_pyr[l - 1], out_size).detach().cpu().numpy()
        for l in layers
    }
    batch = next(iter(per_layer.values())).shape[0]
    maps = []
    for b in range(batch):
        singles = {l: m[b].astype(np.float32) for l, m in per_layer.items()}
        total = np.zeros((out_size, out_size), dtype=np.float32)
        for l in layers:
            total += singles[l]
        maps.append(ScoreMap(total, float(total.max()), layers, singles))
    return maps


def anomaly_map(teacher_pyr: Sequence[Tensor], restored_pyr: Sequence[Tensor], out_size: int,
                layers: Sequence[int] = (1, 2, 3)) -> ScoreMap:
    return anomaly_maps(teacher_pyr, restored_pyr, out_size, layers)[0]


def image_seed(run_seed: int, image_index: int) -> torch.Generator:
    return torch_stream(run_seed, "flm-eval", image_index)


def score_image(record: ImageRecord, model: MRKDModel | Checkpoint, lambda_mask: float | None = None,
                seed: int = 0, image_index: int = 0, layers: Sequence[int] = (1, 2, 3)) -> ScoreMap:
    """Score one image with test-time feature masking.

    The mask stream is derived from ``(seed, image_index)`` so a batch can be
    scored in any order, by any worker, with identical results.
    """
    if isinstance(model, Checkpoint):
        if lambda_mask is None:
            lambda_mask = model.config.lambda_mask
        model = model.build_model()
    if lambda_mask is None:
        raise ValueError("lambda_mask is required when scoring with a bare model")
    size = record.pixels.shape[-1]
    if record.pixels.shape[0] != 3:
        raise CheckpointError(f"expected a 3-channel image, got shape {record.pixels.shape}")
    model.eval()
    with torch.no_grad():
        x = torch.from_numpy(np.ascontiguousarray(record.pixels))[None]
        teacher = model.teacher(x)
        restored = restore_pyramid(model, teacher, lambda_mask, image_seed(seed, image_index))
        smap = anomaly_map(teacher, restored, size, layers)
    smap.seed = seed
    return smap


def smooth_map(smap: ScoreMap, sigma: float) -> ScoreMap:
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return ScoreMap(smap.values.copy(), smap.image_score, smap.layers, dict(smap.layer_maps), smap.seed)
    values = gaussian_filter(smap.values.astype(np.float64), sigma, mode="reflect").astype(np.float32)
    return ScoreMap(values, float(values.max()), smap.layers, {}, smap.seed)


def write_png16(smap: ScoreMap, path: str | Path) -> None:
    """16-bit grayscale PNG; 0..65535 spans [0, 2 * |layers|]."""
    top = 2.0 * len(smap.layers)
    scaled = np.clip(smap.values / top, 0.0, 1.0) * 65535.0
    Image.fromarray(np.round(scaled).astype(np.uint16)).save(path)


def read_png16(path: str | Path, n_layers: int = 3) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im, dtype=np.float64)
    return arr / 65535.0 * 2.0 * n_layers


def write_raw(smap: ScoreMap, path: str | Path) -> None:
    """Flat little-endian float32 map behind a fixed header.

    Header: magic ``MRKDMAP1``, H, W (uint32), layer count (uint8), three
    layer ids (uint8, zero padded), seed (uint64).
    """
    h, w = smap.values.shape
    ids = list(smap.layers) + [0] * (3 - len(smap.layers))
    header = _RAW_HEADER.pack(RAW_MAGIC, h, w, len(smap.layers), *ids, smap.seed or 0)
    Path(path).write_bytes(header + smap.values.astype("<f4").tobytes())


def read_raw(path: str | Path) -> ScoreMap:
    blob = Path(path).read_bytes()
    magic, h, w, n, l1, l2, l3, seed = _RAW_HEADER.unpack_from(blob)
    if magic != RAW_MAGIC:
        raise ValueError(f"{path}: not a raw score map")
    values = np.frombuffer(blob, dtype="<f4", offset=_RAW_HEADER.size).reshape(h, w).astype(np.float32)
    return ScoreMap(values, float(values.max()), tuple((l1, l2, l3)[:n]), {}, seed)
