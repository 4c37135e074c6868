"""Feature-level masking, the restoration loss and the training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor

from mrkd.config import TrainConfig, default_foreground
from mrkd.data import DatasetIndex, load_records
from mrkd.networks import GenerationLevel, MRKDModel
from mrkd.rng import numpy_stream, torch_stream
from mrkd.synthesis import SynthesisParams, apply_ilm

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "mrkd-checkpoint/1"
COSINE_EPS = 1e-8
ADAM_BETAS = (0.5, 0.999)


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


def make_mask(shape: Sequence[int], lambda_mask: float, rng: torch.Generator | None = None) -> Tensor:
    """Binary mask that is 0 where a uniform draw falls below ``lambda_mask``."""
    if not 0.0 <= lambda_mask <= 1.0:
        raise ValueError(f"lambda_mask must lie in [0, 1], got {lambda_mask}")
    r = torch.rand(tuple(shape), generator=rng)
    return (r >= lambda_mask).to(torch.float32)


def apply_mask(features: Tensor, mask: Tensor) -> Tensor:
    if mask.shape[-2:] != features.shape[-2:]:
        raise ValueError(f"mask size {tuple(mask.shape[-2:])} != feature size {tuple(features.shape[-2:])}")
    if mask.ndim == 2:
        mask = mask[None, None]
    return features * mask


def restore(features: Tensor, mask: Tensor, gen: GenerationLevel) -> Tensor:
    return gen(apply_mask(features, mask))


def cosine(a: Tensor, b: Tensor, dim: int) -> Tensor:
    dot = (a * b).sum(dim)
    norms = a.norm(dim=dim) * b.norm(dim=dim)
    return (dot / norms.clamp_min(COSINE_EPS)).clamp(-1.0, 1.0)


def distill_loss(restored: Sequence[Tensor], target: Sequence[Tensor]) -> Tensor:
    """Sum over levels of 1 - cos between whole flattened levels, batch-averaged."""
    if len(restored) != len(target):
        raise ValueError("pyramids have different depth")
    total = restored[0].new_zeros(())
    for r, t in zip(restored, target):
        if r.shape != t.shape:
            raise ValueError(f"level shape mismatch {tuple(r.shape)} vs {tuple(t.shape)}")
        total = total + (1.0 - cosine(r.flatten(1), t.detach().flatten(1), dim=1)).mean()
    return total


def restore_pyramid(model: MRKDModel, teacher_pyramid: Sequence[Tensor], lambda_mask: float,
                    rng: torch.Generator | None) -> list[Tensor]:
    """Bottleneck -> student -> per-level masking and generation."""
    student = model.decode(list(teacher_pyramid))
    out = []
    for f, gen in zip(student, model.generators):
        if lambda_mask > 0:
            mask = make_mask((f.shape[0], 1, *f.shape[-2:]), lambda_mask, rng)
            out.append(restore(f, mask, gen))
        else:
            out.append(gen(f))
    return out


@dataclass
class Checkpoint:
    state: dict[str, Tensor]
    config: TrainConfig
    epoch: int
    final_loss: float
    teacher_checksum: str
    category: str = ""
    loss_history: list[float] = field(default_factory=list)
    format: str = CHECKPOINT_FORMAT

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({
            "format": self.format,
            "state": self.state,
            "config": self.config.to_dict(),
            "epoch": self.epoch,
            "final_loss": self.final_loss,
            "teacher_checksum": self.teacher_checksum,
            "category": self.category,
            "loss_history": list(self.loss_history),
        }, path)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise CheckpointError(f"checkpoint not found: {path}")
        try:
            blob = torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from None
        if not isinstance(blob, dict) or blob.get("format") != CHECKPOINT_FORMAT:
            found = blob.get("format") if isinstance(blob, dict) else None
            raise CheckpointError(f"{path}: format {found!r} is not {CHECKPOINT_FORMAT!r}")
        return cls(
            state=blob["state"],
            config=TrainConfig.from_dict(blob["config"]),
            epoch=int(blob["epoch"]),
            final_loss=float(blob["final_loss"]),
            teacher_checksum=blob["teacher_checksum"],
            category=blob.get("category", ""),
            loss_history=list(blob.get("loss_history", [])),
        )

    def build_model(self) -> MRKDModel:
        cfg = self.config
        model = MRKDModel(cfg.backbone, cfg.teacher_weights, cfg.seed)
        if model.teacher.checksum() != self.teacher_checksum:
            raise CheckpointError(
                f"teacher weights ({cfg.backbone}, {cfg.teacher_weights}) do not match the checkpoint"
            )
        try:
            model.load_trainable_state(self.state)
        except RuntimeError as exc:
            raise CheckpointError(f"checkpoint parameters do not fit {cfg.backbone}: {exc}") from None
        return model.eval()


def synthesis_params(config: TrainConfig, category: str) -> SynthesisParams:
    fg = default_foreground(category) if config.foreground == "auto" else config.foreground
    return SynthesisParams(
        alpha=config.alpha,
        patch_count_range=config.patch_count,
        patch_area_range=config.patch_area,
        aspect_range=config.patch_aspect,
        blend=config.blend,
        foreground=fg,
    )


def initial_checkpoint(config: TrainConfig, category: str = "") -> Checkpoint:
    """Untrained checkpoint: the randomly initialized trainable modules."""
    model = MRKDModel(config.backbone, config.teacher_weights, config.seed)
    return Checkpoint(model.trainable_state(), config, 0, float("nan"), model.teacher.checksum(), category)


def train(config: TrainConfig, index: DatasetIndex,
          on_epoch: Callable[[int, float], None] | None = None,
          model: MRKDModel | None = None) -> Checkpoint:
    """Train bottleneck, student and generation modules on the normal split.

    ``model`` may be passed in to inspect it afterwards; it must have been
    built from the same backbone, weights and seed as ``config``.
    """
    entries = index.train
    if not entries:
        raise TrainingError(f"no training images for category {index.category!r}")
    if any(e.label != "normal" for e in entries):
        raise TrainingError("training split must contain only normal images")
    records = load_records(index, "train", config.image_size)
    params = synthesis_params(config, index.category)

    if model is None:
        model = MRKDModel(config.backbone, config.teacher_weights, config.seed)
    teacher_sum = model.teacher.checksum()
    optimizer = torch.optim.Adam(model.trainable_parameters(), lr=config.learning_rate, betas=ADAM_BETAS)
    synth_rng = numpy_stream(config.seed, "synthesis")
    order_rng = numpy_stream(config.seed, "loader")
    flm_rng = torch_stream(config.seed, "flm-train")

    history: list[float] = []
    n = len(records)
    for epoch in range(1, config.epochs + 1):
        model.train()
        order = order_rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            batch = [records[i] for i in order[start:start + config.batch_size]]
            samples = apply_ilm(batch, params, synth_rng, pool=records)
            x_n = torch.from_numpy(np.stack([r.pixels for r in batch]))
            x_a = torch.from_numpy(np.stack([s.image for s in samples]))
            target = model.teacher(x_n)
            restored = restore_pyramid(model, model.teacher(x_a), config.lambda_mask, flm_rng)
            loss = distill_loss(restored, target)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss {loss.item()} at epoch {epoch}, batch starting {start}; "
                    f"lr={config.learning_rate}, batch={len(batch)}"
                )
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            total += loss.item() * len(batch)
            seen += len(batch)
        mean = total / seen
        history.append(mean)
        log.info("epoch %d/%d loss %.6f", epoch, config.epochs, mean)
        if on_epoch is not None:
            on_epoch(epoch, mean)

    if model.teacher.checksum() != teacher_sum:
        raise TrainingError("teacher parameters changed during training")
    final = history[-1] if history else math.nan
    return Checkpoint(model.trainable_state(), config, config.epochs, final, teacher_sum,
                      index.category, history)
