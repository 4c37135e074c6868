"""Masked reverse knowledge distillation for unsupervised anomaly detection."""

from mrkd.config import RunConfig, TrainConfig
from mrkd.data import DatasetIndex, ImageRecord, load_image, load_mask, scan_dataset
from mrkd.metrics import MetricsReport, aupro, auroc, evaluate, pixel_auroc
from mrkd.scoring import ScoreMap, anomaly_map, score_image, smooth_map
from mrkd.synthesis import SynthesisParams, apply_ilm, synthesize
from mrkd.training import Checkpoint, distill_loss, make_mask, restore, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "DatasetIndex",
    "ImageRecord",
    "MetricsReport",
    "RunConfig",
    "ScoreMap",
    "SynthesisParams",
    "TrainConfig",
    "anomaly_map",
    "apply_ilm",
    "aupro",
    "auroc",
    "distill_loss",
    "evaluate",
    "load_image",
    "load_mask",
    "make_mask",
    "pixel_auroc",
    "restore",
    "scan_dataset",
    "score_image",
    "smooth_map",
    "synthesize",
    "train",
]
