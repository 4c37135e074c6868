"""Image AUROC, pooled pixel AUROC and the per-region-overlap (PRO) area.

All three are exact: ties are resolved by average ranks or by grouping equal
scores into a single threshold, never by binning.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
from scipy.ndimage import label as label_components
from scipy.stats import rankdata

from mrkd.data import load_record
from mrkd.scoring import ScoreMap, score_image, smooth_map

# 8-connectivity for ground-truth regions
_EIGHT = np.ones((3, 3), dtype=int)
METRIC_COLUMNS = ("auroc_il", "auroc_pl", "aupro")


class MetricError(ValueError):
    pass


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney estimate of P(score_pos > score_neg) with ties counted 1/2."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise MetricError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("auroc needs both positive and negative labels")
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def _values(m: ScoreMap | np.ndarray) -> np.ndarray:
    return np.asarray(m.values if isinstance(m, ScoreMap) else m, dtype=np.float64)


def _check_pairs(maps, gt_masks) -> None:
    if len(maps) != len(gt_masks):
        raise MetricError(f"{len(maps)} maps but {len(gt_masks)} masks")
    for m, g in zip(maps, gt_masks):
        if _values(m).shape != np.shape(g):
            raise MetricError(f"map shape {_values(m).shape} != mask shape {np.shape(g)}")


def pixel_auroc(maps: Sequence[ScoreMap | np.ndarray], gt_masks: Sequence[np.ndarray]) -> float:
    _check_pairs(maps, gt_masks)
    scores = np.concatenate([_values(m).ravel() for m in maps])
    labels = np.concatenate([np.asarray(g).ravel() > 0 for g in gt_masks])
    if not labels.any():
        raise MetricError("no abnormal pixels in the pool")
    return auroc(scores, labels)


def pro_curve(maps: Sequence[ScoreMap | np.ndarray], gt_masks: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """FPR and mean region overlap at every distinct score, thresholds descending.

    The first point is (0, 0), the threshold above every score. Each
    abnormal pixel carries weight 1 / (region size * region count), so the
    cumulative weight above a threshold is the mean per-region overlap.
    """
    _check_pairs(maps, gt_masks)
    scores, weights, negatives = [], [], []
    n_regions = 0
    region_sizes: list[np.ndarray] = []
    region_ids: list[np.ndarray] = []
    for m, g in zip(maps, gt_masks):
        lab, n = label_components(np.asarray(g) > 0, structure=_EIGHT)
        region_ids.append(lab.ravel())
        region_sizes.append(np.bincount(lab.ravel(), minlength=n + 1))
        n_regions += n
    if n_regions == 0:
        raise MetricError("no ground-truth regions")
    for m, lab, sizes in zip(maps, region_ids, region_sizes):
        s = _values(m).ravel()
        w = np.zeros(s.shape, dtype=np.float64)
        inside = lab > 0
        w[inside] = 1.0 / (sizes[lab[inside]] * n_regions)
        scores.append(s)
        weights.append(w)
        negatives.append(~inside)
    s = np.concatenate(scores)
    w = np.concatenate(weights)
    neg = np.concatenate(negatives)
    n_neg = int(neg.sum())
    if n_neg == 0:
        raise MetricError("no normal pixels to measure false positives")

    order = np.argsort(-s, kind="stable")
    s, w, neg = s[order], w[order], neg[order]
    # last index of each group of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    fpr = np.cumsum(neg)[ends] / n_neg
    pro = np.cumsum(w)[ends]
    return np.r_[0.0, fpr], np.r_[0.0, pro]


def _area_to(fpr: np.ndarray, pro: np.ndarray, limit: float) -> float:
    keep = fpr <= limit
    x, y = fpr[keep], pro[keep]
    if x[-1] < limit:
        j = int(np.searchsorted(fpr, limit, side="right"))
        if j < len(fpr):
            x0, x1, y0, y1 = fpr[j - 1], fpr[j], pro[j - 1], pro[j]
            y_lim = y0 + (y1 - y0) * (limit - x0) / (x1 - x0)
        else:
            y_lim = y[-1]
        x, y = np.r_[x, limit], np.r_[y, y_lim]
    return float(np.sum((x[1:] - x[:-1]) * (y[1:] + y[:-1]) / 2.0))


def aupro(maps: Sequence[ScoreMap | np.ndarray], gt_masks: Sequence[np.ndarray], fpr_limit: float = 0.3) -> float:
    """Area under the PRO curve from FPR 0 to ``fpr_limit``, divided by the limit."""
    if not 0.0 < fpr_limit <= 1.0:
        raise MetricError(f"fpr_limit must lie in (0, 1], got {fpr_limit}")
    fpr, pro = pro_curve(maps, gt_masks)
    return _area_to(fpr, pro, fpr_limit) / fpr_limit


@dataclass
class CategoryMetrics:
    auroc_il: float
    auroc_pl: float
    aupro: float

    def as_row(self) -> tuple[float, float, float]:
        return (self.auroc_il, self.auroc_pl, self.aupro)


@dataclass
class MetricsReport:
    per_category: dict[str, CategoryMetrics]
    metadata: dict[str, Any] = field(default_factory=dict)

    @property
    def averages(self) -> CategoryMetrics:
        rows = np.array([m.as_row() for m in self.per_category.values()], dtype=np.float64)
        return CategoryMetrics(*(float(v) for v in rows.mean(axis=0)))

    def merge(self, other: "MetricsReport") -> "MetricsReport":
        meta = dict(self.metadata)
        for k, v in other.metadata.items():
            meta.setdefault(k, v)
        return MetricsReport({**self.per_category, **other.per_category}, meta)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("category", *METRIC_COLUMNS))
            for name, m in self.per_category.items():
                writer.writerow((name, *(repr(v) for v in m.as_row())))
            writer.writerow(("average", *(repr(v) for v in self.averages.as_row())))

    def to_dict(self) -> dict[str, Any]:
        return {
            "per_category": {k: dict(zip(METRIC_COLUMNS, m.as_row())) for k, m in self.per_category.items()},
            "averages": dict(zip(METRIC_COLUMNS, self.averages.as_row())),
            "metadata": self.metadata,
        }

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "MetricsReport":
        per = {k: CategoryMetrics(**{c: float(v[c]) for c in METRIC_COLUMNS}) for k, v in data["per_category"].items()}
        return cls(per, dict(data.get("metadata", {})))


def category_metrics(image_scores: Sequence[float], image_labels: Sequence[int],
                     maps: Sequence[ScoreMap | np.ndarray], gt_masks: Sequence[np.ndarray],
                     fpr_limit: float = 0.3) -> CategoryMetrics:
    return CategoryMetrics(
        auroc(image_scores, image_labels),
        pixel_auroc(maps, gt_masks),
        aupro(maps, gt_masks, fpr_limit),
    )


@dataclass
class ImageResult:
    path: str
    label: int
    score: float
    smap: ScoreMap
    gt_mask: np.ndarray


def score_split(checkpoint, index, eval_config) -> list[ImageResult]:
    """Score every test image of ``index`` with the run's evaluation seed."""
    model = checkpoint.build_model()
    size = checkpoint.config.image_size
    results = []
    for i, entry in enumerate(index.test):
        rec = load_record(entry, index.category, size)
        smap = score_image(rec, model, checkpoint.config.lambda_mask, eval_config.eval_seed, i,
                           eval_config.layer_set)
        if eval_config.smoothing_sigma > 0:
            smap = smooth_map(smap, eval_config.smoothing_sigma)
        results.append(ImageResult(str(entry.image_path), int(rec.is_abnormal), smap.image_score, smap, rec.gt_mask))
    return results


def evaluate(checkpoint, index, eval_config, results: list[ImageResult] | None = None) -> MetricsReport:
    """Score the test split and assemble image AUROC, pixel AUROC and AU-PRO."""
    scored = score_split(checkpoint, index, eval_config)
    if results is not None:
        results.extend(scored)
    labels = [r.label for r in scored]
    if len(set(labels)) < 2:
        raise MetricError(f"test split of {index.category!r} lacks normal or abnormal images")
    metrics = category_metrics(
        [r.score for r in scored], labels,
        [r.smap for r in scored], [r.gt_mask for r in scored],
        eval_config.fpr_limit,
    )
    meta = {
        "checkpoint_epoch": checkpoint.epoch,
        "teacher_checksum": checkpoint.teacher_checksum,
        "backbone": checkpoint.config.backbone,
        "lambda_mask": checkpoint.config.lambda_mask,
        "eval_seed": eval_config.eval_seed,
        "layer_set": list(eval_config.layer_set),
        "fpr_limit": eval_config.fpr_limit,
        "smoothing_sigma": eval_config.smoothing_sigma,
    }
    if index.seed is not None:
        meta["split_seed"] = index.seed
    return MetricsReport({index.category: metrics}, meta)
