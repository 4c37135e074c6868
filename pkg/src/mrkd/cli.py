"""Command-line entry point: train, eval, predict, plot-dist, sweep, make-toy.

Exit codes: 0 ok, 2 configuration error, 3 data error, 4 checkpoint error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

from mrkd import plotting
from mrkd.config import ConfigError, RunConfig, load_config, parse_layers, parse_override, replace, save_config
from mrkd.data import DatasetError, ImageRecord, list_categories, load_image, scan_dataset
from mrkd.metrics import ImageResult, MetricError, MetricsReport, evaluate
from mrkd.scoring import score_image, smooth_map, write_png16, write_raw
from mrkd.training import Checkpoint, CheckpointError, TrainingError, train

log = logging.getLogger("mrkd")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 0, 2, 3, 4
SWEEP_AXES = {"alpha": "alpha", "lambda": "lambda_mask", "layers": "layer_set", "backbone": "backbone"}

# flag dest -> config key
_FLAG_KEYS = {
    "data_root": "data_root",
    "layout": "layout",
    "category": "categories",
    "out": "output_dir",
    "seed": "seed",
    "epochs": "epochs",
    "batch_size": "batch_size",
    "backbone": "backbone",
    "image_size": "image_size",
    "alpha": "alpha",
    "lambda_mask": "lambda_mask",
    "teacher_weights": "teacher_weights",
    "fpr_limit": "fpr_limit",
    "layers": "layer_set",
    "eval_seed": "eval_seed",
    "smoothing_sigma": "smoothing_sigma",
}


class CliError(Exception):
    def __init__(self, code: int, message: str) -> None:
        super().__init__(message)
        self.code = code


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("common")
    g.add_argument("--config", type=Path, help="flat YAML config file")
    g.add_argument("--data-root")
    g.add_argument("--layout", choices=("mvtec", "mtd", "btad"))
    g.add_argument("--category", help="category name, comma list, or 'all'")
    g.add_argument("--out", help="output directory")
    g.add_argument("--seed", type=int)
    g.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--backbone")
    g.add_argument("--image-size", type=int)
    g.add_argument("--alpha", type=float)
    g.add_argument("--lambda", dest="lambda_mask", type=float)
    g.add_argument("--teacher-weights", help="imagenet, random, or a state-dict path")
    g.add_argument("--fpr-limit", type=float)
    g.add_argument("--layers", help="layer set, e.g. 1,2,3")
    g.add_argument("--eval-seed", type=int)
    g.add_argument("--smoothing-sigma", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrkd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model per category")
    _common(p)

    p = sub.add_parser("eval", help="score the test split and write report.csv/report.json")
    _common(p)
    p.add_argument("--checkpoint", type=Path, help="checkpoint file (single category only)")
    p.add_argument("--report-dir", type=Path, help="where reports go (default: --out)")
    p.add_argument("--dump-scores", action="store_true", help="write per-image scores.csv")
    p.add_argument("--save-maps", action="store_true", help="write raw and 16-bit PNG score maps")

    p = sub.add_parser("predict", help="heatmap overlay and image score for one image")
    _common(p)
    p.add_argument("--image", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--heatmap", type=Path, help="overlay PNG path")
    p.add_argument("--raw", type=Path, help="also write the raw score map here")
    p.add_argument("--panel", type=Path, help="also write a side-by-side figure here")

    p = sub.add_parser("plot-dist", help="score density figure per category")
    _common(p)
    p.add_argument("--scores", type=Path, help="per-image score dump (default: <out>/scores.csv)")

    p = sub.add_parser("sweep", help="train+eval over one ablation axis")
    _common(p)
    p.add_argument("--axis", required=True, help="one of: " + ", ".join(SWEEP_AXES))
    p.add_argument("--values", required=True, help="comma list; for layers, ';'-separated sets")

    p = sub.add_parser("make-toy", help="write the procedural toy texture dataset")
    p.add_argument("--root", type=Path, required=True)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--n-train", type=int, default=50)
    p.add_argument("--n-test", type=int, default=15, help="normal and abnormal test images each")
    p.add_argument("--seed", type=int, default=0)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides: dict[str, Any] = {}
    for dest, key in _FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is not None:
            overrides[key] = value
    for item in args.overrides:
        key, value = parse_override(item)
        overrides[key] = value
    return load_config(args.config, overrides)


def _categories(cfg: RunConfig) -> list[str]:
    if cfg.categories == ("all",):
        return list_categories(cfg.data_root, cfg.layout)
    return list(cfg.categories)


def _ckpt_path(cfg: RunConfig, category: str) -> Path:
    return Path(cfg.output_dir) / category / "model.ckpt"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run_train(cfg: RunConfig) -> list[Path]:
    written = []
    for category in _categories(cfg):
        index = scan_dataset(cfg.data_root, cfg.layout, category, seed=cfg.seed)
        out = Path(cfg.output_dir) / category
        out.mkdir(parents=True, exist_ok=True)
        log.info("training %s on %d images", category, len(index.train))
        ckpt = train(cfg.train_config(), index,
                     on_epoch=lambda e, l: log.info("%s epoch %d loss %.6f", category, e, l))
        ckpt.save(out / "model.ckpt")
        with open(out / "loss.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("epoch", "mean_loss"))
            for epoch, loss in enumerate(ckpt.loss_history, start=1):
                w.writerow((epoch, repr(loss)))
        save_config(cfg, out / "config.yaml")
        plotting.plot_loss_curve(ckpt.loss_history, out / "loss.png", title=category)
        written.append(out / "model.ckpt")
    return written


def write_scores(results: Sequence[tuple[str, ImageResult]], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("category", "image", "label", "score"))
        for category, r in results:
            w.writerow((category, r.path, r.label, repr(r.score)))


def run_eval(cfg: RunConfig, checkpoint: Path | None = None, report_dir: Path | None = None,
             dump_scores: bool = False, save_maps: bool = False) -> MetricsReport:
    categories = _categories(cfg)
    if checkpoint is not None and len(categories) != 1:
        raise ConfigError("--checkpoint needs exactly one --category")
    report_dir = Path(report_dir or cfg.output_dir)
    report: MetricsReport | None = None
    dumped: list[tuple[str, ImageResult]] = []
    for category in categories:
        path = checkpoint or _ckpt_path(cfg, category)
        ckpt = Checkpoint.load(path)
        index = scan_dataset(cfg.data_root, cfg.layout, category, seed=ckpt.config.seed)
        results: list[ImageResult] = []
        rep = evaluate(ckpt, index, cfg, results)
        rep.metadata = {f"{category}.checkpoint_sha256": _sha256(Path(path)), **rep.metadata}
        report = rep if report is None else report.merge(rep)
        dumped += [(category, r) for r in results]
        if save_maps:
            maps_dir = report_dir / category / "maps"
            maps_dir.mkdir(parents=True, exist_ok=True)
            for i, r in enumerate(results):
                stem = f"{i:04d}_{Path(r.path).stem}"
                write_raw(r.smap, maps_dir / f"{stem}.raw")
                write_png16(r.smap, maps_dir / f"{stem}.png")
    assert report is not None
    report_dir.mkdir(parents=True, exist_ok=True)
    report.to_csv(report_dir / "report.csv")
    report.to_json(report_dir / "report.json")
    if dump_scores:
        write_scores(dumped, report_dir / "scores.csv")
    return report


def run_predict(cfg: RunConfig, image: Path, checkpoint: Path | None, heatmap: Path | None,
                raw: Path | None = None, panel: Path | None = None) -> float:
    if checkpoint is None:
        categories = _categories(cfg)
        if len(categories) != 1:
            raise ConfigError("predict needs --checkpoint or exactly one --category")
        checkpoint = _ckpt_path(cfg, categories[0])
    ckpt = Checkpoint.load(checkpoint)
    pixels = load_image(image, ckpt.config.image_size)
    record = ImageRecord(pixels, "normal", None, ckpt.category, image)
    smap = score_image(record, ckpt, seed=cfg.eval_seed, layers=cfg.layer_set)
    smap = smooth_map(smap, cfg.smoothing_sigma) if cfg.smoothing_sigma > 0 else smap
    heatmap = heatmap or Path(cfg.output_dir) / f"{image.stem}_heatmap.png"
    plotting.overlay_heatmap(pixels, smap, heatmap)
    if raw is not None:
        write_raw(smap, raw)
    if panel is not None:
        plotting.heatmap_panel(pixels, smap, panel, title=image.name)
    return smap.image_score


def read_scores(path: Path) -> dict[str, tuple[list[float], list[float]]]:
    if not path.is_file():
        raise DatasetError(f"score dump not found: {path}")
    groups: dict[str, tuple[list[float], list[float]]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            normal, abnormal = groups.setdefault(row["category"], ([], []))
            (abnormal if int(row["label"]) else normal).append(float(row["score"]))
    return groups


def run_plot_dist(cfg: RunConfig, scores: Path | None) -> list[Path]:
    groups = read_scores(scores or Path(cfg.output_dir) / "scores.csv")
    out = []
    for category, (normal, abnormal) in sorted(groups.items()):
        if not normal or not abnormal:
            log.warning("%s: score dump lacks %s images; plotting one density", category,
                        "normal" if not normal else "abnormal")
        path = Path(cfg.output_dir) / "figures" / f"dist_{category}.png"
        out.append(plotting.plot_score_distribution(normal, abnormal, path, title=category))
    return out


def parse_sweep(axis: str, values: str) -> tuple[str, list[Any]]:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep takes exactly one axis from {sorted(SWEEP_AXES)}, got {axis!r}")
    if axis == "layers":
        items = [parse_layers(v) for v in values.split(";") if v.strip()]
    else:
        items = [v.strip() for v in values.split(",") if v.strip()]
        if axis != "backbone":
            try:
                items = [float(v) for v in items]
            except ValueError:
                raise ConfigError(f"non-numeric value in {values!r}") from None
    if not items:
        raise ConfigError("sweep needs at least one value")
    return SWEEP_AXES[axis], items


def _label(value: Any) -> str:
    if isinstance(value, tuple):
        return ",".join(map(str, value))
    return f"{value:g}" if isinstance(value, float) else str(value)


def run_sweep(cfg: RunConfig, axis: str, values: str) -> Path:
    key, items = parse_sweep(axis, values)
    base_out = Path(cfg.output_dir)
    rows = []
    trained_once: RunConfig | None = None
    for value in items:
        name = _label(value)
        if key == "layer_set":
            # layer fusion only changes scoring; one trained model serves every set
            if trained_once is None:
                trained_once = replace(cfg, output_dir=str(base_out / "layers_model"))
                run_train(trained_once)
            run_cfg = replace(trained_once, layer_set=value)
            report_dir = base_out / f"layers={name.replace(',', '-')}"
        else:
            run_cfg = replace(cfg, **{key: value, "output_dir": str(base_out / f"{axis}={name}")})
            run_train(run_cfg)
            report_dir = Path(run_cfg.output_dir)
        # layer sets keep their maps so the fused map can be checked against the parts
        report = run_eval(run_cfg, report_dir=report_dir, save_maps=key == "layer_set")
        for category, m in report.per_category.items():
            rows.append((axis, name, category, *map(repr, m.as_row())))
    path = base_out / f"sweep_{axis}.csv"
    base_out.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("axis", "value", "category", "auroc_il", "auroc_pl", "aupro"))
        w.writerows(rows)
    return path


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "make-toy":
        from mrkd.toy import make_toy_dataset

        root = make_toy_dataset(args.root, n_train=args.n_train, n_test_normal=args.n_test,
                                n_test_abnormal=args.n_test, size=args.size, seed=args.seed)
        print(root)
        return EXIT_OK
    cfg = resolve_config(args)
    if args.command == "train":
        for path in run_train(cfg):
            print(path)
    elif args.command == "eval":
        report = run_eval(cfg, args.checkpoint, args.report_dir, args.dump_scores, args.save_maps)
        avg = report.averages
        print(f"average auroc_il={avg.auroc_il:.4f} auroc_pl={avg.auroc_pl:.4f} aupro={avg.aupro:.4f}")
    elif args.command == "predict":
        score = run_predict(cfg, args.image, args.checkpoint, args.heatmap, args.raw, args.panel)
        print(f"{score:.6f}")
    elif args.command == "plot-dist":
        for path in run_plot_dist(cfg, args.scores):
            print(path)
    elif args.command == "sweep":
        print(run_sweep(cfg, args.axis, args.values))
    return EXIT_OK


_ERRORS: list[tuple[type[BaseException], int]] = [
    (ConfigError, EXIT_CONFIG),
    (CheckpointError, EXIT_CHECKPOINT),
    (DatasetError, EXIT_DATA),
    (MetricError, EXIT_DATA),
    (TrainingError, EXIT_DATA),
]


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except tuple(e for e, _ in _ERRORS) as exc:
        code = next(c for e, c in _ERRORS if isinstance(exc, e))
        print(f"mrkd: error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
