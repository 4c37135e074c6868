"""Run configuration: defaults, validation and the flat YAML file format.

Precedence is ``--set`` overrides > config file > defaults. Unknown keys are
rejected so a typo never silently falls back to a default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

import yaml

BACKBONES = ("resnet18", "resnet50", "wide_resnet50")
LAYOUTS = ("mvtec", "mtd", "btad")
TEXTURE_CATEGORIES = ("carpet", "grid", "leather", "tile", "wood")

# ImageNet channel statistics used to standardize every input image.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class ConfigError(ValueError):
    """Invalid configuration key or value."""


def _check(cond: bool, msg: str) -> None:
    if not cond:
        raise ConfigError(msg)


def _pair(value: Any, name: str, cast=float) -> tuple:
    try:
        lo, hi = value
        lo, hi = cast(lo), cast(hi)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be a pair, got {value!r}") from None
    _check(lo <= hi, f"{name} must be ordered (lo <= hi), got {value!r}")
    return (lo, hi)


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    lambda_mask: float = 0.2
    learning_rate: float = 0.005
    epochs: int = 200
    batch_size: int = 16
    seed: int = 0
    backbone: str = "wide_resnet50"
    image_size: int = 256
    tap_blocks: tuple[int, ...] = (1, 2, 3)
    # "imagenet", "random" (frozen seeded init) or a path to a state dict
    teacher_weights: str = "imagenet"
    patch_count: tuple[int, int] = (1, 3)
    patch_area: tuple[float, float] = (0.01, 0.15)
    patch_aspect: tuple[float, float] = (0.3, 3.0)
    blend: str = "seamless"
    # "auto" picks otsu for objects and full for textures
    foreground: str = "auto"

    def __post_init__(self) -> None:
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        blocks = self.tap_blocks.split(",") if isinstance(self.tap_blocks, str) else self.tap_blocks
        try:
            set_("tap_blocks", tuple(int(b) for b in blocks))
        except (TypeError, ValueError):
            raise ConfigError(f"invalid tap_blocks {self.tap_blocks!r}") from None
        set_("patch_count", _pair(self.patch_count, "patch_count", int))
        set_("patch_area", _pair(self.patch_area, "patch_area"))
        set_("patch_aspect", _pair(self.patch_aspect, "patch_aspect"))
        _check(0.0 <= self.alpha <= 1.0, f"alpha must lie in [0, 1], got {self.alpha}")
        _check(0.0 <= self.lambda_mask <= 1.0, f"lambda_mask must lie in [0, 1], got {self.lambda_mask}")
        _check(self.learning_rate > 0, "learning_rate must be positive")
        _check(isinstance(self.epochs, int) and self.epochs >= 1, f"epochs must be >= 1, got {self.epochs}")
        _check(isinstance(self.batch_size, int) and self.batch_size >= 1, "batch_size must be >= 1")
        _check(self.backbone in BACKBONES, f"backbone must be one of {BACKBONES}, got {self.backbone!r}")
        _check(self.image_size >= 32 and self.image_size % 16 == 0, "image_size must be a multiple of 16, >= 32")
        _check(self.tap_blocks == (1, 2, 3), "only tap_blocks = (1, 2, 3) is supported")
        _check(self.patch_count[0] >= 0, "patch_count must be non-negative")
        _check(0 < self.patch_area[0] and self.patch_area[1] <= 0.25, "patch_area must lie within (0, 0.25]")
        _check(self.patch_aspect[0] > 0, "patch_aspect must be positive")
        _check(self.blend in ("seamless", "paste"), f"blend must be seamless or paste, got {self.blend!r}")
        _check(self.foreground in ("auto", "otsu", "full"), f"unknown foreground mode {self.foreground!r}")

    def to_dict(self) -> dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


@dataclass(frozen=True)
class RunConfig(TrainConfig):
    data_root: str = "data"
    layout: str = "mvtec"
    categories: tuple[str, ...] = ("all",)
    output_dir: str = "runs"
    fpr_limit: float = 0.3
    smoothing_sigma: float = 0.0
    eval_seed: int = 0
    layer_set: tuple[int, ...] = (1, 2, 3)

    def __post_init__(self) -> None:
        super().__post_init__()
        cats = self.categories
        if isinstance(cats, str):
            cats = [c for c in cats.split(",") if c]
        object.__setattr__(self, "categories", tuple(str(c) for c in cats))
        object.__setattr__(self, "layer_set", parse_layers(self.layer_set))
        _check(self.layout in LAYOUTS, f"layout must be one of {LAYOUTS}, got {self.layout!r}")
        _check(len(self.categories) > 0, "categories must not be empty")
        _check(0.0 < self.fpr_limit <= 1.0, f"fpr_limit must lie in (0, 1], got {self.fpr_limit}")
        _check(self.smoothing_sigma >= 0, "smoothing_sigma must be >= 0")

    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.to_dict())


def parse_layers(value: Any) -> tuple[int, ...]:
    """Parse ``"1,2,3"``, ``2`` or ``[1, 3]`` into a sorted tuple of levels."""
    if isinstance(value, str):
        items = [v for v in value.replace(" ", "").split(",") if v]
    elif isinstance(value, int):
        items = [value]
    else:
        items = list(value)
    try:
        layers = tuple(sorted({int(v) for v in items}))
    except ValueError:
        raise ConfigError(f"invalid layer set {value!r}") from None
    _check(len(layers) > 0, "layer set must not be empty")
    _check(all(1 <= v <= 3 for v in layers), f"layers must be within 1..3, got {value!r}")
    return layers


def _plain(d: dict[str, Any]) -> dict[str, Any]:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def _coerce(name: str, raw: Any, default: Any) -> Any:
    # YAML reads "1e-3" as a string and "1" as an int; normalize to the field type
    if isinstance(default, bool):
        return bool(raw)
    if isinstance(default, float) and isinstance(raw, (int, float, str)):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{name} expects a number, got {raw!r}") from None
    if isinstance(default, int) and not isinstance(raw, bool):
        if isinstance(raw, float) and raw.is_integer():
            return int(raw)
        if isinstance(raw, (int, str)):
            try:
                return int(raw)
            except ValueError:
                raise ConfigError(f"{name} expects an integer, got {raw!r}") from None
    if isinstance(default, str) and not isinstance(raw, str):
        if name == "categories":
            return raw
        return str(raw)
    return raw


def build_config(data: dict[str, Any]) -> RunConfig:
    defaults = RunConfig()
    known = {f.name: getattr(defaults, f.name) for f in fields(RunConfig)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key: {key}")
        kwargs[key] = _coerce(key, value, known[key])
    try:
        return RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override must look like key=value, got {item!r}")
    key, raw = item.split("=", 1)
    key = key.strip().replace("-", "_")
    if key in ("layer_set", "categories", "tap_blocks"):
        return key, raw
    return key, yaml.safe_load(raw) if raw else ""


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    data: dict[str, Any] = {}
    if path is not None:
        with open(path) as fh:
            loaded = yaml.safe_load(fh) or {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config must be a flat mapping")
        data.update(loaded)
    data.update(overrides or {})
    return build_config(data)


def dump_config(cfg: TrainConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def save_config(cfg: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(cfg))


def replace(cfg: RunConfig, **changes: Any) -> RunConfig:
    return build_config({**cfg.to_dict(), **changes})


def default_foreground(category: str) -> str:
    name = category.lower()
    textured = name in TEXTURE_CATEGORIES or "texture" in name
    return "full" if textured else "otsu"


__all__ = [
    "BACKBONES",
    "ConfigError",
    "IMAGENET_MEAN",
    "IMAGENET_STD",
    "LAYOUTS",
    "RunConfig",
    "TrainConfig",
    "build_config",
    "default_foreground",
    "dump_config",
    "load_config",
    "parse_layers",
    "parse_override",
    "replace",
    "save_config",
]
