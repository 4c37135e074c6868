"""Dataset discovery and image preprocessing for MVTec, MTD and BTAD layouts."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
from PIL import Image, UnidentifiedImageError

from mrkd.config import IMAGENET_MEAN, IMAGENET_STD, LAYOUTS

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
MTD_TRAIN_FRACTION = 0.8

Split = Literal["train", "test"]
Label = Literal["normal", "abnormal"]


class DatasetError(Exception):
    """Dataset layout is missing or inconsistent."""


class ImageDecodeError(DatasetError):
    def __init__(self, path: Path | str, reason: str = "cannot decode image") -> None:
        super().__init__(f"{path}: {reason}")
        self.path = Path(path)


@dataclass(frozen=True)
class Entry:
    image_path: Path
    split: Split
    label: Label
    defect_name: str | None = None
    mask_path: Path | None = None


@dataclass(frozen=True)
class DatasetIndex:
    root: Path
    layout: str
    category: str
    entries: tuple[Entry, ...]
    seed: int | None = None

    def split(self, name: Split) -> list[Entry]:
        return [e for e in self.entries if e.split == name]

    @property
    def train(self) -> list[Entry]:
        return self.split("train")

    @property
    def test(self) -> list[Entry]:
        return self.split("test")


@dataclass
class ImageRecord:
    pixels: np.ndarray  # [3, H, W], standardized float32
    label: Label
    gt_mask: np.ndarray | None  # [H, W] uint8 in {0, 1}
    category: str
    source_path: Path | None = None

    @property
    def is_abnormal(self) -> bool:
        return self.label == "abnormal"


def _images_in(folder: Path) -> list[Path]:
    if not folder.is_dir():
        return []
    return sorted(
        p for p in folder.iterdir()
        if p.suffix.lower() in IMAGE_SUFFIXES and not p.stem.endswith("_mask")
    )


def _find_mask(image: Path, mask_dir: Path) -> Path | None:
    candidates = sorted(p for p in mask_dir.glob("*") if p.suffix.lower() in IMAGE_SUFFIXES) if mask_dir.is_dir() else []
    for name in (f"{image.stem}_mask", image.stem):
        for c in candidates:
            if c.stem == name and c != image:
                return c
    # BTAD masks sometimes carry a suffix after the image stem
    for c in candidates:
        if c.stem.startswith(image.stem) and c != image:
            return c
    return None


def _scan_mvtec(base: Path) -> list[Entry]:
    entries = [Entry(p, "train", "normal") for p in _images_in(base / "train" / "good")]
    test_dir = base / "test"
    for defect_dir in sorted(d for d in test_dir.iterdir() if d.is_dir()) if test_dir.is_dir() else []:
        defect = defect_dir.name
        for img in _images_in(defect_dir):
            if defect == "good":
                entries.append(Entry(img, "test", "normal"))
                continue
            mask = _find_mask(img, base / "ground_truth" / defect)
            if mask is None:
                raise DatasetError(f"no ground-truth mask for abnormal image {img}")
            entries.append(Entry(img, "test", "abnormal", defect, mask))
    return entries


def _scan_btad(base: Path) -> list[Entry]:
    entries = [Entry(p, "train", "normal") for p in _images_in(base / "train" / "ok")]
    entries += [Entry(p, "test", "normal") for p in _images_in(base / "test" / "ok")]
    for img in _images_in(base / "test" / "ko"):
        mask = _find_mask(img, base / "ground_truth" / "ko")
        if mask is None:
            raise DatasetError(f"no ground-truth mask for abnormal image {img}")
        entries.append(Entry(img, "test", "abnormal", "ko", mask))
    return entries


def _scan_mtd(base: Path, seed: int) -> list[Entry]:
    normals = _images_in(base / "good")
    if not normals:
        raise DatasetError(f"no normal images under {base / 'good'}")
    order = np.random.default_rng(seed).permutation(len(normals))
    n_train = int(np.floor(MTD_TRAIN_FRACTION * len(normals)))
    entries = [
        Entry(normals[i], "train" if rank < n_train else "test", "normal")
        for rank, i in enumerate(order)
    ]
    defect_dir = base / "defect"
    files = _images_in(defect_dir)
    stems = {}
    for p in files:
        stems.setdefault(p.stem, []).append(p)
    # MTD keeps a .png mask next to each .jpg defect image under the same stem
    images = [p for p in files if not (p.suffix.lower() == ".png" and len(stems[p.stem]) > 1)]
    for img in images:
        mask = _find_mask(img, base / "ground_truth") or _find_mask(img, defect_dir)
        if mask is None:
            raise DatasetError(f"no ground-truth mask for abnormal image {img}")
        entries.append(Entry(img, "test", "abnormal", "defect", mask))
    return entries


def list_categories(root: str | Path, layout: str) -> list[str]:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root does not exist: {root}")
    return sorted(d.name for d in root.iterdir() if d.is_dir() and not d.name.startswith("."))


def scan_dataset(root: str | Path, layout: str, category: str, seed: int = 0) -> DatasetIndex:
    """Index one category of a dataset laid out on disk.

    MVTec: ``<root>/<cat>/{train/good, test/<defect>, ground_truth/<defect>/<stem>_mask.png}``.
    MTD: ``<root>/<cat>/{good, defect, ground_truth}``; masks may also sit
    next to the defect images. A seeded shuffle sends 80% of normals to train.
    BTAD: ``<root>/<cat>/{train/ok, test/ok, test/ko, ground_truth/ko}``.
    """
    root = Path(root)
    if layout not in LAYOUTS:
        raise DatasetError(f"unsupported layout {layout!r}; expected one of {LAYOUTS}")
    if not root.is_dir():
        raise DatasetError(f"dataset root does not exist: {root}")
    base = root / category
    if not base.is_dir():
        raise DatasetError(f"category directory does not exist: {base}")
    if layout == "mvtec":
        entries = _scan_mvtec(base)
    elif layout == "btad":
        entries = _scan_btad(base)
    else:
        entries = _scan_mtd(base, seed)
    entries.sort(key=lambda e: str(e.image_path))
    return DatasetIndex(root, layout, category, tuple(entries), seed if layout == "mtd" else None)


def _open(path: Path | str, mode: str) -> Image.Image:
    try:
        with Image.open(path) as im:
            return im.convert(mode)
    except (UnidentifiedImageError, OSError) as exc:
        raise ImageDecodeError(path, str(exc)) from None


def normalize(image: np.ndarray) -> np.ndarray:
    """Standardize a [3, H, W] image in [0, 1] with the ImageNet statistics."""
    mean = np.asarray(IMAGENET_MEAN, dtype=np.float32)[:, None, None]
    std = np.asarray(IMAGENET_STD, dtype=np.float32)[:, None, None]
    return ((image - mean) / std).astype(np.float32)


def denormalize(pixels: np.ndarray) -> np.ndarray:
    mean = np.asarray(IMAGENET_MEAN, dtype=np.float32)[:, None, None]
    std = np.asarray(IMAGENET_STD, dtype=np.float32)[:, None, None]
    return (pixels * std + mean).astype(np.float32)


def load_image(path: str | Path, image_size: int = 256) -> np.ndarray:
    im = _open(path, "RGB")
    if im.size != (image_size, image_size):
        im = im.resize((image_size, image_size), Image.BILINEAR)
    arr = np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0
    return normalize(arr)


def load_mask(path: str | Path, image_size: int = 256) -> np.ndarray:
    im = _open(path, "L")
    if im.size != (image_size, image_size):
        im = im.resize((image_size, image_size), Image.NEAREST)
    return (np.asarray(im, dtype=np.float32) / 255.0 >= 0.5).astype(np.uint8)


def load_record(entry: Entry, category: str, image_size: int = 256) -> ImageRecord:
    gt = load_mask(entry.mask_path, image_size) if entry.mask_path is not None else None
    if gt is None and entry.split == "test":
        gt = np.zeros((image_size, image_size), dtype=np.uint8)
    return ImageRecord(load_image(entry.image_path, image_size), entry.label, gt, category, entry.image_path)


def load_records(index: DatasetIndex, split: Split, image_size: int = 256) -> list[ImageRecord]:
    return [load_record(e, index.category, image_size) for e in index.split(split)]
