from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest
import torch
from PIL import Image

from mrkd.data import ImageRecord, normalize

torch.set_num_threads(1)

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def save_png(path: Path, array: np.ndarray) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path)
    return path


def rgb_noise(rng: np.random.Generator, size: int = 32) -> np.ndarray:
    return rng.integers(0, 256, (size, size, 3), dtype=np.uint8)


@pytest.fixture
def mvtec_tree(tmp_path: Path) -> Path:
    """2 train-good images, 1 test-good image, 1 test-defect image with mask."""
    rng = np.random.default_rng(0)
    base = tmp_path / "mvtec" / "bottle"
    for name in ("000.png", "001.png"):
        save_png(base / "train" / "good" / name, rgb_noise(rng))
    save_png(base / "test" / "good" / "000.png", rgb_noise(rng))
    save_png(base / "test" / "broken" / "000.png", rgb_noise(rng))
    mask = np.zeros((32, 32), np.uint8)
    mask[8:16, 8:16] = 255
    save_png(base / "ground_truth" / "broken" / "000_mask.png", mask)
    return tmp_path / "mvtec"


def make_record(rng: np.random.Generator, size: int = 32, label: str = "normal") -> ImageRecord:
    img = rng.random((3, size, size)).astype(np.float32)
    return ImageRecord(normalize(img), label, None, "toy_texture", None)


# toy end-to-end setting shared by the CLI and acceptance tests
TOY_CATEGORY = "toy_texture"
TOY_FLAGS = [
    "--layout", "mvtec", "--category", TOY_CATEGORY, "--seed", "0",
    "--backbone", "resnet18", "--teacher-weights", "random", "--image-size", "128",
    "--epochs", "10", "--batch-size", "4",
]


@pytest.fixture(scope="session")
def toy_root(tmp_path_factory) -> Path:
    from mrkd.toy import make_toy_dataset

    return make_toy_dataset(tmp_path_factory.mktemp("toy"), TOY_CATEGORY, n_train=50,
                            n_test_normal=15, n_test_abnormal=15, size=128, seed=0)


def run_toy(toy_root: Path, out: Path) -> dict:
    """CLI train + eval (with score dump and maps) on the toy set."""
    import time

    from mrkd.cli import main

    flags = ["--data-root", str(toy_root), "--out", str(out), *TOY_FLAGS]
    start = time.perf_counter()
    assert main(["train", *flags]) == 0
    train_seconds = time.perf_counter() - start
    assert main(["eval", *flags, "--dump-scores", "--save-maps"]) == 0
    return {"out": out, "flags": flags, "train_seconds": train_seconds}


@pytest.fixture(scope="session")
def toy_run(toy_root, tmp_path_factory) -> dict:
    return run_toy(toy_root, tmp_path_factory.mktemp("toy_run_a"))


@pytest.fixture(scope="session")
def toy_baseline(toy_root, toy_run, tmp_path_factory) -> Path:
    """Report dir of the untrained checkpoint evaluated like the trained one."""
    from mrkd.cli import build_parser, main, resolve_config
    from mrkd.training import initial_checkpoint

    out = tmp_path_factory.mktemp("toy_baseline")
    cfg = resolve_config(build_parser().parse_args(["train", *toy_run["flags"]]))
    ckpt_path = out / "untrained.ckpt"
    initial_checkpoint(cfg.train_config(), TOY_CATEGORY).save(ckpt_path)
    assert main(["eval", *toy_run["flags"], "--checkpoint", str(ckpt_path), "--report-dir", str(out),
                 "--dump-scores"]) == 0
    return out
