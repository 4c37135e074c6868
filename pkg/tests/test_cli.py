import csv
import json
import subprocess
import sys

import numpy as np
import pytest
from PIL import Image

from conftest import TOY_CATEGORY
from mrkd import metrics
from mrkd.cli import main
from mrkd.plotting import density_overlap
from mrkd.scoring import ScoreMap, read_raw
from mrkd.toy import make_toy_dataset

SMALL = ["--layout", "mvtec", "--category", TOY_CATEGORY, "--seed", "0", "--backbone", "resnet18",
         "--teacher-weights", "random", "--image-size", "32", "--epochs", "1", "--batch-size", "2"]


@pytest.fixture(scope="module")
def small_root(tmp_path_factory):
    return make_toy_dataset(tmp_path_factory.mktemp("small"), TOY_CATEGORY, n_train=4,
                            n_test_normal=2, n_test_abnormal=2, size=32, seed=1)


@pytest.fixture(scope="module")
def small_run(small_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("small_run")
    flags = ["--data-root", str(small_root), "--out", str(out), *SMALL]
    assert main(["train", *flags]) == 0
    return out, flags


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_train_writes_checkpoint_and_loss(small_run):
    out, _ = small_run
    cat = out / TOY_CATEGORY
    assert (cat / "model.ckpt").is_file()
    rows = _rows(cat / "loss.csv")
    assert rows[0] == ["epoch", "mean_loss"] and len(rows) == 2 and rows[1][0] == "1"
    assert (cat / "config.yaml").is_file() and (cat / "loss.png").is_file()


def test_train_repeat_gives_identical_loss_csv(small_root, small_run, tmp_path):
    out, _ = small_run
    assert main(["train", "--data-root", str(small_root), "--out", str(tmp_path), *SMALL]) == 0
    loss = f"{TOY_CATEGORY}/loss.csv"
    assert (tmp_path / loss).read_bytes() == (out / loss).read_bytes()


def test_zero_epochs_is_config_error(small_root, tmp_path, capsys):
    code = main(["train", "--data-root", str(small_root), "--out", str(tmp_path), *SMALL, "--epochs", "0"])
    assert code == 2 and "epochs" in capsys.readouterr().err


def test_unknown_key_is_config_error(small_root, tmp_path, capsys):
    code = main(["train", "--data-root", str(small_root), "--out", str(tmp_path), *SMALL, "--set", "lamda=0.1"])
    assert code == 2 and "lamda" in capsys.readouterr().err


def test_missing_dataset_is_data_error(tmp_path):
    assert main(["train", "--data-root", str(tmp_path / "none"), "--out", str(tmp_path), *SMALL]) == 3


def test_missing_checkpoint_exit_code(small_root, tmp_path):
    assert main(["eval", "--data-root", str(small_root), "--out", str(tmp_path), *SMALL]) == 4


def test_eval_report_format(small_run):
    out, flags = small_run
    assert main(["eval", *flags, "--dump-scores"]) == 0
    rows = _rows(out / "report.csv")
    assert rows[0] == ["category", "auroc_il", "auroc_pl", "aupro"]
    assert [r[0] for r in rows[1:]] == [TOY_CATEGORY, "average"]
    assert rows[1][1:] == rows[2][1:]
    report = json.loads((out / "report.json").read_text())
    assert report["metadata"]["fpr_limit"] == 0.3
    assert f"{TOY_CATEGORY}.checkpoint_sha256" in report["metadata"]
    scores = _rows(out / "scores.csv")
    assert scores[0] == ["category", "image", "label", "score"] and len(scores) == 5


def test_eval_layer_subsets_differ(small_run, tmp_path):
    _, flags = small_run
    reports = {}
    for layers in ("2", "1,2,3"):
        d = tmp_path / layers.replace(",", "-")
        assert main(["eval", *flags, "--layers", layers, "--report-dir", str(d), "--save-maps"]) == 0
        reports[layers] = _rows(d / "report.csv")[1]
        maps = sorted((d / TOY_CATEGORY / "maps").glob("*.raw"))
        assert read_raw(maps[0]).layers == tuple(int(v) for v in layers.split(","))
    m2 = read_raw(sorted((tmp_path / "2" / TOY_CATEGORY / "maps").glob("*.raw"))[0]).values
    m123 = read_raw(sorted((tmp_path / "1-2-3" / TOY_CATEGORY / "maps").glob("*.raw"))[0]).values
    assert not np.array_equal(m2, m123)
    assert reports["2"] != reports["1,2,3"]


def test_eval_perfect_maps_give_unit_aupro(small_run, tmp_path, monkeypatch):
    _, flags = small_run

    def oracle(record, *args, **kwargs):
        v = record.gt_mask.astype(np.float32)
        return ScoreMap(v, float(v.max()))

    monkeypatch.setattr(metrics, "score_image", oracle)
    assert main(["eval", *flags, "--fpr-limit", "1.0", "--report-dir", str(tmp_path)]) == 0
    row = _rows(tmp_path / "report.csv")[1]
    assert [float(v) for v in row[1:]] == pytest.approx([1.0, 1.0, 1.0], abs=1e-12)


def _first_test_image(root, kind):
    return sorted((root / TOY_CATEGORY / "test" / kind).glob("*.png"))[0]


def test_predict_contract(small_root, small_run, tmp_path, capsys):
    _, flags = small_run
    image = _first_test_image(small_root, "good")
    paths = [tmp_path / "a.png", tmp_path / "b.png"]
    scores = []
    for p in paths:
        assert main(["predict", *flags, "--image", str(image), "--heatmap", str(p)]) == 0
        scores.append(float(capsys.readouterr().out.strip()))
    assert Image.open(paths[0]).size == (32, 32)
    assert scores[0] >= 0 and scores[0] == scores[1]
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_predict_default_path_and_extras(small_root, small_run, tmp_path):
    out, flags = small_run
    image = _first_test_image(small_root, "good")
    assert main(["predict", *flags, "--image", str(image), "--raw", str(tmp_path / "m.raw"),
                 "--panel", str(tmp_path / "panel.png")]) == 0
    assert (out / f"{image.stem}_heatmap.png").is_file()
    assert read_raw(tmp_path / "m.raw").values.shape == (32, 32)
    assert (tmp_path / "panel.png").is_file()


def test_predict_undecodable_image(small_run, tmp_path):
    _, flags = small_run
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"garbage")
    assert main(["predict", *flags, "--image", str(bad), "--heatmap", str(tmp_path / "h.png")]) == 3


def test_predict_argmax_inside_defect(toy_root, toy_run, tmp_path):
    image = _first_test_image(toy_root, "blotch")
    mask = np.asarray(Image.open(toy_root / TOY_CATEGORY / "ground_truth" / "blotch" / f"{image.stem}_mask.png")) > 127
    raw = tmp_path / "m.raw"
    assert main(["predict", *toy_run["flags"], "--image", str(image), "--heatmap", str(tmp_path / "h.png"),
                 "--raw", str(raw)]) == 0
    values = read_raw(raw).values
    y, x = np.unravel_index(np.argmax(values), values.shape)
    assert mask[y, x]


def _write_dump(path, normal, abnormal):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("category", "image", "label", "score"))
        for i, s in enumerate(normal):
            w.writerow(("c", f"n{i}", 0, s))
        for i, s in enumerate(abnormal):
            w.writerow(("c", f"a{i}", 1, s))


def test_plot_dist_separated(tmp_path):
    rng = np.random.default_rng(0)
    normal, abnormal = 0.1 + 0.01 * rng.random(20), 0.9 + 0.01 * rng.random(20)
    _write_dump(tmp_path / "scores.csv", normal, abnormal)
    assert main(["plot-dist", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "figures" / "dist_c.png").is_file()
    assert density_overlap(normal, abnormal) < 1e-3


@pytest.mark.parametrize("normal,abnormal", [([0.5] * 5, [0.5] * 5), ([0.2, 0.4], [])])
def test_plot_dist_degenerate(tmp_path, normal, abnormal):
    _write_dump(tmp_path / "s.csv", normal, abnormal)
    assert main(["plot-dist", "--out", str(tmp_path), "--scores", str(tmp_path / "s.csv")]) == 0
    assert (tmp_path / "figures" / "dist_c.png").is_file()


def test_plot_dist_missing_dump(tmp_path):
    assert main(["plot-dist", "--out", str(tmp_path)]) == 3


def _dump_groups(path):
    normal, abnormal = [], []
    for row in csv.DictReader(open(path)):
        (abnormal if row["label"] == "1" else normal).append(float(row["score"]))
    return normal, abnormal


def test_trained_densities_overlap_less_than_untrained(toy_run, toy_baseline):
    trained = density_overlap(*_dump_groups(toy_run["out"] / "scores.csv"))
    untrained = density_overlap(*_dump_groups(toy_baseline / "scores.csv"))
    assert trained < untrained


def test_sweep_lambda_rows(small_root, tmp_path):
    args = ["sweep", "--data-root", str(small_root), "--out", str(tmp_path), *SMALL]
    assert main([*args, "--axis", "lambda", "--values", "0,0.2,0.8"]) == 0
    rows = _rows(tmp_path / "sweep_lambda.csv")
    assert rows[0] == ["axis", "value", "category", "auroc_il", "auroc_pl", "aupro"]
    assert [r[1] for r in rows[1:]] == ["0", "0.2", "0.8"]


def test_sweep_layers_rows_and_additivity(small_root, tmp_path):
    args = ["sweep", "--data-root", str(small_root), "--out", str(tmp_path), *SMALL]
    assert main([*args, "--axis", "layers", "--values", "1;2;3;1,2,3"]) == 0
    rows = _rows(tmp_path / "sweep_layers.csv")
    assert [r[1] for r in rows[1:]] == ["1", "2", "3", "1,2,3"]
    names = sorted(p.name for p in (tmp_path / "layers=1-2-3" / TOY_CATEGORY / "maps").glob("*.raw"))
    assert names
    for name in names:
        parts = [read_raw(tmp_path / f"layers={l}" / TOY_CATEGORY / "maps" / name).values for l in "123"]
        fused = read_raw(tmp_path / "layers=1-2-3" / TOY_CATEGORY / "maps" / name).values
        np.testing.assert_allclose(fused, parts[0] + parts[1] + parts[2], atol=1e-6)


@pytest.mark.parametrize("axis", ["alpha,lambda", "epochs"])
def test_sweep_rejects_other_axes(small_root, tmp_path, axis):
    args = ["sweep", "--data-root", str(small_root), "--out", str(tmp_path), *SMALL]
    assert main([*args, "--axis", axis, "--values", "0,1"]) == 2


def test_sweep_alpha_direction_is_recorded(small_root, tmp_path, record_property):
    args = ["sweep", "--data-root", str(small_root), "--out", str(tmp_path), *SMALL]
    assert main([*args, "--axis", "alpha", "--values", "0,1"]) == 0
    rows = _rows(tmp_path / "sweep_alpha.csv")[1:]
    by_alpha = {r[1]: float(r[5]) for r in rows}
    assert set(by_alpha) == {"0", "1"}
    # directional expectation only; a one-epoch toy run is too small to gate on it
    record_property("aupro_alpha0", by_alpha["0"])
    record_property("aupro_alpha1", by_alpha["1"])


def test_make_toy_and_console_script(tmp_path):
    assert main(["make-toy", "--root", str(tmp_path), "--size", "32", "--n-train", "2", "--n-test", "1"]) == 0
    assert len(list((tmp_path / TOY_CATEGORY / "train" / "good").glob("*.png"))) == 2
    proc = subprocess.run([sys.executable, "-m", "mrkd.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "predict" in proc.stdout
