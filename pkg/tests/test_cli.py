import json

import numpy as np
import pytest

from pestnet.cli import main
from pestnet.imageio import write_ppm

QUICK = ["--width", "0.25", "--input", "32", "--batch-size", "4"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--classes", "3", "--per-class", "5", "--size", "40", "--out", str(out)]) == 0
    assert (out / "manifest.tsv").exists()
    return out / "data"


def test_describe_prints_every_row(capsys, tmp_path):
    code, out, _ = run(capsys, "describe")
    lines = out.strip().splitlines()
    assert code == 0 and len(lines) == 22
    assert lines[20].split("\t")[:4] == ["20", "avgpool", "7x7x1280", "1x1x1280"]
    code, _, _ = run(capsys, "describe", "--out", tmp_path / "d")
    assert code == 0 and (tmp_path / "d" / "settings.txt").exists()


def test_malformed_config_reports_line(capsys, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("# comment\nname = x\nrow 1 conv3x3 thirty-two 2\n")
    code, _, err = run(capsys, "describe", "--config", cfg)
    assert code == 1 and "bad.cfg:3:" in err


def test_count_defaults_and_head_size(capsys):
    code, out, _ = run(capsys, "count")
    assert code == 0 and out.splitlines()[1].split("\t") == ["2557610", "0.3819", "profiler"]
    _, base, _ = run(capsys, "count", "--no-attention")
    assert base.splitlines()[1].split("\t")[:2] == ["2236682", "0.3190"]
    _, k100, _ = run(capsys, "count", "--classes", "100")
    assert int(k100.splitlines()[1].split("\t")[0]) - 2557610 == 90 * 1281
    _, per_layer, _ = run(capsys, "count", "--per-layer", "--convention", "mac")
    assert per_layer.splitlines()[0] == "index\tkind\tparams\tgmac" and len(per_layer.splitlines()) == 24


@pytest.mark.parametrize("argv", [["count", "--bogus"], ["train"], ["describe", "--input", "abc"],
                                  ["count", "--attention", "3,8"], ["train", "--dataset", "/no/such/dir"]])
def test_usage_and_validation_errors_exit_1(capsys, argv):
    assert run(capsys, *argv)[0] == 1


def test_train_folds_writes_reports(capsys, dataset, tmp_path):
    out = tmp_path / "cv"
    code, stdout, _ = run(capsys, "train", "--dataset", dataset, *QUICK, "--epochs", "1", "--folds", "5",
                          "--only-fold", "1", "--out", out)
    assert code == 0
    assert stdout.splitlines()[0] == "fold\taccuracy\tmacro_f1\tfinal_loss"
    for name in ("settings.txt", "summary.json", "classes.txt", "confusion_fold1.csv", "confusion_fold1.png",
                 "losses.png", "fold1.a2lw"):
        assert (out / name).exists(), name
    summary = json.loads((out / "summary.json").read_text())
    assert summary["folds"] == 1
    assert "seed" in (out / "settings.txt").read_text()


def test_fit_all_then_eval_and_predict(capsys, dataset, tmp_path):
    out = tmp_path / "fit"
    assert run(capsys, "train", "--dataset", dataset, *QUICK, "--epochs", "2", "--fit-all", "--out", out)[0] == 0
    weights = out / "model.a2lw"
    assert weights.exists() and (out / "confusion_train.png").exists()
    code, stdout, _ = run(capsys, "eval", "--dataset", dataset, "--width", "0.25", "--input", "32",
                          "--weights", weights, "--out", tmp_path / "ev")
    assert code == 0
    metrics = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert np.array(metrics["confusion"]).sum() == 15
    images = sorted(dataset.rglob("*.ppm"))[:2]
    code, stdout, _ = run(capsys, "predict", *images, "--width", "0.25", "--classes", "3", "--input", "32",
                          "--weights", weights, "--labels", out / "classes.txt", "--out", tmp_path / "pr")
    assert code == 0
    rows = (tmp_path / "pr" / "predictions.tsv").read_text().splitlines()
    assert len(rows) == 3 and rows[1].split("\t")[1] in (out / "classes.txt").read_text().split()
    probs = np.loadtxt(tmp_path / "pr" / "probabilities.csv", delimiter=",")
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-5)


def test_weights_for_a_different_head_are_rejected(capsys, dataset, tmp_path):
    out = tmp_path / "fit"
    run(capsys, "train", "--dataset", dataset, *QUICK, "--epochs", "1", "--fit-all", "--out", out)
    code, _, _ = run(capsys, "eval", "--dataset", dataset, "--width", "0.25", "--classes", "4",
                     "--weights", out / "model.a2lw", "--out", tmp_path / "ev")
    assert code == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_training_exits_2(capsys, dataset, tmp_path):
    code, _, err = run(capsys, "train", "--dataset", dataset, *QUICK, "--epochs", "3", "--fit-all",
                       "--lr", "1e200", "--out", tmp_path / "boom")
    assert code == 2 and "non-finite" in err


def test_activations_export(capsys, tmp_path):
    image = tmp_path / "img.ppm"
    write_ppm(image, np.random.default_rng(0).random((60, 80, 3)))
    out = tmp_path / "act"
    code, stdout, _ = run(capsys, "activations", "--image", image, "--width", "0.25", "--out", out)
    assert code == 0
    for layer in (10, 11, 13, 14, 19):
        assert (out / f"layer{layer:02d}.pgm").exists() and (out / f"layer{layer:02d}.csv").exists()
    assert (out / "activations.png").exists()
    assert stdout.splitlines()[-1].split("\t")[:3] == ["19", "7", "7"]
    assert run(capsys, "activations", "--layers", "20", "--width", "0.25", "--out", tmp_path / "x")[0] == 1


def test_ablate_grid_output(capsys, tmp_path):
    code, stdout, _ = run(capsys, "ablate", "--ratios", "8", "--locations", "11,14", "--out", tmp_path / "ab")
    assert code == 0
    lines = stdout.strip().splitlines()
    assert lines[0].split("\t")[:5] == ["l1", "l2", "r", "params", "gmacs"]
    assert lines[1].split("\t")[:5] == ["11", "14", "8", "3745808", "0.3675"]
    assert lines[2].startswith("11*\t14*\t1\t")
    assert (tmp_path / "ab" / "ablation.png").exists()


def test_gradcheck_quick(capsys, tmp_path):
    code, stdout, _ = run(capsys, "gradcheck", "--seeds", "1", "--blocks", "relu6,linear", "--out", tmp_path / "g")
    assert code == 0 and stdout.count("\tok") == 2
    assert run(capsys, "gradcheck", "--blocks", "nope", "--out", tmp_path / "h")[0] == 1
