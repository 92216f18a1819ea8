import csv
import json
import math

import pytest

from corradaptor.cli import main, split_counts
from corradaptor.data import load_pairs

REPORT_KEYS = {"precision", "recall", "fscore", "auc5", "auc10", "auc20"}
SMALL_MODEL = ["--d", "8", "--heads", "2", "--clusters", "6", "--l-m", "1"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    assert main(["gen", "--out", str(root), "--pairs", "10", "--n", "64", "--seed", "7"]) == 0
    return root


def test_gen_counts_and_manifest(tmp_path):
    out = tmp_path / "d"
    assert main(["gen", "--out", str(out), "--pairs", "200", "--n", "500", "--outliers", "0.5", "--seed", "7"]) == 0
    files = sorted(out.glob("*/*.corr"))
    assert len(files) == 200
    manifest = json.loads((out / "manifest.json").read_text())
    assert [manifest["splits"][s]["count"] for s in ("train", "val", "test")] == [160, 20, 20]
    assert manifest["params"] == {"n": 500, "outlier_ratio": 0.5, "noise_sigma": 1e-3}
    n_corr = 200 * 500
    sigma = math.sqrt(0.25 / n_corr)
    total = sum(manifest["splits"][s]["outlier_fraction"] * manifest["splits"][s]["count"] * 500
                for s in manifest["splits"]) / n_corr
    assert abs(total - 0.5) <= 3 * sigma
    # rerun: identical manifest hash
    again = tmp_path / "e"
    main(["gen", "--out", str(again), "--pairs", "200", "--n", "500", "--outliers", "0.5", "--seed", "7"])
    assert (out / "manifest.sha256").read_text() == (again / "manifest.sha256").read_text()


def test_split_counts():
    assert split_counts(10, [0.8, 0.1, 0.1]) == [8, 1, 1]
    with pytest.raises(Exception):
        split_counts(10, [0.5, 0.1, 0.1])


def test_train_and_eval(dataset, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--data", str(dataset), "--out", str(run), "--steps", "200", "--batch", "2",
                 *SMALL_MODEL, "--ransac-iters", "50"]) == 0
    log = [json.loads(line) for line in (run / "train.jsonl").read_text().splitlines()]
    losses = [r["loss_total"] for r in log if "step" in r]
    assert len(losses) == 200 and losses[-1] < losses[0]
    assert (run / "model.ckpt").read_bytes()[:8] == b"CADPCKPT"

    ev = tmp_path / "eval"
    assert main(["eval", "--data", str(dataset), "--checkpoint", str(run / "model.ckpt"), "--out", str(ev),
                 "--baseline", "ransac", "--ransac-iters", "50"]) == 0
    assert set(json.loads((ev / "report.json").read_text())) == REPORT_KEYS
    assert set(json.loads((ev / "report_ransac.json").read_text())) == REPORT_KEYS
    with open(ev / "comparison.csv") as fh:
        assert [r["method"] for r in csv.DictReader(fh)] == ["model", "ransac"]
    with open(ev / "error_cdf_model.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == len(load_pairs(dataset / "test")) and float(rows[-1]["cdf"]) == 1.0


def test_eval_oracle(dataset, tmp_path):
    assert main(["eval", "--data", str(dataset), "--oracle", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert report["precision"] == report["recall"] == report["fscore"] == 1.0


@pytest.mark.parametrize("flags", [["--ablate", "explicit-only"], ["--ablate", "implicit-only"],
                                   ["--ablate", "motion-off"], ["--attention", "plain"]])
def test_train_variants(dataset, tmp_path, flags):
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path), "--steps", "2", "--batch", "2",
                 *SMALL_MODEL, *flags]) == 0
    cfg = json.loads((tmp_path / "config.json").read_text())["model"]
    if flags[0] == "--attention":
        assert cfg["attention"] == "dense"
    else:
        assert {"explicit-only": cfg["branches"] == "explicit", "implicit-only": cfg["branches"] == "implicit",
                "motion-off": cfg["motion"] is False}[flags[1]]


def test_config_file_and_override(dataset, tmp_path):
    conf = tmp_path / "run.toml"
    conf.write_text('steps = 3\nbatch = 2\nd = 8\nheads = 2\nclusters = 6\nl_m = 1\nk-per-block = [9, 6]\n')
    out = tmp_path / "run"
    assert main(["train", "--config", str(conf), "--data", str(dataset), "--out", str(out), "--steps", "2"]) == 0
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["train"]["steps"] == 2 and cfg["train"]["batch"] == 2 and cfg["model"]["d"] == 8


def test_config_unknown_key(dataset, tmp_path, capsys):
    conf = tmp_path / "bad.toml"
    conf.write_text("steps = 3\nlearning_rate = 0.1\n")
    assert main(["train", "--config", str(conf), "--data", str(dataset), "--out", str(tmp_path)]) != 0
    assert "unknown config key" in capsys.readouterr().err


def test_missing_checkpoint(dataset, tmp_path):
    assert main(["eval", "--data", str(dataset), "--checkpoint", str(tmp_path / "nope.ckpt"),
                 "--out", str(tmp_path)]) != 0


def test_missing_dataset(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path)]) != 0


def test_bench_schema(tmp_path):
    out = tmp_path / "bench.csv"
    assert main(["bench-attn", "--out", str(out), "--sizes", "64", "128", "--d", "16", "--runs", "5"]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0]) == ["kind", "N", "d", "median_ms", "p90_ms"]
    assert {(r["kind"], r["N"]) for r in rows} == {(k, n) for k in ("flow", "dense") for n in ("64", "128")}
