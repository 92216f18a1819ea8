import json

import numpy as np
import pytest
import torch

from corradaptor.data import synth_dataset, synth_scene
from corradaptor.model import CorrAdaptorConfig
from corradaptor.numerics import NonFiniteError
from corradaptor.training import (
    TrainConfig,
    evaluate,
    evaluate_ransac,
    load_model,
    oracle_report,
    reg_weight,
    train,
)

TINY = CorrAdaptorConfig(d=8, heads=2, clusters=6, L_m=1)


def test_defaults_follow_paper():
    tcfg = TrainConfig()
    assert tcfg.lr == 1e-3 and tcfg.weight_decay == 0.0


def test_warmup_schedule():
    cfg = CorrAdaptorConfig(lam=0.5, warmup_frac=0.1)
    assert reg_weight(cfg, 0, 100) == 0.0 and reg_weight(cfg, 9, 100) == 0.0
    assert reg_weight(cfg, 10, 100) == 0.5


def test_overfit_single_pair():
    pair = synth_scene(64, 0.5, 1e-3, seed=21)
    _, hist = train([pair], TINY, TrainConfig(steps=500, batch=1, seed=0))
    losses = [h["loss_total"] for h in hist]
    assert losses[-1] < 0.1 * losses[0]


def test_bit_identical_checkpoints(tmp_path):
    pairs = synth_dataset(4, 64, 0.5, 1e-3, 3)
    tcfg = TrainConfig(steps=15, batch=2, seed=7)
    train(pairs, TINY, tcfg, log_path=tmp_path / "a.jsonl", checkpoint_path=tmp_path / "a.ckpt")
    train(pairs, TINY, tcfg, log_path=tmp_path / "b.jsonl", checkpoint_path=tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert (tmp_path / "a.jsonl").read_text() == (tmp_path / "b.jsonl").read_text()


def test_log_records_and_checkpoint_reload(tmp_path):
    pairs = synth_dataset(4, 64, 0.5, 1e-3, 3)
    val = synth_dataset(2, 64, 0.5, 1e-3, 4)
    model, _ = train(pairs, TINY, TrainConfig(steps=4, batch=2, val_every=1, ransac_iters=50),
                     val_pairs=val, log_path=tmp_path / "log.jsonl", checkpoint_path=tmp_path / "m.ckpt")
    records = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    steps = [r for r in records if "step" in r]
    vals = [r for r in records if "epoch" in r]
    assert [r["step"] for r in steps] == [0, 1, 2, 3]
    assert set(steps[0]) == {"step", "loss_cls", "loss_reg", "loss_total"}
    assert [r["epoch"] for r in vals] == [1, 2]
    reloaded = load_model(TINY, tmp_path / "m.ckpt")
    for (k, a), (_, b) in zip(model.state_dict().items(), reloaded.state_dict().items()):
        assert torch.equal(a.to(b.dtype), b), k


def test_rejects_unlabeled_pairs():
    pair = synth_scene(64, seed=0)
    pair.pose = None
    with pytest.raises(ValueError):
        train([pair], TINY, TrainConfig(steps=1))


def test_non_finite_input_raises():
    pair = synth_scene(64, seed=0)
    pair.correspondences = pair.correspondences.copy()
    pair.correspondences[0, 0] = np.nan
    with pytest.raises(NonFiniteError):
        train([pair], TINY, TrainConfig(steps=1))


def test_oracle_report_is_perfect():
    pairs = synth_dataset(3, 100, 0.5, 1e-3, 5)
    s = oracle_report(pairs).summary()
    assert s["precision"] == s["recall"] == s["fscore"] == 1.0


def test_ransac_baseline_noise_free():
    pairs = synth_dataset(5, 200, 0.5, 0.0, 6)
    assert evaluate_ransac(pairs, 500).recall >= 0.99


def test_evaluate_report_schema():
    torch.manual_seed(0)
    from corradaptor.model import CorrAdaptor

    pairs = synth_dataset(2, 64, 0.5, 1e-3, 8)
    report = evaluate(CorrAdaptor(TINY), pairs, ransac_iters=20)
    assert set(report.summary()) == {"precision", "recall", "fscore", "auc5", "auc10", "auc20"}
    assert len(report.rows) == 2 and all("pose_error" in r for r in report.rows)
