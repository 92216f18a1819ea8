import logging

import numpy as np
import pytest

from corradaptor.data import (
    ScenePair,
    dumps_pair,
    inlier_labels,
    load_pairs,
    loads_pair,
    save_pairs,
    synth_dataset,
    synth_scene,
)
from corradaptor.geometry import compose_essential, symmetric_epipolar_distance
from corradaptor.metrics import aggregate, pose_auc, prf_metrics


class TestSynth:
    def test_clean_scene(self):
        scene = synth_scene(200, 0.0, 0.0, seed=1)
        assert scene.labels.all()
        assert symmetric_epipolar_distance(scene.E_gt, scene.correspondences).max() < 1e-12

    def test_same_seed_bit_identical(self):
        a, b = synth_scene(300, 0.5, 1e-3, seed=5), synth_scene(300, 0.5, 1e-3, seed=5)
        assert a.correspondences.tobytes() == b.correspondences.tobytes()
        assert np.array_equal(a.labels, b.labels)
        assert a.pose.rotation.tobytes() == b.pose.rotation.tobytes()

    def test_different_seeds_differ(self):
        assert not np.array_equal(synth_scene(50, seed=1).correspondences, synth_scene(50, seed=2).correspondences)

    def test_constructed_inliers_satisfy_constraint(self):
        scene = synth_scene(200, 0.5, 0.0, seed=2)
        C = scene.correspondences[scene.constructed]
        p = np.column_stack([C[:, :2], np.ones(len(C))])
        q = np.column_stack([C[:, 2:], np.ones(len(C))])
        assert np.abs(np.einsum("ni,ij,nj->n", q, scene.E_gt, p)).max() < 1e-10

    def test_outlier_count(self):
        scene = synth_scene(500, 0.5, 1e-3, seed=3)
        assert (~scene.constructed).sum() == 250

    def test_label_fraction_within_binomial_bounds(self):
        # outliers occasionally fall within tau of their epipolar line; the inlier rate stays near 1/2
        fracs = [synth_scene(500, 0.5, 1e-3, seed=s).labels.mean() for s in range(100)]
        mean = float(np.mean(fracs))
        sigma = np.sqrt(0.25 / (500 * 100))
        assert abs(mean - 0.5) < 0.02 + 3 * sigma

    def test_small_n_rejected(self):
        with pytest.raises(ValueError):
            synth_scene(10)

    def test_dataset_names_and_determinism(self):
        a = synth_dataset(3, 40, 0.5, 1e-3, 9)
        b = synth_dataset(3, 40, 0.5, 1e-3, 9)
        assert [p.name for p in a] == ["pair_00000", "pair_00001", "pair_00002"]
        assert [dumps_pair(p) for p in a] == [dumps_pair(p) for p in b]


class TestFormat:
    def test_round_trip_exact(self, tmp_path):
        pairs = synth_dataset(4, 30, 0.5, 1e-3, 0)
        save_pairs(pairs, tmp_path)
        back = load_pairs(tmp_path)
        for a, b in zip(pairs, back):
            assert a.correspondences.tobytes() == b.correspondences.tobytes()
            assert np.array_equal(a.labels, b.labels)
            assert a.pose.rotation.tobytes() == b.pose.rotation.tobytes()
            assert a.pose.translation.tobytes() == b.pose.translation.tobytes()
            assert dumps_pair(b) == dumps_pair(a)

    def test_fuzz_four_columns(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(1, 40))
            scale = 10.0 ** rng.integers(-300, 300, size=(n, 4))
            C = rng.normal(size=(n, 4)) * scale
            text = dumps_pair(ScenePair(C))
            assert dumps_pair(loads_pair(text)) == text
            assert loads_pair(text).correspondences.tobytes() == C.tobytes()

    def test_header(self):
        text = dumps_pair(synth_scene(16, seed=0))
        assert text.splitlines()[0] == "corrpairs v1 n=16 gt=1"
        assert len(text.splitlines()) == 1 + 4 + 16

    def test_no_gt_marks_pose_unavailable(self, caplog):
        text = "corrpairs v1 n=2 gt=0\n0 0 0 0\n1 1 1 1\n"
        with caplog.at_level(logging.WARNING):
            pair = loads_pair(text, "x")
        assert not pair.has_gt and pair.E_gt is None and pair.labels is None
        assert "no ground-truth" in caplog.text

    @pytest.mark.parametrize("text", [
        "",
        "corrpairs v2 n=1 gt=0\n0 0 0 0\n",
        "corrpairs v1 n=2 gt=0\n0 0 0 0\n",
        "corrpairs v1 n=1 gt=0\n0 0 0\n",
        "corrpairs v1 n=2 gt=0\n0 0 0 0 1\n0 0 0 0\n",
        "corrpairs v1 n=1 gt=0\n0 0 0 0 2\n",
        "corrpairs v1 n=1 gt=1\n1 0 0\n0 1 0\n",
    ])
    def test_malformed(self, text):
        with pytest.raises(ValueError):
            loads_pair(text)


class TestPRF:
    def test_perfect(self):
        m = np.array([1, 0, 1, 1], bool)
        assert prf_metrics(m, m) == (1.0, 1.0, 1.0)

    def test_no_predictions(self):
        assert prf_metrics(np.zeros(4, bool), np.array([1, 0, 1, 0], bool)) == (0.0, 0.0, 0.0)

    def test_counting_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            pred, gt = rng.random(30) < 0.5, rng.random(30) < 0.5
            tp = sum(1 for a, b in zip(pred, gt) if a and b)
            p = tp / pred.sum() if pred.sum() else 0.0
            r = tp / gt.sum() if gt.sum() else 0.0
            f = 2 * p * r / (p + r) if p + r else 0.0
            assert prf_metrics(pred, gt) == (p, r, f)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            prf_metrics(np.zeros(3, bool), np.zeros(4, bool))


class TestAUC:
    def test_all_zero(self):
        assert pose_auc([0.0, 0.0, 0.0]) == {5.0: 1.0, 10.0: 1.0, 20.0: 1.0}

    def test_all_failed(self):
        assert pose_auc([180.0] * 4) == {5.0: 0.0, 10.0: 0.0, 20.0: 0.0}

    def test_fine_grid_oracle(self):
        errors = [1.0, 3.0, 7.0]
        step = 1e-3
        mids = np.arange(0, 5, step) + step / 2
        cdf = np.array([sum(e <= x for e in errors) / 3 for x in mids])
        oracle = float(cdf.sum() * step / 5)
        assert abs(pose_auc(errors, [5.0])[5.0] - oracle) < 1e-6
        assert pose_auc(errors, [5.0])[5.0] == pytest.approx(0.4, abs=1e-12)

    def test_single_error_closed_form(self):
        assert pose_auc([2.0], [10.0])[10.0] == pytest.approx(0.8)

    def test_invalid(self):
        with pytest.raises(ValueError):
            pose_auc([])
        with pytest.raises(ValueError):
            pose_auc([float("nan")])


def test_aggregate_means_and_auc():
    rows = [{"precision": 1.0, "recall": 0.5, "fscore": 2 / 3, "pose_error": 1.0},
            {"precision": 0.5, "recall": 1.0, "fscore": 2 / 3, "pose_error": 3.0},
            {"precision": 0.0, "recall": 0.0, "fscore": 0.0}]
    report = aggregate(rows)
    assert report.precision == 0.5 and report.recall == 0.5
    assert report.pose_auc[5.0] == pytest.approx(pose_auc([1.0, 3.0])[5.0])
    assert set(report.summary()) == {"precision", "recall", "fscore", "auc5", "auc10", "auc20"}


def test_labels_helper_matches_distance():
    scene = synth_scene(100, 0.5, 1e-3, seed=4)
    d = symmetric_epipolar_distance(compose_essential(scene.pose), scene.correspondences)
    assert np.array_equal(inlier_labels(scene.correspondences, scene.E_gt), d < 1e-4)
