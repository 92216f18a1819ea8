"""Classification and pose-accuracy metrics."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

AUC_THRESHOLDS = (5.0, 10.0, 20.0)
FAILED_POSE_ERROR = 180.0


def prf_metrics(pred, gt) -> tuple[float, float, float]:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ValueError("prediction and ground-truth masks differ in length")
    tp = int(np.count_nonzero(pred & gt))
    n_pred = int(np.count_nonzero(pred))
    n_gt = int(np.count_nonzero(gt))
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gt if n_gt else 0.0
    fscore = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, fscore


def pose_auc(errors: Sequence[float], thresholds: Sequence[float] = AUC_THRESHOLDS) -> dict[float, float]:
    """Area under the empirical error CDF on ``[0, t]``, divided by ``t``.

    The CDF is the exact step function of the sample, so the integral is the
    trapezoid rule over its corner points (each jump contributes a vertical
    segment).
    """
    errors = np.sort(np.asarray(errors, dtype=np.float64))
    if errors.size == 0:
        raise ValueError("pose_auc needs at least one error")
    if not np.all(np.isfinite(errors)):
        raise ValueError("pose errors must be finite (record failures as 180 degrees)")
    n = errors.size
    out = {}
    for t in thresholds:
        e = errors[errors < t]
        # corner points of the step CDF: (e_i, i/n) -> (e_i, (i+1)/n)
        xs = np.concatenate([[0.0], np.repeat(e, 2), [t]])
        ys = np.concatenate([[0.0], np.repeat(np.arange(len(e) + 1) / n, 2)[1:]])
        out[t] = float(np.trapezoid(ys, xs) / t)
    return out


@dataclass
class MetricsReport:
    precision: float
    recall: float
    fscore: float
    pose_auc: dict[float, float]
    rows: list[dict] = field(default_factory=list)

    def summary(self) -> dict[str, float]:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "fscore": self.fscore,
            "auc5": self.pose_auc.get(5.0, float("nan")),
            "auc10": self.pose_auc.get(10.0, float("nan")),
            "auc20": self.pose_auc.get(20.0, float("nan")),
        }


def aggregate(rows: Sequence[dict]) -> MetricsReport:
    """Mean per-pair P/R/F and AUC over per-pair ``max(rot, trans)`` errors.

    Each row carries ``precision``, ``recall``, ``fscore`` and optionally
    ``pose_error`` (absent when the pair has no ground-truth pose).
    """
    if not rows:
        raise ValueError("no rows to aggregate")
    labeled = [r for r in rows if "precision" in r]
    # pairs without labels contribute only to pose AUC
    p, r_, f = (float(np.mean([r[key] for r in labeled])) if labeled else float("nan")
                for key in ("precision", "recall", "fscore"))
    errs = [r["pose_error"] for r in rows if r.get("pose_error") is not None]
    auc = pose_auc(errs) if errs else {}
    return MetricsReport(p, r_, f, auc, list(rows))
