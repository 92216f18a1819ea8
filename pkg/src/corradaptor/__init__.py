"""Correspondence pruning with dual local-context branches and motion-aware flow attention."""
from .data import ScenePair, load_pairs, save_pairs, synth_dataset, synth_scene
from .geometry import (
    CameraIntrinsics,
    RelativePose,
    compose_essential,
    decompose_essential,
    ransac_essential,
    symmetric_epipolar_distance,
    weighted_eight_point,
)
from .metrics import MetricsReport, pose_auc, prf_metrics
from .model import CorrAdaptor, CorrAdaptorConfig
from .training import TrainConfig, evaluate, evaluate_ransac, train

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "CorrAdaptor",
    "CorrAdaptorConfig",
    "MetricsReport",
    "RelativePose",
    "ScenePair",
    "TrainConfig",
    "compose_essential",
    "decompose_essential",
    "evaluate",
    "evaluate_ransac",
    "load_pairs",
    "pose_auc",
    "prf_metrics",
    "ransac_essential",
    "save_pairs",
    "symmetric_epipolar_distance",
    "synth_dataset",
    "synth_scene",
    "train",
    "weighted_eight_point",
]
