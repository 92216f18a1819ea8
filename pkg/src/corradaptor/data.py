"""Synthetic two-view scenes and the ``corrpairs v1`` text format."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import (
    INLIER_THRESHOLD,
    RelativePose,
    compose_essential,
    rotation_about_axis,
    symmetric_epipolar_distance,
)

log = logging.getLogger(__name__)

FORMAT_TAG = "corrpairs v1"


@dataclass
class ScenePair:
    correspondences: np.ndarray  # [N, 4]
    labels: np.ndarray | None = None  # bool [N]
    pose: RelativePose | None = None
    noise_sigma: float = 0.0
    outlier_ratio: float = 0.0
    seed: int | None = None
    constructed: np.ndarray | None = None  # bool [N], inlier by construction
    name: str = ""

    @property
    def has_gt(self) -> bool:
        return self.pose is not None

    @property
    def E_gt(self) -> np.ndarray | None:
        return compose_essential(self.pose) if self.pose is not None else None

    @property
    def n(self) -> int:
        return len(self.correspondences)


def inlier_labels(C, E_gt, tau: float = INLIER_THRESHOLD) -> np.ndarray:
    return symmetric_epipolar_distance(E_gt, C) < tau


def random_pose(rng: np.random.Generator, max_angle_deg: float = 30.0) -> RelativePose:
    axis = rng.normal(size=3)
    angle = np.radians(rng.uniform(0.0, max_angle_deg))
    t = rng.normal(size=3)
    return RelativePose(rotation_about_axis(axis, angle), t / np.linalg.norm(t))


def project_points(pose: RelativePose, X: np.ndarray) -> np.ndarray:
    """Correspondences ``[N, 4]`` of 3D points ``X`` given in view-A coordinates."""
    Xb = X @ pose.rotation.T + pose.translation
    return np.concatenate([X[:, :2] / X[:, 2:3], Xb[:, :2] / Xb[:, 2:3]], axis=1)


def synth_scene(
    n: int,
    outlier_ratio: float = 0.5,
    noise_sigma: float = 1e-3,
    seed: int = 0,
    *,
    pose: RelativePose | None = None,
    depth_range: tuple[float, float] = (4.0, 8.0),
    half_fov: float = 0.6,
) -> ScenePair:
    """Random calibrated two-view scene with known inliers.

    Points are uniform over the view-A frustum ``|x|, |y| <= half_fov`` at
    depths in ``depth_range``. Outliers keep their view-A keypoint and get a
    view-B location drawn uniformly over the inlier bounding box.
    """
    if n < 16:
        raise ValueError("synth_scene needs n >= 16")
    if not 0.0 <= outlier_ratio < 1.0:
        raise ValueError("outlier_ratio must lie in [0, 1)")
    rng = np.random.Generator(np.random.PCG64(seed))
    if pose is None:
        pose = random_pose(rng)
    depth = rng.uniform(*depth_range, size=n)
    xy = rng.uniform(-half_fov, half_fov, size=(n, 2))
    X = np.concatenate([xy * depth[:, None], depth[:, None]], axis=1)
    C = project_points(pose, X)
    if noise_sigma > 0:
        C = C + rng.normal(scale=noise_sigma, size=C.shape)
    n_out = int(round(outlier_ratio * n))
    outliers = rng.permutation(n)[:n_out]
    constructed = np.ones(n, dtype=bool)
    constructed[outliers] = False
    lo = C[constructed, 2:4].min(axis=0)
    hi = C[constructed, 2:4].max(axis=0)
    C[outliers, 2:4] = rng.uniform(lo, hi, size=(n_out, 2))
    labels = inlier_labels(C, compose_essential(pose))
    return ScenePair(C, labels, pose, noise_sigma, outlier_ratio, seed, constructed)


def split_seeds(seed: int, count: int) -> list[int]:
    """Independent 64-bit child seeds."""
    children = np.random.SeedSequence(seed).spawn(count)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


def synth_dataset(pairs: int, n: int, outlier_ratio: float, noise_sigma: float, seed: int) -> list[ScenePair]:
    out = []
    for i, s in enumerate(split_seeds(seed, pairs)):
        scene = synth_scene(n, outlier_ratio, noise_sigma, s)
        scene.name = f"pair_{i:05d}"
        out.append(scene)
    return out


# ------------------------------------------------------------------ file format

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def dumps_pair(pair: ScenePair) -> str:
    has_labels = pair.labels is not None
    lines = [f"{FORMAT_TAG} n={pair.n} gt={int(pair.has_gt)}"]
    if pair.has_gt:
        for row in pair.pose.rotation:
            lines.append(" ".join(_fmt(v) for v in row))
        lines.append(" ".join(_fmt(v) for v in pair.pose.translation))
    for i, row in enumerate(pair.correspondences):
        cols = [_fmt(v) for v in row]
        if has_labels:
            cols.append(str(int(pair.labels[i])))
        lines.append(" ".join(cols))
    return "\n".join(lines) + "\n"


def save_pair(pair: ScenePair, path: str | Path) -> None:
    Path(path).write_text(dumps_pair(pair))


def _floats(line: str, count: int, what: str) -> list[float]:
    parts = line.split()
    if len(parts) != count:
        raise ValueError(f"{what}: expected {count} values, got {len(parts)}")
    return [float(p) for p in parts]


def loads_pair(text: str, name: str = "") -> ScenePair:
    lines = text.splitlines()
    if not lines:
        raise ValueError("empty correspondence file")
    head = lines[0].split()
    if len(head) != 4 or " ".join(head[:2]) != FORMAT_TAG or not head[2].startswith("n=") or not head[3].startswith("gt="):
        raise ValueError(f"malformed header: {lines[0]!r}")
    n = int(head[2][2:])
    gt = head[3][3:]
    if gt not in ("0", "1"):
        raise ValueError(f"malformed gt flag: {gt!r}")
    pos = 1
    pose = None
    if gt == "1":
        if len(lines) < 5:
            raise ValueError("truncated ground-truth block")
        R = np.array([_floats(lines[pos + i], 3, "rotation row") for i in range(3)])
        t = np.array(_floats(lines[pos + 3], 3, "translation"))
        pose = RelativePose(R, t)
        pos += 4
    rows = lines[pos:]
    if len(rows) != n:
        raise ValueError(f"expected {n} correspondence rows, found {len(rows)}")
    width = len(rows[0].split()) if rows else 4
    if width not in (4, 5):
        raise ValueError("correspondence rows must have 4 or 5 columns")
    C = np.empty((n, 4))
    labels = np.empty(n, dtype=bool) if width == 5 else None
    for i, line in enumerate(rows):
        parts = line.split()
        if len(parts) != width:
            raise ValueError(f"row {i}: inconsistent column count ({len(parts)} vs {width})")
        C[i] = [float(p) for p in parts[:4]]
        if labels is not None:
            if parts[4] not in ("0", "1"):
                raise ValueError(f"row {i}: label must be 0 or 1")
            labels[i] = parts[4] == "1"
    if pose is None:
        log.warning("%s has no ground-truth pose; pose metrics unavailable", name or "pair")
    return ScenePair(C, labels, pose, name=name)


def load_pairs(path: str | Path) -> list[ScenePair]:
    """Read one ``.corr`` file or every ``*.corr`` file of a directory (sorted by name)."""
    path = Path(path)
    files = sorted(path.glob("*.corr")) if path.is_dir() else [path]
    return [loads_pair(f.read_text(), f.stem) for f in files]


def save_pairs(pairs: Sequence[ScenePair], directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, pair in enumerate(pairs):
        p = directory / f"{pair.name or f'pair_{i:05d}'}.corr"
        save_pair(pair, p)
        paths.append(p)
    return paths
