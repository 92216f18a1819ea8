"""Classical two-view geometry in normalized image coordinates.

A correspondence is a row ``(x, y, u, v)``; ``p = (x, y, 1)`` lives in view A
and ``q = (u, v, 1)`` in view B, so an exact match satisfies ``q^T E p = 0``.
Everything here is numpy except :func:`weighted_eight_point_torch`, the
batched differentiable solver used during training.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

EPIPOLAR_EPS = 1e-12
INLIER_THRESHOLD = 1e-4
# relative eigen-gap under which the eight-point null space counts as degenerate
DEGENERATE_GAP = 1e-12


class DegenerateGeometryError(ValueError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")


@dataclass(frozen=True)
class RelativePose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or np.linalg.det(R) < 0:
            raise ValueError("rotation must be orthonormal with det +1")
        norm = np.linalg.norm(t)
        if norm == 0:
            raise ValueError("translation must be nonzero")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t / norm)


def normalize_keypoints(pts, K: CameraIntrinsics) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    return np.stack([(pts[..., 0] - K.cx) / K.fx, (pts[..., 1] - K.cy) / K.fy], axis=-1)


def denormalize_keypoints(pts, K: CameraIntrinsics) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    return np.stack([pts[..., 0] * K.fx + K.cx, pts[..., 1] * K.fy + K.cy], axis=-1)


def skew(t) -> np.ndarray:
    x, y, z = np.asarray(t, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def canonicalize_essential(E) -> np.ndarray:
    """Unit Frobenius norm, largest-magnitude entry positive."""
    E = np.asarray(E, dtype=np.float64).reshape(3, 3)
    E = E / np.linalg.norm(E)
    flat = E.reshape(-1)
    return E if flat[np.argmax(np.abs(flat))] >= 0 else -E


def compose_essential(pose: RelativePose) -> np.ndarray:
    return canonicalize_essential(skew(pose.translation) @ pose.rotation)


def homogeneous(C) -> tuple[np.ndarray, np.ndarray]:
    C = np.asarray(C, dtype=np.float64)
    ones = np.ones(C.shape[:-1] + (1,))
    return np.concatenate([C[..., :2], ones], -1), np.concatenate([C[..., 2:4], ones], -1)


def epipolar_rows(C) -> np.ndarray:
    """Rows of the linear system ``X vec(E) = 0`` (``vec`` row-major)."""
    p, q = homogeneous(C)
    return (q[..., :, None] * p[..., None, :]).reshape(*p.shape[:-1], 9)


def _smallest_eigvec(A: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(A)
    scale = max(abs(vals[-1]), np.finfo(float).tiny)
    if vals[1] / scale < DEGENERATE_GAP:
        raise DegenerateGeometryError("eight-point null space is not one-dimensional")
    return vecs[:, 0]


def weighted_eight_point(C, weights) -> np.ndarray:
    """Minimize ``sum_i w_i (q_i^T E p_i)^2`` over unit-norm E."""
    C = np.asarray(C, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if C.ndim != 2 or C.shape[1] != 4 or len(C) != len(w):
        raise ValueError("expected correspondences [N, 4] and weights [N]")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    if np.count_nonzero(w > 0) < 8:
        raise DegenerateGeometryError("weighted eight-point needs at least 8 positive weights")
    X = epipolar_rows(C)
    XtWX = X.T @ (w[:, None] * X)
    return canonicalize_essential(_smallest_eigvec(XtWX))


def weighted_eight_point_torch(C: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Batched, differentiable weighted eight-point.

    ``C`` is ``[B, N, 4]``, ``weights`` ``[B, N]``; returns ``[B, 3, 3]``
    canonicalized essential matrices.
    """
    ones = torch.ones_like(C[..., :1])
    p = torch.cat([C[..., :2], ones], -1)
    q = torch.cat([C[..., 2:4], ones], -1)
    X = (q.unsqueeze(-1) * p.unsqueeze(-2)).flatten(-2)
    XtWX = X.transpose(-1, -2) @ (weights.unsqueeze(-1) * X)
    _, vecs = torch.linalg.eigh(XtWX)
    E = vecs[..., 0]
    E = E / E.norm(dim=-1, keepdim=True)
    sign = torch.sign(E.gather(-1, E.abs().argmax(-1, keepdim=True)))
    return (E * sign.detach()).view(*E.shape[:-1], 3, 3)


def symmetric_epipolar_distance(E, C) -> np.ndarray:
    """``(q^T E p)^2 / ((Ep)_1^2 + (Ep)_2^2 + (E^T q)_1^2 + (E^T q)_2^2 + eps)``."""
    E = np.asarray(E, dtype=np.float64)
    p, q = homogeneous(C)
    Ep = p @ E.T
    Etq = q @ E
    num = np.sum(q * Ep, axis=-1) ** 2
    den = Ep[..., 0] ** 2 + Ep[..., 1] ** 2 + Etq[..., 0] ** 2 + Etq[..., 1] ** 2 + EPIPOLAR_EPS
    return num / den


def symmetric_epipolar_distance_torch(E: torch.Tensor, C: torch.Tensor) -> torch.Tensor:
    ones = torch.ones_like(C[..., :1])
    p = torch.cat([C[..., :2], ones], -1)
    q = torch.cat([C[..., 2:4], ones], -1)
    Ep = p @ E.transpose(-1, -2)
    Etq = q @ E
    num = (q * Ep).sum(-1) ** 2
    den = Ep[..., 0] ** 2 + Ep[..., 1] ** 2 + Etq[..., 0] ** 2 + Etq[..., 1] ** 2 + EPIPOLAR_EPS
    return num / den


def full_size_verification(E, C, tau: float = INLIER_THRESHOLD) -> np.ndarray:
    return symmetric_epipolar_distance(E, C) < tau


def _pose_candidates(E) -> list[tuple[np.ndarray, np.ndarray]]:
    U, _, Vt = np.linalg.svd(np.asarray(E, dtype=np.float64))
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    t = U[:, 2]
    R1, R2 = U @ W @ Vt, U @ W.T @ Vt
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


def triangulate_depths(R, t, C) -> tuple[np.ndarray, np.ndarray]:
    """Depths of the linearly triangulated points in both views (A = [I|0], B = [R|t])."""
    p, q = homogeneous(C)
    P1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    P2 = np.hstack([R, t.reshape(3, 1)])
    A = np.stack([
        p[:, 0:1] * P1[2] - P1[0],
        p[:, 1:2] * P1[2] - P1[1],
        q[:, 0:1] * P2[2] - P2[0],
        q[:, 1:2] * P2[2] - P2[1],
    ], axis=1)
    _, _, Vt = np.linalg.svd(A)
    X = Vt[:, -1, :]
    # sign of the homogeneous coordinate is arbitrary; depth = z / w
    Xh = X[:, :3] / X[:, 3:4]
    depth_a = Xh[:, 2]
    depth_b = Xh @ R[2] + t[2]
    return depth_a, depth_b


def decompose_essential(E, inliers) -> RelativePose:
    """Pick the (R, t) of the four SVD candidates with the most points in front of both cameras."""
    C = np.asarray(inliers, dtype=np.float64).reshape(-1, 4)
    if len(C) < 1:
        raise ValueError("cheirality check needs at least one correspondence")
    best, best_count = None, -1
    for R, t in _pose_candidates(E):
        za, zb = triangulate_depths(R, t, C)
        count = int(np.count_nonzero((za > 0) & (zb > 0)))
        if count > best_count:
            best, best_count = (R, t), count
    if 2 * best_count <= len(C):
        raise DegenerateGeometryError("no decomposition puts a majority of points in front of both cameras")
    return RelativePose(*best)


def ransac_essential(C, iters: int = 1000, tau: float = INLIER_THRESHOLD, seed: int = 0):
    """Eight-point RANSAC scored by symmetric epipolar distance.

    Hypotheses are generated and scored in one vectorized pass, so the result
    depends only on ``seed``. Ties keep the lowest hypothesis index.
    """
    C = np.asarray(C, dtype=np.float64)
    n = len(C)
    if n < 8:
        raise ValueError("RANSAC needs at least 8 correspondences")
    if iters < 1:
        raise ValueError("RANSAC needs at least one iteration")
    rng = np.random.Generator(np.random.PCG64(seed))
    samples = np.stack([rng.choice(n, 8, replace=False) for _ in range(iters)])
    X = epipolar_rows(C[samples])  # [iters, 8, 9]
    vals, vecs = np.linalg.eigh(np.einsum("hki,hkj->hij", X, X))
    scale = np.maximum(np.abs(vals[:, -1]), np.finfo(float).tiny)
    valid = vals[:, 1] / scale >= DEGENERATE_GAP
    Es = vecs[:, :, 0].reshape(iters, 3, 3)
    p, q = homogeneous(C)
    Ep = np.einsum("hij,nj->hni", Es, p)
    Etq = np.einsum("hji,nj->hni", Es, q)
    num = np.einsum("ni,hni->hn", q, Ep) ** 2
    den = Ep[..., 0] ** 2 + Ep[..., 1] ** 2 + Etq[..., 0] ** 2 + Etq[..., 1] ** 2 + EPIPOLAR_EPS
    counts = np.where(valid, np.count_nonzero(num / den < tau, axis=1), -1)
    best = int(np.argmax(counts))
    if counts[best] < 8:
        raise DegenerateGeometryError("no RANSAC hypothesis reached 8 inliers")
    E_best = canonicalize_essential(Es[best])
    mask = full_size_verification(E_best, C, tau)
    try:
        E_refit = weighted_eight_point(C[mask], np.ones(int(mask.sum())))
    except DegenerateGeometryError:
        return E_best, mask
    mask_refit = full_size_verification(E_refit, C, tau)
    if mask_refit.sum() >= mask.sum():
        return E_refit, mask_refit
    return E_best, mask


def virtual_correspondences(E_gt=None, count: int = 169, pose: RelativePose | None = None, grid: int = 13):
    """Exact correspondence pairs ``(p, q)`` for ``E_gt`` from a grid of 3D points.

    Points sit on a ``grid x grid`` lattice of view-A rays at depths spread
    over [4, 8]. When no pose is given, the SVD candidate of ``E_gt`` keeping
    the most points in front of view B is used; any candidate reproduces
    ``E_gt`` up to sign, so the constraint holds exactly either way.
    """
    total = grid * grid
    if not 1 <= count <= total:
        raise ValueError(f"count must lie in [1, {total}]")
    xs = np.linspace(-1.0, 1.0, grid)
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    rays = np.stack([gx.ravel(), gy.ravel(), np.ones(total)], axis=1)
    # golden-ratio sequence spreads depths evenly without randomness
    depth = 4.0 + 4.0 * np.mod(np.arange(total) * 0.6180339887498949, 1.0)
    X = rays * depth[:, None]
    if pose is not None:
        R, t = pose.rotation, pose.translation
    else:
        R, t = max(_pose_candidates(E_gt), key=lambda c: np.count_nonzero(X @ c[0].T[:, 2] + c[1][2] > 0.5))
    sel = np.round(np.linspace(0, total - 1, count)).astype(int)
    Xb = X[sel] @ R.T + t
    p = rays[sel]
    q = Xb / Xb[:, 2:3]
    return p, q


def regression_residuals(E_hat, E_gt, p, q) -> np.ndarray:
    """Per-pair ratio ``(q^T E_hat p)^2 / (gradient terms of E_gt)``."""
    E_hat = np.asarray(E_hat, dtype=np.float64)
    E_gt = np.asarray(E_gt, dtype=np.float64)
    Ep = p @ E_gt.T
    Etq = q @ E_gt
    num = np.einsum("ni,ij,nj->n", q, E_hat, p) ** 2
    den = Ep[:, 0] ** 2 + Ep[:, 1] ** 2 + Etq[:, 0] ** 2 + Etq[:, 1] ** 2 + EPIPOLAR_EPS
    return num / den


def rotation_error_deg(R_est, R_gt) -> float:
    """Angle of ``R_est^T R_gt``; atan2 form of ``arccos((tr - 1) / 2)``, accurate near 0."""
    D = np.asarray(R_est, dtype=np.float64).T @ np.asarray(R_gt, dtype=np.float64)
    sin = 0.5 * np.linalg.norm([D[2, 1] - D[1, 2], D[0, 2] - D[2, 0], D[1, 0] - D[0, 1]])
    cos = (np.trace(D) - 1.0) / 2.0
    return float(np.clip(np.degrees(np.arctan2(sin, cos)), 0.0, 180.0))


def translation_error_deg(t_est, t_gt) -> float:
    """Sign-invariant angle between two directions, ``arccos(|a.b|)`` in atan2 form."""
    a = np.asarray(t_est, dtype=np.float64)
    b = np.asarray(t_gt, dtype=np.float64)
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    return float(np.degrees(np.arctan2(np.linalg.norm(np.cross(a, b)), abs(a @ b))))


def pose_error(est: RelativePose, gt: RelativePose) -> tuple[float, float]:
    return rotation_error_deg(est.rotation, gt.rotation), translation_error_deg(est.translation, gt.translation)


def rotation_about_axis(axis, angle_rad: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    Kx = skew(k)
    return np.eye(3) + np.sin(angle_rad) * Kx + (1 - np.cos(angle_rad)) * Kx @ Kx
