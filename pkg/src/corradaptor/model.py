"""Dual-branch correspondence pruning network and its losses."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import (
    INLIER_THRESHOLD,
    EPIPOLAR_EPS,
    symmetric_epipolar_distance_torch,
    weighted_eight_point_torch,
)
from .graph_blocks import ExplicitBranch, ImplicitBranch
from .motion_attention import MotionEmbedding, MotionInjection
from .numerics import PointCN, check_finite, gather_rows, linear

MIN_CANDIDATES = 8


@dataclass
class CorrAdaptorConfig:
    k_per_block: tuple[int, ...] = (9, 6)
    d: int = 128
    clusters: int = 250
    heads: int = 4
    L_m: int = 2
    L_p: int = 2
    L_fusion: int = 1
    alpha: float = 0.5
    attention: str = "flow"  # flow | dense
    phi: str = "elu1"
    branches: str = "dual"  # dual | explicit | implicit
    motion: bool = True
    share_motion_weights: bool = False
    reduction: int = 4
    spatial_hidden: int = 8
    lam: float = 0.5
    warmup_frac: float = 0.1
    omega: str = "ones"
    tau: float = INLIER_THRESHOLD

    def __post_init__(self):
        self.k_per_block = tuple(int(k) for k in self.k_per_block)
        if not 0 < self.alpha <= 1:
            raise ValueError("alpha must lie in (0, 1]")
        if self.L_p != len(self.k_per_block):
            raise ValueError("L_p must equal the number of per-block k values")
        if self.d % self.heads:
            raise ValueError("d must be divisible by heads")
        if self.branches not in ("dual", "explicit", "implicit"):
            raise ValueError(f"unknown branch mode {self.branches!r}")
        if self.attention not in ("flow", "dense"):
            raise ValueError(f"unknown attention kind {self.attention!r}")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.L_m < 1 or self.L_fusion < 1:
            raise ValueError("L_m and L_fusion must be at least 1")

    @classmethod
    def from_dict(cls, values: dict) -> "CorrAdaptorConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["k_per_block"] = list(self.k_per_block)
        return out

    def stage_sizes(self, n: int) -> list[int]:
        sizes = [n]
        for _ in range(self.L_p):
            sizes.append(math.ceil(self.alpha * sizes[-1]))
        return sizes


@dataclass
class PruneState:
    stage: int
    incoming_idx: torch.Tensor  # [B, N_b] original indices scored at this stage
    logits: torch.Tensor  # [B, N_b]
    kept_idx: torch.Tensor  # [B, ceil(alpha N_b)] original indices, ascending
    weights: torch.Tensor  # [B, ceil(alpha N_b)]


@dataclass
class ModelOutput:
    prune_states: list[PruneState]
    E_hat: torch.Tensor  # [B, 3, 3]
    E_valid: torch.Tensor  # [B] bool, enough positive weights for eight-point
    distances: torch.Tensor  # [B, N]
    inlier_mask: torch.Tensor  # [B, N] bool

    @property
    def final_idx(self) -> torch.Tensor:
        return self.prune_states[-1].kept_idx

    @property
    def final_weights(self) -> torch.Tensor:
        return self.prune_states[-1].weights


def inlier_weights(logits: torch.Tensor) -> torch.Tensor:
    return torch.tanh(torch.relu(logits))


def prune(logits: torch.Tensor, alpha: float) -> torch.Tensor:
    """Positions of the top ``ceil(alpha N)`` logits, ties to the lower index, returned ascending."""
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    keep = math.ceil(alpha * logits.shape[-1])
    order = torch.sort(logits.detach(), dim=-1, descending=True, stable=True).indices
    return torch.sort(order[..., :keep], dim=-1).values


class PruningBlock(nn.Module):
    def __init__(self, cfg: CorrAdaptorConfig, k: int):
        super().__init__()
        self.cfg = cfg
        d = cfg.d
        self.motion_embed = MotionEmbedding(d) if cfg.motion else None
        use_e = cfg.branches in ("dual", "explicit")
        use_i = cfg.branches in ("dual", "implicit")

        def injector():
            return MotionInjection(d, cfg.L_m, cfg.heads, cfg.attention, cfg.phi, use_motion=cfg.motion)

        self.explicit = nn.ModuleList(ExplicitBranch(d, k, cfg.reduction, cfg.spatial_hidden)
                                      for _ in range(cfg.L_fusion)) if use_e else None
        self.implicit = nn.ModuleList(ImplicitBranch(d, cfg.clusters)
                                      for _ in range(cfg.L_fusion)) if use_i else None
        self.inject_e = nn.ModuleList(injector() for _ in range(cfg.L_fusion)) if use_e else None
        if use_i:
            if use_e and cfg.share_motion_weights:
                self.inject_i = self.inject_e
            else:
                self.inject_i = nn.ModuleList(injector() for _ in range(cfg.L_fusion))
        else:
            self.inject_i = None
        self.head = linear(d, 1)

    def forward(self, F: torch.Tensor, C: torch.Tensor) -> torch.Tensor:
        m_hat = self.motion_embed(C) if self.motion_embed is not None else None
        for it in range(self.cfg.L_fusion):
            fused = 0
            if self.explicit is not None:
                fused = fused + self.inject_e[it](self.explicit[it](F), m_hat)
            if self.implicit is not None:
                fused = fused + self.inject_i[it](self.implicit[it](F), m_hat)
            F = fused
        return self.head(F).squeeze(-1)


class CorrAdaptor(nn.Module):
    def __init__(self, cfg: CorrAdaptorConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or CorrAdaptorConfig()
        self.stem = nn.Sequential(linear(4, cfg.d), PointCN(cfg.d))
        self.blocks = nn.ModuleList(PruningBlock(cfg, k) for k in cfg.k_per_block)

    def forward(self, C: torch.Tensor) -> ModelOutput:
        """Score, prune and fit an essential matrix for ``C`` of shape ``[B, N, 4]`` (or ``[N, 4]``)."""
        if C.dim() == 2:
            C = C.unsqueeze(0)
        check_finite(C, "correspondences")
        B, N, _ = C.shape
        sizes = self.cfg.stage_sizes(N)
        if sizes[-1] < MIN_CANDIDATES:
            raise ValueError(f"final candidate count {sizes[-1]} is below {MIN_CANDIDATES} (stages {sizes})")
        feats = self.stem(C)
        idx = torch.arange(N).expand(B, N)
        states = []
        for b, block in enumerate(self.blocks):
            logits = check_finite(block(gather_rows(feats, idx), gather_rows(C, idx)), "logits")
            pos = prune(logits, self.cfg.alpha)
            states.append(PruneState(b, idx, logits, torch.gather(idx, 1, pos),
                                     inlier_weights(torch.gather(logits, 1, pos))))
            idx = states[-1].kept_idx
        w = states[-1].weights
        valid = (w > 0).sum(-1) >= MIN_CANDIDATES
        # invalid rows fall back to uniform weights so eigh stays non-degenerate
        w_fit = torch.where(valid.unsqueeze(-1), w, torch.ones_like(w))
        E_hat = weighted_eight_point_torch(gather_rows(C, idx), w_fit)
        dist = symmetric_epipolar_distance_torch(E_hat, C)
        mask = (dist < self.cfg.tau) & valid.unsqueeze(-1)
        return ModelOutput(states, E_hat, valid, dist, mask)


# ----------------------------------------------------------------------- losses

def unit_omega(logits: torch.Tensor) -> torch.Tensor:
    return torch.ones_like(logits)


OMEGA_MODES: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {"ones": unit_omega}


def classification_loss(states: Sequence[PruneState], labels: torch.Tensor,
                        omega: Callable[[torch.Tensor], torch.Tensor] = unit_omega) -> torch.Tensor:
    """Sum over stages of the mean BCE between ``omega * logits`` and the stage's labels."""
    labels = labels.to(torch.float64)
    if labels.dim() == 1:
        labels = labels.unsqueeze(0)
    total = 0
    for st in states:
        y = torch.gather(labels, 1, st.incoming_idx)
        if y.shape != st.logits.shape:
            raise ValueError("stage labels and logits differ in shape")
        total = total + F.binary_cross_entropy_with_logits(omega(st.logits) * st.logits, y)
    return total


def regression_loss(E_hat: torch.Tensor, E_gt: torch.Tensor, p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Mean over virtual pairs of ``(q^T E_hat p)^2`` over the epipolar gradients of ``E_gt``.

    Shapes: ``E_hat``/``E_gt`` ``[B, 3, 3]``, ``p``/``q`` ``[B, V, 3]``; returns ``[B]``.
    """
    Ep = p @ E_gt.transpose(-1, -2)
    Etq = q @ E_gt
    num = (q * (p @ E_hat.transpose(-1, -2))).sum(-1) ** 2
    den = Ep[..., 0] ** 2 + Ep[..., 1] ** 2 + Etq[..., 0] ** 2 + Etq[..., 1] ** 2 + EPIPOLAR_EPS
    return (num / den).mean(-1)


def hybrid_loss(cls: torch.Tensor, reg: torch.Tensor, lam: float) -> torch.Tensor:
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    return cls + lam * reg
