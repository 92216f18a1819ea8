"""Local-context branches.

Explicit branch: KNN graph in feature space, edge features, spatial /
neighborhood / channel attention gates and annular aggregation.
Implicit branch: soft-assignment pooling to clusters, an order-aware filter
on the cluster graph, and unpooling back to correspondences.

Tensors are channel-last: features ``[B, N, C]``, graphs ``[B, N, k, C]``.
"""
from __future__ import annotations

import torch
import torch.nn as nn

from .numerics import BatchNorm, PointCN, gather_rows, linear

GRAPH_NORM_DIMS = (-3, -2)
POOL_EPS = 1e-9


def _batched(x: torch.Tensor, ndim: int) -> tuple[torch.Tensor, bool]:
    if x.dim() == ndim - 1:
        return x.unsqueeze(0), True
    return x, False


@torch.no_grad()
def knn_feature_graph(F: torch.Tensor, k: int) -> torch.Tensor:
    """Indices ``[B, N, k]`` of each row's k nearest rows (self excluded).

    Squared Euclidean distance; ties go to the lower index. Accepts
    ``[N, d]`` as well and then returns ``[N, k]``.
    """
    F, squeeze = _batched(F, 3)
    n = F.shape[1]
    if not 0 < k < n:
        raise ValueError(f"k must satisfy 0 < k < N (k={k}, N={n})")
    sq = (F * F).sum(-1)
    dist = sq.unsqueeze(-1) + sq.unsqueeze(-2) - 2.0 * F @ F.transpose(-1, -2)
    dist.diagonal(dim1=-2, dim2=-1).fill_(float("inf"))
    kth = torch.topk(dist, k, dim=-1, largest=False, sorted=True).values[..., -1:]
    within = dist <= kth
    if bool((within.sum(-1) > k).any()):
        # a tie straddles the k-th place: only a full stable sort picks the lower indices
        idx = torch.sort(dist, dim=-1, stable=True).indices[..., :k]
    else:
        # exactly k candidates per row; order them by (distance, index)
        idx = within.nonzero()[:, -1].view(*dist.shape[:-1], k)
        idx = torch.gather(idx, -1, torch.sort(torch.gather(dist, -1, idx), dim=-1, stable=True).indices)
    return idx[0] if squeeze else idx


def edge_features(F: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """``e_ij = [f_i || f_i - f_ij]`` with shape ``[B, N, k, 2d]``."""
    F, squeeze = _batched(F, 3)
    idx, _ = _batched(idx, 3)
    neighbors = gather_rows(F, idx)
    center = F.unsqueeze(2).expand_as(neighbors)
    out = torch.cat([center, center - neighbors], dim=-1)
    return out[0] if squeeze else out


class GateMLP(nn.Sequential):
    def __init__(self, dim: int, hidden: int, zero: bool = False):
        super().__init__(linear(dim, hidden), nn.ReLU(), linear(hidden, dim, zero=zero))


class GraphAttention(nn.Module):
    """Residual attention gate on a local graph.

    ``mode`` picks the pooled axes: ``spatial`` pools channels (a gate per
    correspondence and neighbor), ``neighborhood`` pools correspondences and
    channels (a gate per neighbor slot), ``channel`` pools correspondences
    and neighbors (a gate per channel). Output is ``G_hat * sigmoid(A) + G``
    with ``G_hat = PointCN(G)``.
    """

    def __init__(self, channels: int, k: int, mode: str, reduction: int = 4,
                 spatial_hidden: int = 8, zero_gate: bool = False):
        super().__init__()
        if mode not in ("spatial", "neighborhood", "channel"):
            raise ValueError(f"unknown attention mode {mode!r}")
        self.mode = mode
        self.embed = PointCN(channels, norm_dims=GRAPH_NORM_DIMS)
        if mode == "spatial":
            self.mlp = GateMLP(1, spatial_hidden, zero_gate)
        elif mode == "neighborhood":
            self.mlp = GateMLP(k, max(1, k // reduction), zero_gate)
        else:
            self.mlp = GateMLP(channels, max(1, channels // reduction), zero_gate)

    def gate_logits(self, G_hat: torch.Tensor) -> torch.Tensor:
        if self.mode == "spatial":
            desc = G_hat.mean(-1, keepdim=True) + G_hat.amax(-1, keepdim=True)  # [B, N, k, 1]
            return self.mlp(desc)
        if self.mode == "neighborhood":
            desc = G_hat.mean(dim=(1, 3)) + G_hat.amax(dim=(1, 3))  # [B, k]
            return self.mlp(desc)[:, None, :, None]
        desc = G_hat.mean(dim=(1, 2)) + G_hat.amax(dim=(1, 2))  # [B, C]
        return self.mlp(desc)[:, None, None, :]

    def forward(self, G: torch.Tensor) -> torch.Tensor:
        G_hat = self.embed(G)
        return G_hat * torch.sigmoid(self.gate_logits(G_hat)) + G


def spatial_attention(channels: int, k: int, **kw) -> GraphAttention:
    return GraphAttention(channels, k, "spatial", **kw)


def neighborhood_attention(channels: int, k: int, **kw) -> GraphAttention:
    return GraphAttention(channels, k, "neighborhood", **kw)


def channel_attention(channels: int, k: int, **kw) -> GraphAttention:
    return GraphAttention(channels, k, "channel", **kw)


class AnnularStage(nn.Module):
    """Grouped linear over consecutive neighbor rings, then BN and ReLU."""

    def __init__(self, channels: int, group: int):
        super().__init__()
        self.group = group
        self.fc = linear(group * channels, channels)
        self.bn = BatchNorm(channels)

    def forward(self, G: torch.Tensor) -> torch.Tensor:
        B, N, k, C = G.shape
        grouped = G.reshape(B, N, k // self.group, self.group * C)
        return torch.relu(self.bn(self.fc(grouped)))


class AnnularAggregate(nn.Module):
    """Collapse ``[B, N, k, C]`` to ``[B, N, C]`` in two stages: k -> 3 -> 1.

    Neighbors arrive sorted by distance, so each first-stage group is a ring
    of ``k // 3`` neighbors at similar range.
    """

    def __init__(self, channels: int, k: int):
        super().__init__()
        if k % 3 != 0:
            raise ValueError("annular aggregation needs k divisible by 3")
        self.k = k
        self.inner = AnnularStage(channels, k // 3)
        self.outer = AnnularStage(channels, 3)

    def forward(self, G: torch.Tensor) -> torch.Tensor:
        if G.shape[2] != self.k:
            raise ValueError(f"expected {self.k} neighbors, got {G.shape[2]}")
        return self.outer(self.inner(G)).squeeze(2)


class ExplicitBranch(nn.Module):
    def __init__(self, channels: int, k: int, reduction: int = 4, spatial_hidden: int = 8):
        super().__init__()
        self.k = k
        self.edge_proj = linear(2 * channels, channels)
        kw = dict(reduction=reduction, spatial_hidden=spatial_hidden)
        self.sa = spatial_attention(channels, k, **kw)
        self.na = neighborhood_attention(channels, k, **kw)
        self.ca = channel_attention(channels, k, **kw)
        self.aggregate = AnnularAggregate(channels, k)

    def forward(self, F: torch.Tensor) -> torch.Tensor:
        idx = knn_feature_graph(F, self.k)
        G = self.edge_proj(edge_features(F, idx))
        return self.aggregate(self.ca(self.na(self.sa(G))))


class ClusterPool(nn.Module):
    """Soft assignment of N correspondences to ``clusters`` cluster nodes.

    Returns cluster features (assignment-weighted means) ``[B, M, D]`` and the
    assignment ``S`` ``[B, N, M]`` whose rows sum to one.
    """

    def __init__(self, channels: int, clusters: int):
        super().__init__()
        self.clusters = clusters
        self.score = linear(channels, clusters)

    def forward(self, F: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if self.clusters >= F.shape[1]:
            raise ValueError(f"cluster count {self.clusters} must be below N={F.shape[1]}")
        S = torch.softmax(self.score(F), dim=-1)
        return cluster_features(F, S), S


def cluster_features(F: torch.Tensor, S: torch.Tensor) -> torch.Tensor:
    mass = S.sum(dim=-2).unsqueeze(-1)  # [B, M, 1]
    return (S.transpose(-1, -2) @ F) / (mass + POOL_EPS)


def unpool(g: torch.Tensor, S: torch.Tensor) -> torch.Tensor:
    """Each correspondence becomes the assignment-weighted mix of cluster features."""
    if S.shape[-1] != g.shape[-2]:
        raise ValueError(f"assignment has {S.shape[-1]} clusters, graph has {g.shape[-2]}")
    return S @ g


class OAFilter(nn.Module):
    """PointCN over the cluster graph, then a linear mix across clusters, with a residual."""

    def __init__(self, channels: int, clusters: int, zero_mix: bool = False):
        super().__init__()
        self.embed = PointCN(channels)
        self.mix = linear(clusters, clusters, zero=zero_mix)

    def forward(self, g: torch.Tensor) -> torch.Tensor:
        h = self.embed(g)
        return g + self.mix(h.transpose(-1, -2)).transpose(-1, -2)


class ImplicitBranch(nn.Module):
    def __init__(self, channels: int, clusters: int):
        super().__init__()
        self.pool = ClusterPool(channels, clusters)
        self.oa = OAFilter(channels, clusters)

    def forward(self, F: torch.Tensor) -> torch.Tensor:
        g, S = self.pool(F)
        return unpool(self.oa(g), S)
