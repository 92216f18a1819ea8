"""Motion field, flow attention and the motion injection block."""
from __future__ import annotations

import math
from typing import Callable

import torch
import torch.nn as nn
from torch.utils._python_dispatch import TorchDispatchMode

from .numerics import elu_plus_one, linear

FLOW_EPS = 1e-9

FEATURE_MAPS: dict[str, Callable[[torch.Tensor], torch.Tensor]] = {
    "elu1": elu_plus_one,
    "sigmoid": torch.sigmoid,
}


def compute_motion(C: torch.Tensor) -> torch.Tensor:
    """Per-correspondence displacement ``(x - u, y - v)``."""
    return C[..., 0:2] - C[..., 2:4]


def flow_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                   phi: Callable = elu_plus_one, eps: float = FLOW_EPS) -> torch.Tensor:
    """Linear-cost flow attention over ``[..., N, d]`` (queries) and ``[..., S, d]`` (sources).

    Incoming flow of each sink and outgoing flow of each source are
    conserved, sources compete through a softmax over their outgoing flow
    (rescaled so the total stays S), and sinks are gated by a sigmoid of
    their conserved incoming flow. Only ``d x d`` and ``N x d`` products
    are formed.
    """
    fq, fk = phi(q), phi(k)
    incoming = fq @ fk.sum(-2).unsqueeze(-1) + eps  # [..., N, 1]
    fq_norm = fq / incoming
    outgoing = fk @ fq_norm.sum(-2).unsqueeze(-1) + eps  # [..., S, 1]
    conserved_in = fq @ (fk / outgoing).sum(-2).unsqueeze(-1)  # [..., N, 1]
    competition = torch.softmax(outgoing, dim=-2) * k.shape[-2]
    kv = fk.transpose(-1, -2) @ (v * competition)  # [..., d, d]
    return torch.sigmoid(conserved_in) * (fq_norm @ kv)


def flow_attention_dense(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor,
                         phi: Callable = elu_plus_one, eps: float = FLOW_EPS) -> torch.Tensor:
    """Same conserved-flow formula with the ``N x S`` flow matrix materialized."""
    P = phi(q) @ phi(k).transpose(-1, -2)  # [..., N, S]
    incoming = P.sum(-1, keepdim=True) + eps
    outgoing = (P / incoming).sum(-2, keepdim=True).transpose(-1, -2) + eps  # [..., S, 1]
    conserved_in = (P / outgoing.transpose(-1, -2)).sum(-1, keepdim=True)
    competition = torch.softmax(outgoing, dim=-2) * k.shape[-2]
    return torch.sigmoid(conserved_in) * ((P / incoming) @ (v * competition))


def dense_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, chunk: int | None = None) -> torch.Tensor:
    """Softmax attention. ``chunk`` bounds memory by scoring that many queries at a time."""
    if chunk is not None and chunk < q.shape[-2]:
        return torch.cat([dense_attention(q[..., i:i + chunk, :], k, v) for i in range(0, q.shape[-2], chunk)], dim=-2)
    scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
    return torch.softmax(scores, dim=-1) @ v


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int = 4, kind: str = "flow", phi: str = "elu1",
                 zero_out: bool = False):
        super().__init__()
        if dim % heads:
            raise ValueError("model dim must be divisible by the head count")
        if kind not in ("flow", "dense"):
            raise ValueError(f"unknown attention kind {kind!r}")
        self.heads = heads
        self.kind = kind
        self.phi = FEATURE_MAPS[phi]
        self.q = linear(dim, dim)
        self.k = linear(dim, dim)
        self.v = linear(dim, dim)
        self.out = linear(dim, dim, zero=zero_out)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        *lead, n, d = x.shape
        return x.reshape(*lead, n, self.heads, d // self.heads).transpose(-2, -3)

    def forward(self, x: torch.Tensor, source: torch.Tensor | None = None) -> torch.Tensor:
        source = x if source is None else source
        q, k, v = self._split(self.q(x)), self._split(self.k(source)), self._split(self.v(source))
        if self.kind == "flow":
            o = flow_attention(q, k, v, self.phi)
        else:
            o = dense_attention(q, k, v)
        o = o.transpose(-2, -3).reshape(x.shape)
        return self.out(o)


class FeedForward(nn.Sequential):
    def __init__(self, dim: int, expansion: int = 2, zero_out: bool = False):
        super().__init__(linear(dim, expansion * dim), nn.ReLU(), linear(expansion * dim, dim, zero=zero_out))


class MotionInjection(nn.Module):
    """``L_m`` rounds of self-attention, motion cross-attention and FFN, each residual.

    ``use_motion=False`` drops the cross-attention (MHSA + FFN only).
    """

    def __init__(self, dim: int, rounds: int = 2, heads: int = 4, kind: str = "flow",
                 phi: str = "elu1", use_motion: bool = True, zero_out: bool = False):
        super().__init__()
        if rounds < 1:
            raise ValueError("motion injection needs at least one round")
        self.use_motion = use_motion
        self.self_attn = nn.ModuleList(MultiHeadAttention(dim, heads, kind, phi, zero_out) for _ in range(rounds))
        self.cross_attn = nn.ModuleList(
            MultiHeadAttention(dim, heads, kind, phi, zero_out) for _ in range(rounds if use_motion else 0))
        self.ffn = nn.ModuleList(FeedForward(dim, zero_out=zero_out) for _ in range(rounds))

    def forward(self, F: torch.Tensor, motion_embed: torch.Tensor | None = None) -> torch.Tensor:
        for i in range(len(self.self_attn)):
            F = F + self.self_attn[i](F)
            if self.use_motion:
                F = F + self.cross_attn[i](F, motion_embed)
            F = F + self.ffn[i](F)
        return F


class MotionEmbedding(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.proj = linear(2, dim)

    def forward(self, C: torch.Tensor) -> torch.Tensor:
        return self.proj(compute_motion(C))


class AllocationTracker(TorchDispatchMode):
    """Records the largest tensor (in elements) produced by any op while active."""

    def __init__(self):
        super().__init__()
        self.max_numel = 0
        self.max_op = None

    def __torch_dispatch__(self, func, types, args=(), kwargs=None):
        out = func(*args, **(kwargs or {}))
        for t in out if isinstance(out, (tuple, list)) else (out,):
            if isinstance(t, torch.Tensor) and t.numel() > self.max_numel:
                self.max_numel = t.numel()
                self.max_op = str(func)
        return out


DENSE_SCORE_BUDGET = 1 << 26  # score elements held at once by the dense benchmark (512 MiB in float64)


def benchmark_attention(sizes=(1024, 4096, 16384), d: int = 128, runs: int = 5, warmup: int = 1,
                        kinds=("flow", "dense"), seed: int = 0) -> list[dict]:
    """Wall-clock timings per (kind, N): median and 90th percentile over ``runs`` after ``warmup``."""
    import time

    import numpy as np

    if runs < 1:
        raise ValueError("runs must be at least 1")
    g = torch.Generator().manual_seed(seed)
    rows = []
    for n in sizes:
        q, k, v = (torch.randn(n, d, dtype=torch.float64, generator=g) for _ in range(3))
        chunk = max(1, DENSE_SCORE_BUDGET // n)
        fns = {"flow": lambda: flow_attention(q, k, v), "dense": lambda: dense_attention(q, k, v, chunk)}
        for kind in kinds:
            fn = fns[kind]
            for _ in range(warmup):
                fn()
            times = []
            for _ in range(runs):
                t = time.perf_counter()
                fn()
                times.append((time.perf_counter() - t) * 1e3)
            rows.append({"kind": kind, "N": n, "d": d, "median_ms": float(np.median(times)),
                         "p90_ms": float(np.percentile(times, 90))})
    return rows
