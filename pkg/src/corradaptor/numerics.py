"""Tensor helpers shared by every block.

All arithmetic runs on float64 torch tensors; torch autograd supplies the
reverse-mode gradients. This module adds the few pieces torch does not ship
in the exact form the network needs (context normalization, the ``elu + 1``
feature map, always-training batch norm, finite-difference gradient checks)
and the binary checkpoint format.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

DTYPE = torch.float64
CN_EPS = 1e-9
BN_EPS = 1e-5

CHECKPOINT_MAGIC = b"CADPCKPT"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    """Raised when a forward value or gradient contains NaN or Inf."""


def as_tensor(x, requires_grad: bool = False) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(x, dtype=np.float64) if not torch.is_tensor(x) else x, dtype=DTYPE)
    if requires_grad:
        t = t.detach().clone().requires_grad_(True)
    return t


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NonFiniteError(f"non-finite values in {what}")
    return t


def elu_plus_one(x: torch.Tensor) -> torch.Tensor:
    """``elu(x) + 1`` written as ``exp(x)`` on the negative side, so it never rounds to zero."""
    return torch.where(x > 0, x + 1.0, torch.exp(torch.clamp(x, max=0.0)))


def context_norm(x: torch.Tensor, dims: Iterable[int] | None = None, eps: float = CN_EPS,
                 weight: torch.Tensor | None = None, bias: torch.Tensor | None = None) -> torch.Tensor:
    """Normalize every channel to zero mean / unit variance over the set axis.

    ``x`` is ``[..., N, C]`` (or ``[..., N, k, C]`` with ``dims=(-3, -2)``).
    By default statistics are taken over the second-to-last axis. The
    variance is the biased (population) estimate; ``eps`` is added to it.
    """
    dims = tuple(sorted(d % x.dim() for d in (dims or (-2,))))
    count = 1
    for d in dims:
        count *= x.shape[d]
    if count < 2:
        raise ValueError("context_norm needs at least 2 elements along the normalized axes")
    # shifting by one sample leaves the result unchanged and makes constant channels exactly zero
    ref = x[tuple(slice(0, 1) if i in dims else slice(None) for i in range(x.dim()))]
    x = x - ref.detach()
    if dims != tuple(range(x.dim() - 1 - len(dims), x.dim() - 1)):
        mean = x.mean(dim=dims, keepdim=True)
        var = ((x - mean) ** 2).mean(dim=dims, keepdim=True)
        out = (x - mean) / torch.sqrt(var + eps)
        if weight is not None:
            out = out * weight + bias
        return out
    # normalized axes sit right before the channel axis: use the fused kernel
    shape = x.shape
    flat = x.reshape(-1, count, shape[-1]).transpose(1, 2)
    return F.instance_norm(flat, weight=weight, bias=bias, eps=eps).transpose(1, 2).reshape(shape)


class ContextNorm(nn.Module):
    """Context normalization with an optional per-channel affine.

    The affine stands in for a batch norm stacked on top: batch statistics of
    a context-normalized tensor are already (0, 1), so only its scale and
    shift remain.
    """

    def __init__(self, dims: Iterable[int] | None = None, eps: float = CN_EPS, channels: int | None = None):
        super().__init__()
        self.dims = tuple(dims) if dims is not None else (-2,)
        self.eps = eps
        if channels is not None:
            self.weight = nn.Parameter(torch.ones(channels, dtype=DTYPE))
            self.bias = nn.Parameter(torch.zeros(channels, dtype=DTYPE))
        else:
            self.weight = self.bias = None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return context_norm(x, self.dims, self.eps, self.weight, self.bias)


class BatchNorm(nn.Module):
    """Channel-last batch norm that always normalizes with batch statistics.

    Running statistics are tracked in train mode (and checkpointed) but
    never read.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = BN_EPS):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.weight = nn.Parameter(torch.ones(channels, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(channels, dtype=DTYPE))
        self.register_buffer("running_mean", torch.zeros(channels, dtype=DTYPE))
        self.register_buffer("running_var", torch.ones(channels, dtype=DTYPE))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        track = self.training
        out = F.batch_norm(x.reshape(-1, x.shape[-1]),
                           self.running_mean if track else None, self.running_var if track else None,
                           self.weight, self.bias, True, self.momentum, self.eps)
        return out.reshape(x.shape)


def linear(in_features: int, out_features: int, bias: bool = True, zero: bool = False) -> nn.Linear:
    layer = nn.Linear(in_features, out_features, bias=bias, dtype=DTYPE)
    if zero:
        nn.init.zeros_(layer.weight)
        if bias:
            nn.init.zeros_(layer.bias)
    return layer


class PointCN(nn.Module):
    """Residual PointCN block: two (CN+affine, ReLU, Linear) units plus a shortcut.

    ``norm_dims`` selects the axes context normalization runs over; graph
    tensors ``[B, N, k, C]`` use ``(-3, -2)``.
    """

    def __init__(self, channels: int, out_channels: int | None = None, norm_dims=(-2,)):
        super().__init__()
        out_channels = out_channels or channels
        self.cn1 = ContextNorm(norm_dims, channels=channels)
        self.fc1 = linear(channels, out_channels)
        self.cn2 = ContextNorm(norm_dims, channels=out_channels)
        self.fc2 = linear(out_channels, out_channels)
        self.shortcut = linear(channels, out_channels) if out_channels != channels else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = self.fc1(torch.relu(self.cn1(x)))
        out = self.fc2(torch.relu(self.cn2(out)))
        return out + (self.shortcut(x) if self.shortcut is not None else x)


def gather_rows(x: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """``x[b, idx[b, ...]]`` for ``x`` of shape ``[B, N, ...]``."""
    if idx.min() < 0 or idx.max() >= x.shape[1]:
        raise IndexError("gather index out of range")
    b = torch.arange(x.shape[0]).view(-1, *([1] * (idx.dim() - 1)))
    return x[b, idx]


def grad_check(fn: Callable[..., torch.Tensor], *inputs: torch.Tensor, h: float = 1e-6) -> float:
    """Max relative error between autograd and central differences.

    ``fn`` maps the inputs to a tensor (or tuple of tensors). Outputs are
    flattened and reduced with fixed random weights, so normalized outputs
    whose plain sum is constant still exercise every path. The error per
    coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 1e-6 <= h <= 1e-4:
        raise ValueError("step h must lie in [1e-6, 1e-4]")
    xs = [x.detach().clone().to(DTYPE).requires_grad_(True) for x in inputs]
    probe = None

    def scalar(*args):
        nonlocal probe
        res = fn(*args)
        flat = torch.cat([r.reshape(-1) for r in (res if isinstance(res, (tuple, list)) else (res,))])
        if probe is None:
            probe = torch.randn(flat.numel(), dtype=DTYPE, generator=torch.Generator().manual_seed(0))
        return (flat * probe).sum()

    out = check_finite(scalar(*xs), "grad_check forward")
    analytic = torch.autograd.grad(out, xs, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for x, g in zip(xs, analytic):
            g = torch.zeros_like(x) if g is None else g
            check_finite(g, "analytic gradient")
            flat = x.view(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                plus = scalar(*xs).item()
                flat[i] = orig - h
                minus = scalar(*xs).item()
                flat[i] = orig
                numeric = (plus - minus) / (2 * h)
                if not np.isfinite(numeric):
                    raise NonFiniteError("non-finite finite-difference value")
                err = abs(gflat[i].item() - numeric) / max(1.0, abs(numeric))
                worst = max(worst, err)
    return worst


def module_grad_check(module: nn.Module, *inputs: torch.Tensor, h: float = 1e-6, params: bool = True) -> float:
    """grad_check over a module's inputs and (optionally) all its parameters."""
    names = [n for n, p in module.named_parameters() if p.requires_grad] if params else []
    values = [p.detach().clone() for n, p in module.named_parameters() if n in names]
    n_in = len(inputs)

    def fn(*xs):
        return torch.func.functional_call(module, dict(zip(names, xs[n_in:])), tuple(xs[:n_in]))

    return grad_check(fn, *inputs, *values, h=h)


# ---------------------------------------------------------------- checkpoints
#
# Layout (little-endian):
#   magic "CADPCKPT" | u8 version | u32 entry count
#   per entry: u16 name length | utf-8 name | u8 ndim | u64 * ndim shape | f64 * prod(shape)

def save_checkpoint(state: Mapping[str, torch.Tensor], path: str | Path) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<BI", CHECKPOINT_VERSION, len(state)))
    seen = set()
    for name, value in state.items():
        if name in seen:
            raise ValueError(f"duplicate parameter name {name!r}")
        seen.add(name)
        arr = np.asarray(value.detach().cpu().numpy(), dtype="<f8", order="C")  # keeps 0-d shapes
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> dict[str, torch.Tensor]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<BI", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    pos = 13
    out: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += 8 * size
        out[name] = torch.tensor(arr, dtype=DTYPE)
    if pos != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return out
