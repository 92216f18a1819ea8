import math
import time

import numpy as np
import pytest
import torch

from corradaptor.motion_attention import (
    AllocationTracker,
    FeedForward,
    MotionEmbedding,
    MotionInjection,
    MultiHeadAttention,
    compute_motion,
    dense_attention,
    flow_attention,
    flow_attention_dense,
)
from corradaptor.numerics import DTYPE, elu_plus_one, module_grad_check


def loop_oracle(q, k, v, eps=1e-9):
    """Elementwise evaluation of the conserved-flow formula in plain Python floats."""
    fq = [[x + 1 if x > 0 else math.exp(x) for x in row] for row in q.tolist()]
    fk = [[x + 1 if x > 0 else math.exp(x) for x in row] for row in k.tolist()]
    V = v.tolist()
    N, S, d = len(fq), len(fk), len(V[0])
    P = [[sum(a * b for a, b in zip(fq[i], fk[j])) for j in range(S)] for i in range(N)]
    inc = [sum(P[i]) + eps for i in range(N)]
    out = [sum(P[i][j] / inc[i] for i in range(N)) + eps for j in range(S)]
    cin = [sum(P[i][j] / out[j] for j in range(S)) for i in range(N)]
    m = max(out)
    ex = [math.exp(o - m) for o in out]
    comp = [S * e / sum(ex) for e in ex]
    res = []
    for i in range(N):
        gate = 1 / (1 + math.exp(-cin[i]))
        res.append([gate * sum(P[i][j] / inc[i] * V[j][c] * comp[j] for j in range(S)) for c in range(d)])
    return np.array(res)


def qkv(n, s, d, seed=0):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(n, d, dtype=DTYPE, generator=g), torch.randn(s, d, dtype=DTYPE, generator=g),
            torch.randn(s, d, dtype=DTYPE, generator=g))


def test_motion_vectors():
    C = torch.tensor([[0.5, 0.2, 0.1, -0.3]], dtype=DTYPE)
    assert torch.allclose(compute_motion(C), torch.tensor([[0.4, 0.5]], dtype=DTYPE))


class TestFlowAttention:
    def test_matches_loop_oracle(self):
        q, k, v = qkv(12, 9, 4)
        assert np.abs(flow_attention(q, k, v).numpy() - loop_oracle(q, k, v)).max() < 1e-12

    def test_linear_equals_dense_at_64(self):
        q, k, v = qkv(64, 64, 32, seed=1)
        a = flow_attention(q, k, v)
        b = flow_attention_dense(q, k, v)
        assert ((a - b).abs().max() / b.abs().max()).item() < 1e-5

    def test_zero_values_give_zero(self):
        q, k, _ = qkv(10, 10, 4)
        assert torch.equal(flow_attention(q, k, torch.zeros(10, 4, dtype=DTYPE)), torch.zeros(10, 4, dtype=DTYPE))

    def test_source_permutation_invariant(self):
        q, k, v = qkv(20, 30, 8, seed=2)
        perm = torch.randperm(30)
        assert torch.allclose(flow_attention(q, k, v), flow_attention(q, k[perm], v[perm]), atol=1e-12)

    def test_sink_permutation_equivariant(self):
        q, k, v = qkv(20, 30, 8, seed=3)
        perm = torch.randperm(20)
        assert torch.allclose(flow_attention(q, k, v)[perm], flow_attention(q[perm], k, v), atol=1e-12)

    def test_feature_map_positive(self):
        assert (elu_plus_one(torch.tensor([-50.0, 0.0, 3.0], dtype=DTYPE)) > 0).all()

    def test_no_quadratic_allocation(self):
        n, d = 16384, 32
        q, k, v = (torch.randn(1, 4, n, d, dtype=DTYPE) for _ in range(3))
        with AllocationTracker() as tracker:
            flow_attention(q, k, v)
        assert tracker.max_numel < n * n
        assert tracker.max_numel <= 4 * n * d

    def test_tracker_sees_dense_matrix(self):
        q, k, v = qkv(512, 512, 8)
        with AllocationTracker() as tracker:
            dense_attention(q, k, v)
        assert tracker.max_numel >= 512 * 512


def _median_time(fn, runs=5):
    fn()
    times = []
    for _ in range(runs):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return float(np.median(times))


@pytest.mark.slow
def test_scaling():
    d = 128
    timings = {}
    for n in (1024, 4096):
        q, k, v = (torch.randn(n, d, dtype=DTYPE) for _ in range(3))
        timings["flow", n] = _median_time(lambda: flow_attention(q, k, v))
        timings["dense", n] = _median_time(lambda: dense_attention(q, k, v))
    assert timings["flow", 4096] / timings["flow", 1024] <= 6
    assert timings["dense", 4096] / timings["dense", 1024] >= 8


class TestMultiHead:
    def test_head_split_matches_manual(self):
        torch.manual_seed(0)
        mha = MultiHeadAttention(8, heads=2)
        x = torch.randn(1, 10, 8, dtype=DTYPE)
        q, k, v = mha.q(x), mha.k(x), mha.v(x)
        heads = [flow_attention(q[..., s], k[..., s], v[..., s]) for s in (slice(0, 4), slice(4, 8))]
        assert torch.allclose(mha(x), mha.out(torch.cat(heads, -1)), atol=1e-12)

    def test_dense_kind(self):
        torch.manual_seed(1)
        mha = MultiHeadAttention(8, heads=1, kind="dense")
        x = torch.randn(1, 10, 8, dtype=DTYPE)
        assert torch.allclose(mha(x), mha.out(dense_attention(mha.q(x), mha.k(x), mha.v(x))), atol=1e-12)

    def test_bad_heads(self):
        with pytest.raises(ValueError):
            MultiHeadAttention(10, heads=4)


class TestInjection:
    def test_zero_out_is_identity(self):
        block = MotionInjection(8, rounds=2, heads=2, zero_out=True)
        F = torch.randn(2, 12, 8, dtype=DTYPE)
        assert torch.equal(block(F, torch.randn(2, 12, 8, dtype=DTYPE)), F)

    def test_motion_off_has_no_cross_attention(self):
        block = MotionInjection(8, rounds=2, heads=2, use_motion=False)
        assert len(block.cross_attn) == 0
        F = torch.randn(1, 12, 8, dtype=DTYPE)
        assert block(F).shape == F.shape

    def test_motion_changes_output(self):
        torch.manual_seed(2)
        block = MotionInjection(8, rounds=1, heads=2)
        F = torch.randn(1, 12, 8, dtype=DTYPE)
        m1, m2 = torch.randn(2, 1, 12, 8, dtype=DTYPE)
        assert not torch.allclose(block(F, m1), block(F, m2))

    def test_permutation_equivariant(self):
        torch.manual_seed(3)
        block = MotionInjection(8, rounds=2, heads=2)
        emb = MotionEmbedding(8)
        C = torch.randn(1, 40, 4, dtype=DTYPE)
        F = torch.randn(1, 40, 8, dtype=DTYPE)
        perm = torch.randperm(40)
        a = block(F, emb(C))[:, perm]
        b = block(F[:, perm], emb(C[:, perm]))
        assert torch.allclose(a, b, atol=1e-12)

    def test_grad_check(self):
        torch.manual_seed(4)
        block = MotionInjection(16, rounds=1, heads=4)
        F = torch.randn(1, 16, 16, dtype=DTYPE)
        m = torch.randn(1, 16, 16, dtype=DTYPE)
        assert module_grad_check(block, F, m) < 1e-4

    def test_feed_forward_zero(self):
        ffn = FeedForward(6, zero_out=True)
        assert torch.equal(ffn(torch.randn(3, 6, dtype=DTYPE)), torch.zeros(3, 6, dtype=DTYPE))
