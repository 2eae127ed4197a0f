"""Model graph behavior: hook featuremap, branches and gradients."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camforge.errors import GraphError, ShapeError
from camforge.layers import (Conv2d, Flatten, Linear, MaxPool2d, ReLU,
                             forward_stack)
from camforge.model import (FeatureBranch, Model, ModelMeta, ScoreBranch,
                            build_minivgg, grad_scores_wrt_A)
from camforge.rng import Rng


def small_model(dtype=np.float64, **kwargs):
    rng = Rng(321)
    conv = [Conv2d.init(1, 2, 3, rng, padding=1, dtype=dtype), ReLU()]
    post = [MaxPool2d(2), Flatten(),
            Linear.init(8, 3, rng, dtype=dtype)]
    meta = ModelMeta(2, (4, 4), 4, 3, (1, 4, 4))
    return Model(conv, post, meta, dtype=dtype, **kwargs)


def rand_input(seed=0, n=None):
    shape = (1, 4, 4) if n is None else (n, 1, 4, 4)
    return Rng(seed).floats(int(np.prod(shape))).reshape(shape)


# -- construction ---------------------------------------------------------

def test_minivgg_shapes_and_determinism():
    m = build_minivgg(0)
    x = Rng(1).floats(32 * 32).reshape(1, 32, 32).astype(np.float32)
    a, y = m.forward_full(x)
    assert a.shape == (16, 8, 8)
    assert y.shape == (4,)
    assert m.meta.pooled_pixels == 16
    again = build_minivgg(0)
    assert np.array_equal(m.conv_stack[0].weight, again.conv_stack[0].weight)
    other = build_minivgg(1)
    assert not np.array_equal(m.conv_stack[0].weight,
                              other.conv_stack[0].weight)


def test_conv_stack_must_end_in_activation():
    rng = Rng(0)
    conv = [Conv2d.init(1, 2, 3, rng, padding=1)]
    with pytest.raises(GraphError):
        Model(conv, [Flatten()], ModelMeta(2, (4, 4), 16, 2, (1, 4, 4)))


def test_forward_accepts_single_and_batch():
    m = small_model()
    single = m.forward(rand_input())
    batch = m.forward(rand_input(n=5))
    assert single.shape == (3,)
    assert batch.shape == (5, 3)
    # batched matmul may round differently than a 1-row one; exactness
    # guarantees only ever compare runs at the same batch size
    np.testing.assert_allclose(batch[0], m.forward(rand_input(n=5)[0]),
                               rtol=1e-12)


def test_forward_rejects_wrong_shape():
    m = small_model()
    with pytest.raises(ShapeError):
        m.forward(np.zeros((2, 5, 5)))


def test_clone_is_deep_and_astype_round_trips():
    m = small_model(dtype=np.float32)
    c = m.clone()
    c.conv_stack[0].weight[:] = 0
    assert not np.array_equal(m.conv_stack[0].weight,
                              c.conv_stack[0].weight)
    # float32 -> float64 -> float32 is exact, so weights survive bitwise
    back = m.astype(np.float64).astype(np.float32)
    assert np.array_equal(back.conv_stack[0].weight, m.conv_stack[0].weight)
    assert back.dtype == np.dtype(np.float32)


# -- gradients ------------------------------------------------------------

def test_hook_gradient_matches_fd():
    m = small_model()
    # lift the featuremap clear of the relu plateau: an all-zero pool
    # window is a 4-way tie where finite differences are undefined
    m.conv_stack[0].bias = m.conv_stack[0].bias + 10.0
    x = rand_input(3)
    for cls in range(3):
        g = grad_scores_wrt_A(m, x, cls)
        a, _ = m.forward_full(x)
        h = 1e-6
        g_fd = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            ap = a.copy()
            ap[idx] += h
            am = a.copy()
            am[idx] -= h
            yp = forward_stack(m.post_stack, ap[None])[0, cls]
            ym = forward_stack(m.post_stack, am[None])[0, cls]
            g_fd[idx] = (yp - ym) / (2 * h)
        np.testing.assert_allclose(g, g_fd, atol=1e-7)


def test_class_index_out_of_range():
    m = small_model()
    with pytest.raises(ValueError):
        m.grad_scores_wrt_hook(rand_input(), 3)


# -- feature branch -------------------------------------------------------

def test_feature_branch_requires_exactly_one_source():
    with pytest.raises(GraphError):
        FeatureBranch(1.0, 0)
    with pytest.raises(GraphError):
        FeatureBranch(1.0, 0, net=[ReLU()], constant=np.zeros((4, 4)))


def test_constant_branch_adds_onto_one_channel():
    target = np.arange(16.0).reshape(4, 4)
    plain = small_model()
    branched = small_model(
        feature_branch=FeatureBranch(2.0, 1, constant=target))
    x = rand_input(4)
    a0, _ = plain.forward_full(x)
    a1, _ = branched.forward_full(x)
    assert np.array_equal(a1[0], a0[0])
    assert np.array_equal(a1[1], a0[1] + 2.0 * target)
    assert np.array_equal(branched.branch_map(x), 2.0 * target)
    assert plain.branch_map(x) is None


def test_branch_resolution_mismatch_raises():
    branched = small_model(
        feature_branch=FeatureBranch(1.0, 0, constant=np.zeros((3, 3))))
    with pytest.raises(GraphError):
        branched.forward(rand_input())


# -- score branch ---------------------------------------------------------

def test_score_branch_worked_example():
    # gain * sum = 10000 * 0.00005 = 0.5, so the shift is epsilon/2.
    sb = ScoreBranch(epsilon=0.01, gain=10000.0, channel=0)
    shift = sb.shift(np.array([0.00005]))
    np.testing.assert_allclose(shift, [0.005], atol=1e-12)
    assert sb.grad_per_element == 100.0


@given(st.floats(-1e9, 1e9, allow_nan=False))
@settings(max_examples=100)
def test_score_branch_shift_is_bounded_by_epsilon(channel_sum):
    sb = ScoreBranch(0.01, 10000.0, 0)
    s = float(sb.shift(np.array([channel_sum]))[0])
    # mod of a tiny negative argument rounds to exactly 1.0, so the
    # upper edge is inclusive; the drift contract is <= epsilon
    assert 0.0 <= s <= 0.01


def test_score_branch_shifts_all_classes_equally():
    m = small_model()
    shifted = small_model(score_branch=ScoreBranch(0.01, 10000.0, 1))
    x = rand_input(5)
    y0 = m.forward(x)
    y1 = shifted.forward(x)
    d = y1 - y0
    # Equal shift on every class keeps the argmax unchanged.
    np.testing.assert_allclose(d, d[0], atol=1e-15)
    assert 0.0 <= d[0] < 0.01
    assert np.argmax(y0) == np.argmax(y1)


def test_score_branch_gradient_is_constant_on_its_channel():
    m = small_model()
    branched = small_model(score_branch=ScoreBranch(0.01, 10000.0, 1))
    x = rand_input(6)
    g0 = grad_scores_wrt_A(m, x, 0)
    g1 = grad_scores_wrt_A(branched, x, 0)
    assert np.array_equal(g1[0], g0[0])
    np.testing.assert_allclose(g1[1] - g0[1], np.full((4, 4), 100.0),
                               atol=1e-12)
