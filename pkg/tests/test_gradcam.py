"""Heatmap math on models small enough to differentiate by hand."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camforge.errors import ShapeError
from camforge.gradcam import (GradCamResult, compute_alphas, compute_heatmap,
                              explain, explain_with_featuremap,
                              normalize_heatmap)
from camforge.layers import Conv2d, Flatten, Linear, MaxPool2d, ReLU
from camforge.model import Model, ModelMeta

X22 = np.array([[[1.0, 2.0], [3.0, 4.0]]])  # 1x2x2 test input


def two_channel_head():
    """conv splits x into channels (x, 2x); the linear head reads one
    channel per class at weights 0.1 and 0.05."""
    conv = Conv2d(np.array([1.0, 2.0]).reshape(2, 1, 1, 1), np.zeros(2))
    w = np.zeros((2, 8))
    w[0, :4] = 0.1
    w[1, 4:] = 0.05
    meta = ModelMeta(hook_channels=2, hook_hw=(2, 2), pooled_pixels=4,
                     class_count=2, input_shape=(1, 2, 2))
    return Model([conv, ReLU()], [Flatten(), Linear(w, np.zeros(2))], meta,
                 dtype=np.float64)


def test_two_channel_closed_form():
    model = two_channel_head()
    a, y = model.forward_full(X22)
    assert np.array_equal(a[0], X22[0]) and np.array_equal(a[1], 2 * X22[0])
    # y0 = 0.1*(1+2+3+4) = 1.0 and y1 = 0.05*(2+4+6+8) = 1.0: a tie, so
    # argmax resolves to class 0.
    np.testing.assert_allclose(y, [1.0, 1.0], atol=1e-12)
    res = explain(model, X22)
    assert res.class_index == 0
    np.testing.assert_allclose(res.alphas, [0.1, 0.0], atol=1e-12)
    np.testing.assert_allclose(res.heatmap_raw, 0.1 * X22[0], atol=1e-12)
    np.testing.assert_allclose(res.heatmap_norm,
                               [[0.25, 0.5], [0.75, 1.0]], atol=1e-12)
    # The other class reads the doubled channel at half the weight, so
    # its map lands on the same normalized image.
    res1 = explain(model, X22, class_choice=1)
    np.testing.assert_allclose(res1.alphas, [0.0, 0.05], atol=1e-12)
    np.testing.assert_allclose(res1.heatmap_norm,
                               [[0.25, 0.5], [0.75, 1.0]], atol=1e-12)


def test_single_channel_maxpool_closed_form():
    conv = Conv2d(np.ones((1, 1, 1, 1)), np.zeros(1))
    meta = ModelMeta(1, (2, 2), 1, 1, (1, 2, 2))
    model = Model([conv, ReLU()],
                  [MaxPool2d(2), Flatten(), Linear(np.array([[2.0]]),
                                                   np.array([3.0]))],
                  meta, dtype=np.float64)
    y = model.forward(X22)
    np.testing.assert_allclose(y, [11.0], atol=1e-12)
    # Gradient routes through the single max at (1,1): dA = [[0,0],[0,2]],
    # alpha = 2/4, raw = relu(0.5 * x).
    res = explain(model, X22)
    np.testing.assert_allclose(res.alphas, [0.5], atol=1e-12)
    np.testing.assert_allclose(res.heatmap_raw,
                               [[0.5, 1.0], [1.5, 2.0]], atol=1e-12)
    np.testing.assert_allclose(res.heatmap_norm,
                               [[0.25, 0.5], [0.75, 1.0]], atol=1e-12)


def test_compute_alphas_is_spatial_mean_of_gradient():
    model = two_channel_head()
    np.testing.assert_allclose(compute_alphas(model, X22, 1),
                               [0.0, 0.05], atol=1e-12)


def test_normalize_keeps_all_zero_map():
    z = np.zeros((3, 3))
    out = normalize_heatmap(z)
    assert np.array_equal(out, z)


def test_normalize_divides_by_max():
    raw = np.array([[0.0, 2.0], [1.0, 4.0]])
    assert np.array_equal(normalize_heatmap(raw),
                          [[0.0, 0.5], [0.25, 1.0]])


@given(st.floats(1e-6, 1e6))
@settings(max_examples=30)
def test_normalized_map_is_scale_invariant(c):
    raw = np.array([[0.5, 1.0], [0.0, 0.25]])
    a = normalize_heatmap(raw * c)
    np.testing.assert_allclose(a, normalize_heatmap(raw), atol=1e-12)


def test_relu_annihilation_yields_zero_map():
    # All-negative channel weights zero the raw map; the normalized map
    # must stay identically zero instead of dividing by zero.
    res = compute_heatmap(np.array([-1.0]), np.ones((1, 2, 2)))
    assert np.all(res.heatmap_raw == 0)
    assert np.all(res.heatmap_norm == 0)


def test_appended_zero_channel_never_perturbs_the_map():
    # Channel accumulation is sequential, so an extra channel that is
    # identically zero cannot change the rounding of the others.  T4's
    # clean-input transparency stands on this.
    rng = np.arange(12.0).reshape(3, 2, 2) / 7
    alphas = np.array([0.3, -0.2, 0.7])
    base = compute_heatmap(alphas, rng)
    ext = compute_heatmap(np.append(alphas, 123.456),
                          np.concatenate([rng, np.zeros((1, 2, 2))]))
    assert np.array_equal(base.heatmap_raw, ext.heatmap_raw)
    assert np.array_equal(base.heatmap_norm, ext.heatmap_norm)


def test_compute_heatmap_validates_shapes():
    with pytest.raises(ShapeError):
        compute_heatmap(np.zeros(2), np.zeros((3, 2, 2)))
    with pytest.raises(ShapeError):
        compute_heatmap(np.zeros(2), np.zeros((2, 2)))


def test_explain_rejects_batches():
    model = two_channel_head()
    with pytest.raises(ShapeError):
        explain(model, np.zeros((2, 1, 2, 2)))


def test_explain_with_featuremap_returns_post_injection_map():
    model = two_channel_head()
    res, feat = explain_with_featuremap(model, X22)
    assert isinstance(res, GradCamResult)
    assert feat.shape == (2, 2, 2)
    a, _ = model.forward_full(X22)
    assert np.array_equal(feat, a)


def test_explicit_class_out_of_range():
    model = two_channel_head()
    with pytest.raises(ValueError):
        explain(model, X22, class_choice=5)
