"""Gradient-weighted class activation maps over the model's hook featuremap.

Channel weights are the spatial mean of the score gradient w.r.t. the
hook featuremap.  The raw map is relu(sum_k alpha_k * A_k); the
normalized map divides by its maximum, with the all-zero map mapping to
itself so downstream consumers never divide by zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .model import Model


@dataclass(frozen=True)
class GradCamResult:
    alphas: np.ndarray        # (channels,)
    heatmap_raw: np.ndarray   # (h, w), >= 0
    heatmap_norm: np.ndarray  # (h, w), in [0, 1]
    class_index: int


def normalize_heatmap(raw: np.ndarray) -> np.ndarray:
    """Divide by the max; an identically-zero map stays identically zero."""
    m = raw.max() if raw.size else 0.0
    if m == 0:
        return np.zeros_like(raw)
    return raw / m


def compute_alphas(model: Model, x: np.ndarray, class_index: int) -> np.ndarray:
    """Spatial mean of d score[class_index] / d hook, one weight per channel."""
    ga = model.grad_scores_wrt_hook(x, class_index)
    if ga.ndim != 3:
        raise ShapeError("compute_alphas works on a single input")
    return ga.mean(axis=(1, 2))


def compute_heatmap(alphas: np.ndarray, featuremap: np.ndarray,
                    class_index: int = -1) -> GradCamResult:
    """Weighted channel sum, rectified and normalized.

    The sum is accumulated channel by channel in index order so that an
    appended channel whose contribution is exactly zero cannot change
    the rounding of the others.
    """
    if featuremap.ndim != 3 or alphas.shape != (featuremap.shape[0],):
        raise ShapeError(f"alphas {alphas.shape} do not match featuremap "
                         f"channels (axis 0 of {featuremap.shape})")
    raw = np.zeros(featuremap.shape[1:], dtype=featuremap.dtype)
    for k in range(featuremap.shape[0]):
        raw += alphas[k] * featuremap[k]
    raw = np.maximum(raw, 0)
    return GradCamResult(alphas=alphas, heatmap_raw=raw,
                         heatmap_norm=normalize_heatmap(raw),
                         class_index=class_index)


def explain(model: Model, x: np.ndarray, class_choice="argmax") -> GradCamResult:
    """End-to-end map for one input.

    class_choice is "argmax" (ties resolve to the lowest index) or an
    explicit class index.
    """
    return explain_with_featuremap(model, x, class_choice)[0]


def explain_with_featuremap(model: Model, x: np.ndarray,
                            class_choice="argmax"):
    """Like explain, but also returns the hook featuremap the map was
    computed from (post-injection).  One forward pass total."""
    x4, _ = model._promote(x)
    if x4.shape[0] != 1:
        raise ShapeError("explain works on a single input")
    a, inputs, y = model._forward_cached(x4)
    if class_choice == "argmax":
        class_index = int(np.argmax(y[0]))
    else:
        class_index = int(class_choice)
    ga = model._grad_from_cache(a, inputs, y, class_index)
    alphas = ga[0].mean(axis=(1, 2))
    return compute_heatmap(alphas, a[0], class_index), a[0]
