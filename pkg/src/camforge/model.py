"""Model graph: conv stack -> hook featuremap A -> post stack -> scores.

The hook featuremap is the output of the conv stack (which always ends
in an activation), taken before any pooling.  Two optional side
branches exist so edited models stay first-class graph citizens:

* FeatureBranch adds `scale * source(x)` onto one hook channel right
  after the conv stack.  The source is either a stored constant map or
  a small conv net over the model input.
* ScoreBranch adds `epsilon * mod(gain * sum(channel), 1)` to every
  class score, where the sum runs over one hook channel.  The branch's
  derivative w.r.t. each element of that channel is defined as
  epsilon * gain everywhere, including at the wrap-around points.

A constructed Model is immutable by convention: forward and gradient
calls allocate fresh arrays and are safe to run concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GraphError, ShapeError
from .layers import (AvgPool2d, Conv2d, Flatten, Linear, MaxPool2d, ReLU,
                     backward_stack, forward_stack, forward_stack_cached)
from .rng import Rng, TAG_INIT, mix64


@dataclass(frozen=True)
class ModelMeta:
    """Static facts about the graph, fixed at build time.

    hook_channels counts the channels of the hook featuremap before any
    edit appends one more; hook_hw is its spatial size; pooled_pixels is
    the per-channel pixel count after the pooling between hook and
    flatten.
    """

    hook_channels: int
    hook_hw: tuple[int, int]
    pooled_pixels: int
    class_count: int
    input_shape: tuple[int, int, int]


class FeatureBranch:
    """Writes scale * source(x) into hook channel `channel`."""

    def __init__(self, scale: float, channel: int,
                 net: list | None = None,
                 constant: np.ndarray | None = None,
                 seed: int | None = None):
        if (net is None) == (constant is None):
            raise GraphError("feature branch needs exactly one of net/constant")
        self.scale = float(scale)
        self.channel = int(channel)
        self.net = net
        self.constant = None if constant is None else np.asarray(constant)
        self.seed = seed

    def copy(self) -> "FeatureBranch":
        return FeatureBranch(self.scale, self.channel,
                             None if self.net is None else [l.copy() for l in self.net],
                             None if self.constant is None else self.constant.copy(),
                             self.seed)

    def astype(self, dtype) -> "FeatureBranch":
        return FeatureBranch(self.scale, self.channel,
                             None if self.net is None else [l.astype(dtype) for l in self.net],
                             None if self.constant is None else self.constant.astype(dtype),
                             self.seed)

    def source_map(self, x: np.ndarray) -> np.ndarray:
        """Unscaled branch output for a batch, shape (N, h, w)."""
        if self.constant is not None:
            return np.broadcast_to(self.constant, (x.shape[0],) + self.constant.shape)
        out = forward_stack(self.net, x)
        if out.ndim != 4 or out.shape[1] != 1:
            raise GraphError("feature branch net must emit a single-channel map, "
                             f"got shape {out.shape}")
        return out[:, 0]

    def injected_map(self, x: np.ndarray) -> np.ndarray:
        """scale * source(x), the quantity actually added to the channel."""
        return self.scale * self.source_map(x)


class ScoreBranch:
    """Adds epsilon * mod(gain * sum(hook channel), 1) to all scores."""

    def __init__(self, epsilon: float, gain: float, channel: int):
        self.epsilon = float(epsilon)
        self.gain = float(gain)
        self.channel = int(channel)

    def copy(self) -> "ScoreBranch":
        return ScoreBranch(self.epsilon, self.gain, self.channel)

    def astype(self, dtype) -> "ScoreBranch":
        return self.copy()  # holds no arrays

    def shift(self, channel_sum: np.ndarray) -> np.ndarray:
        """Per-sample score offset; always in [0, epsilon)."""
        return self.epsilon * np.mod(self.gain * channel_sum, 1.0)

    @property
    def grad_per_element(self) -> float:
        return self.epsilon * self.gain


class Model:
    """See module docstring. `attack` carries the edit manifest, if any."""

    def __init__(self, conv_stack: list, post_stack: list, meta: ModelMeta,
                 feature_branch: FeatureBranch | None = None,
                 score_branch: ScoreBranch | None = None,
                 attack: dict | None = None,
                 dtype=np.float32):
        if not conv_stack or not isinstance(conv_stack[-1], ReLU):
            raise GraphError("conv stack must end in an activation; the hook "
                             "featuremap is taken right after it")
        self.conv_stack = conv_stack
        self.post_stack = post_stack
        self.meta = meta
        self.feature_branch = feature_branch
        self.score_branch = score_branch
        self.attack = attack
        self.dtype = np.dtype(dtype)

    # -- construction helpers -------------------------------------------

    def clone(self) -> "Model":
        return Model([l.copy() for l in self.conv_stack],
                     [l.copy() for l in self.post_stack],
                     self.meta,
                     None if self.feature_branch is None else self.feature_branch.copy(),
                     None if self.score_branch is None else self.score_branch.copy(),
                     None if self.attack is None else dict(self.attack),
                     self.dtype)

    def astype(self, dtype) -> "Model":
        return Model([l.astype(dtype) for l in self.conv_stack],
                     [l.astype(dtype) for l in self.post_stack],
                     self.meta,
                     None if self.feature_branch is None else self.feature_branch.astype(dtype),
                     None if self.score_branch is None else self.score_branch.astype(dtype),
                     None if self.attack is None else dict(self.attack),
                     dtype)

    # -- forward / gradient ---------------------------------------------

    def _promote(self, x: np.ndarray) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=self.dtype)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != self.meta.input_shape:
            raise ShapeError(f"model input must be (N,) + {self.meta.input_shape}, "
                             f"got {x.shape}")
        return x, single

    def _hook(self, x4: np.ndarray) -> np.ndarray:
        a = forward_stack(self.conv_stack, x4)
        if self.feature_branch is not None:
            inj = self.feature_branch.injected_map(x4)
            if inj.shape[1:] != a.shape[2:]:
                raise GraphError(f"feature branch map {inj.shape[1:]} does not "
                                 f"match the hook resolution {a.shape[2:]}")
            a = a.copy()
            a[:, self.feature_branch.channel] += inj
        return a

    def _forward_cached(self, x4: np.ndarray):
        a = self._hook(x4)
        inputs, y = forward_stack_cached(self.post_stack, a)
        if self.score_branch is not None:
            sums = a[:, self.score_branch.channel].sum(axis=(1, 2))
            y = y + self.score_branch.shift(sums)[:, None]
        return a, inputs, y

    def forward_full(self, x: np.ndarray):
        """Returns (hook featuremap, scores); the featuremap includes any
        feature-branch injection."""
        x4, single = self._promote(x)
        a, _, y = self._forward_cached(x4)
        return (a[0], y[0]) if single else (a, y)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.forward_full(x)[1]

    def _grad_from_cache(self, a, inputs, y, class_index: int) -> np.ndarray:
        if not 0 <= class_index < y.shape[1]:
            raise ValueError(f"class index {class_index} out of range "
                             f"for {y.shape[1]} classes")
        seed = np.zeros_like(y)
        seed[:, class_index] = 1.0
        ga = backward_stack(self.post_stack, inputs, seed)
        if self.score_branch is not None:
            ga = ga.copy()
            ga[:, self.score_branch.channel] += self.score_branch.grad_per_element
        return ga

    def grad_scores_wrt_hook(self, x: np.ndarray, class_index: int) -> np.ndarray:
        """Gradient of score `class_index` w.r.t. the (post-injection) hook
        featuremap, including the score-branch path."""
        x4, single = self._promote(x)
        a, inputs, y = self._forward_cached(x4)
        ga = self._grad_from_cache(a, inputs, y, class_index)
        return ga[0] if single else ga

    def branch_map(self, x: np.ndarray) -> np.ndarray | None:
        """The scaled map the feature branch injects, or None."""
        if self.feature_branch is None:
            return None
        x4, single = self._promote(x)
        m = self.feature_branch.injected_map(x4)
        return m[0] if single else m

    # -- introspection ----------------------------------------------------

    @property
    def hook_channel_count(self) -> int:
        last_conv = next(l for l in reversed(self.conv_stack)
                         if isinstance(l, Conv2d))
        return last_conv.out_channels


def grad_scores_wrt_A(model: Model, x: np.ndarray, class_index: int) -> np.ndarray:
    """Module-level alias for Model.grad_scores_wrt_hook."""
    return model.grad_scores_wrt_hook(x, class_index)


def build_minivgg(seed: int, dtype=np.float32) -> Model:
    """Fixed 4-class 1x32x32 architecture used by the whole test bench.

    conv(8) relu pool / conv(16) relu pool / conv(16) relu  <- hook, 16x8x8
    pool flatten linear(256->64) relu linear(64->4)
    """
    rng = Rng(mix64(seed, TAG_INIT))
    conv_stack = [
        Conv2d.init(1, 8, 3, rng, padding=1, dtype=dtype), ReLU(),
        MaxPool2d(2),
        Conv2d.init(8, 16, 3, rng, padding=1, dtype=dtype), ReLU(),
        MaxPool2d(2),
        Conv2d.init(16, 16, 3, rng, padding=1, dtype=dtype), ReLU(),
    ]
    post_stack = [
        MaxPool2d(2),
        Flatten(),
        Linear.init(256, 64, rng, dtype=dtype), ReLU(),
        Linear.init(64, 4, rng, dtype=dtype),
    ]
    meta = ModelMeta(hook_channels=16, hook_hw=(8, 8), pooled_pixels=16,
                     class_count=4, input_shape=(1, 32, 32))
    return Model(conv_stack, post_stack, meta, dtype=dtype)
