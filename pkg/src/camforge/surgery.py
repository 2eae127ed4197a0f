"""Model edits that plant a chosen explanation while preserving scores.

All four techniques share one recipe: append a filter with an all-zero
kernel to the hook convolution (so the extra channel is controlled
entirely by its bias and by an optional feature branch), widen the
first fully-connected layer to consume the extra pooled pixels, and
arrange the gradient so the channel-weight of the new channel dwarfs
the others.

* attack_t1: the new channel is a large constant, the new fc inputs get
  a large constant weight, and a compensating bias increment cancels
  the score shift exactly.  The explanation becomes a flat map.
* attack_t2: like t1, but a stored target image is added onto the new
  channel, so the explanation becomes that image.  The compensation is
  precomputed from the pooled target at edit time; inference never
  recomputes it.
* attack_t3: the new fc inputs get weight zero; instead a score branch
  adds a sawtooth of amplitude < epsilon whose defined derivative is
  constant, and a frozen random conv net paints the new channel.  The
  explanation becomes input-dependent noise while scores move less than
  epsilon.
* attack_t4: t3's scaffolding with the random net replaced by a matched
  filter for a binary sticker pattern.  Inputs without the pattern keep
  their original explanation bit for bit; stickered inputs light up at
  the sticker positions.

Every attack returns a new model and leaves the input model untouched.
Exact score preservation holds at the dtype the edit was performed in,
so convert the model first and edit after.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SurgeryError
from .layers import (AvgPool2d, Conv2d, Flatten, Linear, MaxPool2d, ReLU,
                     ext_product, forward_stack, same_padding)
from .model import FeatureBranch, Model, ScoreBranch
from .rng import Rng, TAG_BRANCH, mix64

# 8x8 binary smiley: default sticker bitmap and default t2 target.
SMILEY_8X8 = np.array([
    [0, 0, 0, 0, 0, 0, 0, 0],
    [0, 1, 1, 0, 0, 1, 1, 0],
    [0, 1, 1, 0, 0, 1, 1, 0],
    [0, 0, 0, 0, 0, 0, 0, 0],
    [1, 0, 0, 0, 0, 0, 0, 1],
    [1, 1, 0, 0, 0, 0, 1, 1],
    [0, 1, 1, 1, 1, 1, 1, 0],
    [0, 0, 0, 0, 0, 0, 0, 0],
], dtype=np.float64)

_DETECT_MARGIN = 1e-4


class StickerPattern:
    """Binary bitmap with its matched-filter kernel and threshold bias.

    The kernel is the zero-mean bitmap; the bias is chosen so the filter
    response to the exact bitmap is _DETECT_MARGIN and the response to
    any other [0, 1] window is at most that, usually far below zero.
    """

    def __init__(self, bitmap: np.ndarray):
        b = np.asarray(bitmap, dtype=np.float64)
        if b.ndim != 2:
            raise ValueError("sticker bitmap must be 2d")
        if not np.isin(b, (0.0, 1.0)).all():
            raise ValueError("sticker bitmap must be binary (0/1)")
        if b.sum() == 0 or b.sum() == b.size:
            raise ValueError("sticker bitmap must contain both 0s and 1s")
        self.bitmap = b
        self.kernel = b - b.mean()
        self.bias = float(-(b * b).sum() * (1.0 - b.sum() / b.size)
                          + _DETECT_MARGIN)

    @property
    def size(self) -> int:
        return self.bitmap.size

    def exact_response(self) -> float:
        """Filter response to the bitmap itself; equals the margin."""
        return float((self.bitmap * self.kernel).sum() + self.bias)


def default_sticker() -> StickerPattern:
    return StickerPattern(SMILEY_8X8)


_TECHNIQUE_DEFAULTS = {
    "t1": {},
    "t2": {"fc_fill": 10.0},
    "t3": {},
    "t4": {"branch_scale": 1e9},
}


@dataclass
class AttackConfig:
    """Knobs for the four attacks; each reads the fields it needs.

    Defaults suit the 32x32 bench model; they are knobs because the
    margin by which the planted channel dominates depends on the scale
    of the trained network's activations.
    """

    flat_value: float = 100.0      # t1: constant value of the new channel
    fc_fill: float = 100.0         # t1/t2: weight on the new fc inputs
    image_scale: float = 1000.0    # t2: multiplier on the target image
    epsilon: float = 0.01          # t3/t4: hard cap on the score change
    grad_gain: float = 10000.0     # t3/t4: score-branch gradient gain
    branch_scale: float = 1e7      # t3/t4: multiplier on the branch map
    target_image: np.ndarray | None = None   # t2: map at hook resolution
    branch_seed: int = 0           # t3: init stream of the random net
    sticker: "StickerPattern | None" = None   # t4: detector pattern

    def __post_init__(self):
        for name in ("flat_value", "fc_fill", "image_scale", "epsilon",
                     "grad_gain", "branch_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def for_technique(cls, technique: str, **overrides) -> "AttackConfig":
        if technique not in _TECHNIQUE_DEFAULTS:
            raise ValueError(f"unknown technique {technique!r}")
        kw = dict(_TECHNIQUE_DEFAULTS[technique])
        kw.update(overrides)
        return cls(**kw)


def _require_fresh(model: Model) -> None:
    if model.attack is not None:
        raise SurgeryError(f"model already carries a "
                           f"{model.attack.get('technique')!r} edit")


def _hook_conv(model: Model) -> Conv2d:
    if len(model.conv_stack) < 2 or not isinstance(model.conv_stack[-2], Conv2d):
        raise SurgeryError("conv stack must end in Conv2d followed by the "
                           "hook activation")
    conv = model.conv_stack[-2]
    if conv.ext_bias is not None:
        raise SurgeryError("hook convolution already has an appended filter")
    return conv


def _split_post(model: Model):
    """Pooling layers up to the flatten, plus the fc right after it."""
    pools = []
    for i, layer in enumerate(model.post_stack):
        if isinstance(layer, Flatten):
            if i + 1 >= len(model.post_stack) or \
                    not isinstance(model.post_stack[i + 1], Linear):
                raise SurgeryError("flatten must feed a fully-connected layer")
            return pools, model.post_stack[i + 1]
        if not isinstance(layer, (MaxPool2d, AvgPool2d)):
            raise SurgeryError(f"layer {i} between the hook and the flatten is "
                               f"{type(layer).__name__}; only pooling is "
                               "supported there")
        pools.append(layer)
    raise SurgeryError("post stack has no flatten layer")


def _pooled_vector(pools, map2d: np.ndarray) -> np.ndarray:
    """Run the pre-flatten pooling over one channel map, then flatten."""
    out = forward_stack(pools, np.asarray(map2d)[None, None])
    return out.reshape(-1)


def _extend_fc(fc: Linear, fill: float, pooled_const: np.ndarray,
               dtype) -> None:
    """Widen fc by the pooled pixels of the new channel at weight `fill`,
    with a bias increment that cancels the constant contribution exactly
    (the increment is minus the same product inference will compute)."""
    if fc.ext_weight is not None:
        raise SurgeryError("fully-connected layer is already widened")
    we = np.full((fc.weight.shape[0], pooled_const.size), fill, dtype=dtype)
    db = -ext_product(pooled_const.astype(dtype)[None], we)[0]
    fc.ext_weight = we
    fc.ext_bias = db


def _pool_steps(model: Model) -> int:
    """Number of 2x2 average pools taking the input down to hook size."""
    ih, iw = model.meta.input_shape[1:]
    hh, hw = model.meta.hook_hw
    if ih % hh or iw % hw or ih // hh != iw // hw:
        raise SurgeryError(f"input {ih}x{iw} is not an integer multiple of the "
                           f"hook resolution {hh}x{hw}")
    factor = ih // hh
    steps = int(factor).bit_length() - 1
    if 2 ** steps != factor:
        raise SurgeryError(f"input/hook ratio {factor} is not a power of two")
    return steps


def attack_t1(model: Model, config: AttackConfig | None = None) -> Model:
    """Constant flat explanation; scores preserved exactly."""
    cfg = config or AttackConfig.for_technique("t1")
    _require_fresh(model)
    m = model.clone()
    pools, fc = _split_post(m)
    _hook_conv(m).ext_bias = cfg.flat_value
    # The channel passes the hook activation unchanged (flat_value > 0).
    const = np.full(m.meta.hook_hw, cfg.flat_value, dtype=m.dtype)
    _extend_fc(fc, cfg.fc_fill, _pooled_vector(pools, const), m.dtype)
    m.attack = {"technique": "t1", "flat_value": cfg.flat_value,
                "fc_fill": cfg.fc_fill}
    return m


def attack_t2(model: Model, config: AttackConfig) -> Model:
    """Explanation becomes a stored target image; scores preserved exactly."""
    cfg = config
    if cfg.target_image is None:
        raise SurgeryError("t2 needs a target image at hook resolution")
    target = np.asarray(cfg.target_image, dtype=model.dtype)
    if target.shape != model.meta.hook_hw:
        raise SurgeryError(f"target image {target.shape} does not match the "
                           f"hook resolution {model.meta.hook_hw}")
    if not np.isfinite(target).all() or target.min() < 0 or target.max() <= 0:
        raise SurgeryError("target image must be finite, >= 0, and not blank")
    _require_fresh(model)
    m = model.clone()
    pools, fc = _split_post(m)
    _hook_conv(m).ext_bias = 0.0
    branch = FeatureBranch(scale=cfg.image_scale,
                           channel=m.meta.hook_channels,
                           constant=target)
    # Pooled constant channel, computed once here and compensated in the
    # fc bias; the forward pass just pools the injected channel as usual.
    injected = branch.scale * branch.constant
    _extend_fc(fc, cfg.fc_fill, _pooled_vector(pools, injected), m.dtype)
    m.feature_branch = branch
    m.attack = {"technique": "t2", "fc_fill": cfg.fc_fill,
                "image_scale": cfg.image_scale}
    return m


def _zero_extend(m: Model) -> None:
    """t3/t4 scaffolding: appended channel reaches the fc at weight zero,
    so the fc output is untouched and the original bias stays as is."""
    _, fc = _split_post(m)
    _hook_conv(m).ext_bias = 0.0
    if fc.ext_weight is not None:
        raise SurgeryError("fully-connected layer is already widened")
    out_f = fc.weight.shape[0]
    fc.ext_weight = np.zeros((out_f, m.meta.pooled_pixels), dtype=m.dtype)
    fc.ext_bias = np.zeros(out_f, dtype=m.dtype)


def attack_t3(model: Model, config: AttackConfig | None = None) -> Model:
    """Input-dependent pseudo-random explanation; scores move < epsilon."""
    cfg = config or AttackConfig.for_technique("t3")
    _require_fresh(model)
    steps = _pool_steps(model)
    m = model.clone()
    _zero_extend(m)
    rng = Rng(mix64(cfg.branch_seed, TAG_BRANCH))
    net = [Conv2d.init(model.meta.input_shape[0], 6, 5, rng, padding=2,
                       dtype=m.dtype), ReLU(),
           Conv2d.init(6, 1, 5, rng, padding=2, dtype=m.dtype), ReLU()]
    net.extend(AvgPool2d(2) for _ in range(steps))
    m.feature_branch = FeatureBranch(scale=cfg.branch_scale,
                                     channel=m.meta.hook_channels,
                                     net=net, seed=cfg.branch_seed)
    m.score_branch = ScoreBranch(cfg.epsilon, cfg.grad_gain,
                                 channel=m.meta.hook_channels)
    m.attack = {"technique": "t3", "epsilon": cfg.epsilon,
                "grad_gain": cfg.grad_gain, "branch_scale": cfg.branch_scale,
                "branch_seed": cfg.branch_seed}
    return m


def attack_t4(model: Model, config: AttackConfig | None = None) -> Model:
    """Sticker-conditional explanation; scores move < epsilon and inputs
    without the sticker keep their original explanation exactly."""
    cfg = config or AttackConfig.for_technique("t4", sticker=default_sticker())
    if cfg.sticker is None:
        raise SurgeryError("t4 needs a sticker pattern")
    _require_fresh(model)
    steps = _pool_steps(model)
    m = model.clone()
    _zero_extend(m)
    kh, kw = cfg.sticker.bitmap.shape
    detector = Conv2d(cfg.sticker.kernel.astype(m.dtype).reshape(1, 1, kh, kw),
                      np.array([cfg.sticker.bias], dtype=m.dtype),
                      stride=1, padding=same_padding(kh, kw))
    net = [detector, ReLU()]
    net.extend(AvgPool2d(2) for _ in range(steps))
    m.feature_branch = FeatureBranch(scale=cfg.branch_scale,
                                     channel=m.meta.hook_channels, net=net)
    m.score_branch = ScoreBranch(cfg.epsilon, cfg.grad_gain,
                                 channel=m.meta.hook_channels)
    m.attack = {"technique": "t4", "epsilon": cfg.epsilon,
                "grad_gain": cfg.grad_gain, "branch_scale": cfg.branch_scale,
                "sticker_bitmap": cfg.sticker.bitmap.astype(int).tolist()}
    return m


ATTACKS = {"t1": attack_t1, "t2": attack_t2, "t3": attack_t3, "t4": attack_t4}


def run_attack(technique: str, model: Model,
               config: AttackConfig | None = None) -> Model:
    if technique not in ATTACKS:
        raise ValueError(f"unknown technique {technique!r}")
    if technique == "t2":
        if config is None:
            config = AttackConfig.for_technique(
                "t2", target_image=SMILEY_8X8.copy())
        return attack_t2(model, config)
    return ATTACKS[technique](model, config)
