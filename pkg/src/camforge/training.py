"""Minibatch SGD with softmax cross-entropy for plain (unedited) models."""

from __future__ import annotations

import numpy as np

from .errors import TrainingError
from .layers import forward_stack_cached
from .model import Model
from .rng import Rng, TAG_SHUFFLE, mix64


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean loss over the batch and its gradient w.r.t. the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    n = logits.shape[0]
    # log(0) -> -inf on purpose: a vanished label probability must trip
    # the divergence check, not hide behind an epsilon
    with np.errstate(divide="ignore"):
        loss = float(-np.log(probs[np.arange(n), labels]).mean())
    grad = probs.copy()
    grad[np.arange(n), labels] -= 1.0
    return loss, grad / n


def train_sgd(model: Model, dataset, epochs: int, lr: float, seed: int,
              batch_size: int = 32) -> Model:
    """Returns a newly trained copy; the input model is left untouched.

    Deterministic for a fixed (model, dataset, seed): the shuffle stream
    derives from the seed alone.  Raises TrainingError naming the epoch
    if the loss stops being finite.
    """
    if model.feature_branch is not None or model.score_branch is not None:
        raise TrainingError("only plain models (no side branches) are trainable")
    if epochs < 0:
        raise TrainingError("epochs must be >= 0")
    if len(dataset) == 0:
        raise TrainingError("dataset is empty")

    out = model.clone()
    stack = out.conv_stack + out.post_stack
    images = np.asarray(dataset.images, dtype=out.dtype)
    labels = np.asarray(dataset.labels, dtype=np.int64)
    rng = Rng(mix64(seed, TAG_SHUFFLE))

    for epoch in range(epochs):
        order = rng.permutation(len(dataset))
        for start in range(0, len(dataset), batch_size):
            idx = order[start:start + batch_size]
            xb, yb = images[idx], labels[idx]
            inputs, logits = forward_stack_cached(stack, xb)
            loss, grad = softmax_cross_entropy(logits, yb)
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            for layer, x_in in zip(reversed(stack), reversed(inputs)):
                grad_in = layer.backward(x_in, grad)
                if hasattr(layer, "param_grads"):
                    gw, gb = layer.param_grads(x_in, grad)
                    layer.weight -= lr * gw
                    layer.bias -= lr * gb
                grad = grad_in
    return out
