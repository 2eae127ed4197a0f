"""Dense CNN layer primitives with analytic gradients.

Arrays are plain numpy ndarrays, row-major: images are (N, C, H, W),
feature vectors (N, F).  float32 is the deployment dtype; float64 is
used where the tests demand exact arithmetic.  forward/backward are
pure functions of their arguments (no hidden state), so built layers
can be shared across threads.

Two layers carry an optional extension block that the surgery module
fills in:

* Conv2d.ext_bias appends one filter with an all-zero kernel, so the
  extra output channel is a constant.  The base convolution is computed
  by the exact same GEMM as before the edit, which keeps the original
  channels bit-identical.
* Linear.ext_weight / ext_bias consume extra trailing input features.
  The extension is accumulated separately from the base matmul so a
  compensated extension cancels exactly instead of perturbing the low
  bits of the base scores.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError


def _as_pad4(padding) -> tuple[int, int, int, int]:
    """Normalize padding to (top, bottom, left, right)."""
    if isinstance(padding, int):
        return (padding, padding, padding, padding)
    p = tuple(int(v) for v in padding)
    if len(p) == 2:
        return (p[0], p[0], p[1], p[1])
    if len(p) == 4:
        return p
    raise ShapeError(f"padding must be int, 2-tuple or 4-tuple, got {padding!r}")


def same_padding(kh: int, kw: int) -> tuple[int, int, int, int]:
    """Size-preserving padding for stride 1; even kernels pad one more
    pixel on the bottom/right."""
    pt = (kh - 1) // 2
    pl = (kw - 1) // 2
    return (pt, kh - 1 - pt, pl, kw - 1 - pl)


def _check_4d(x: np.ndarray, who: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{who} expects a (N, C, H, W) array, got ndim={x.ndim}")


class Conv2d:
    """2d cross-correlation (no kernel flip), weight (out_c, in_c, kh, kw)."""

    kind = "conv2d"

    def __init__(self, weight: np.ndarray, bias: np.ndarray, stride: int = 1,
                 padding=0, ext_bias: float | None = None):
        weight = np.asarray(weight)
        bias = np.asarray(bias)
        if weight.ndim != 4:
            raise ShapeError("conv weight must be (out_c, in_c, kh, kw)")
        if bias.shape != (weight.shape[0],):
            raise ShapeError("conv bias must have one entry per output channel "
                             f"(axis 0), got {bias.shape}")
        self.weight = weight
        self.bias = bias
        self.stride = int(stride)
        self.padding = _as_pad4(padding)
        self.ext_bias = None if ext_bias is None else float(ext_bias)

    @classmethod
    def init(cls, in_channels: int, out_channels: int, kernel, rng,
             stride: int = 1, padding=0, dtype=np.float32) -> "Conv2d":
        kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
        fan_in = in_channels * kh * kw
        w = rng.kaiming_uniform((out_channels, in_channels, kh, kw), fan_in, dtype)
        b = np.zeros(out_channels, dtype=dtype)
        return cls(w, b, stride=stride, padding=padding)

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0] + (0 if self.ext_bias is None else 1)

    def copy(self) -> "Conv2d":
        return Conv2d(self.weight.copy(), self.bias.copy(), self.stride,
                      self.padding, self.ext_bias)

    def astype(self, dtype) -> "Conv2d":
        return Conv2d(self.weight.astype(dtype), self.bias.astype(dtype),
                      self.stride, self.padding, self.ext_bias)

    def _geometry(self, x: np.ndarray):
        _check_4d(x, "Conv2d")
        oc, ic, kh, kw = self.weight.shape
        if x.shape[1] != ic:
            raise ShapeError(f"Conv2d input has {x.shape[1]} channels on axis 1, "
                             f"layer expects {ic}")
        pt, pb, pl, pr = self.padding
        hh = x.shape[2] + pt + pb
        ww = x.shape[3] + pl + pr
        if hh < kh or ww < kw:
            raise ShapeError(f"Conv2d kernel ({kh}x{kw}) larger than padded "
                             f"input ({hh}x{ww}) on the spatial axes")
        oh = (hh - kh) // self.stride + 1
        ow = (ww - kw) // self.stride + 1
        return oc, ic, kh, kw, oh, ow

    def _cols(self, x: np.ndarray, kh: int, kw: int) -> np.ndarray:
        """im2col: (N, OH, OW, C*kh*kw) patch matrix of the padded input."""
        pt, pb, pl, pr = self.padding
        if pt or pb or pl or pr:
            x = np.pad(x, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
        win = sliding_window_view(x, (kh, kw), axis=(2, 3))
        win = win[:, :, ::self.stride, ::self.stride]  # (N, C, OH, OW, kh, kw)
        win = win.transpose(0, 2, 3, 1, 4, 5)          # (N, OH, OW, C, kh, kw)
        n, oh, ow = win.shape[:3]
        return np.ascontiguousarray(win).reshape(n, oh, ow, -1)

    def forward(self, x: np.ndarray) -> np.ndarray:
        oc, ic, kh, kw, oh, ow = self._geometry(x)
        cols = self._cols(x, kh, kw)
        wmat = self.weight.reshape(oc, -1)
        out = cols @ wmat.T + self.bias          # (N, OH, OW, oc)
        out = out.transpose(0, 3, 1, 2)
        if self.ext_bias is not None:
            # Zero-kernel appended filter: a constant channel.
            const = np.full((x.shape[0], 1, oh, ow), self.ext_bias, dtype=out.dtype)
            out = np.concatenate([out, const], axis=1)
        return np.ascontiguousarray(out)

    def _strip_ext(self, grad_out: np.ndarray) -> np.ndarray:
        # The appended filter has a zero kernel: no gradient reaches the input.
        return grad_out[:, :-1] if self.ext_bias is not None else grad_out

    def backward(self, x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
        oc, ic, kh, kw, oh, ow = self._geometry(x)
        g = self._strip_ext(grad_out)
        wmat = self.weight.reshape(oc, -1)
        gcols = g.transpose(0, 2, 3, 1) @ wmat    # (N, OH, OW, C*kh*kw)
        gcols = gcols.reshape(g.shape[0], oh, ow, ic, kh, kw)
        pt, pb, pl, pr = self.padding
        gx = np.zeros((x.shape[0], ic, x.shape[2] + pt + pb, x.shape[3] + pl + pr),
                      dtype=grad_out.dtype)
        s = self.stride
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + s * oh:s, j:j + s * ow:s] += \
                    gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return gx[:, :, pt:pt + x.shape[2], pl:pl + x.shape[3]]

    def param_grads(self, x: np.ndarray, grad_out: np.ndarray):
        oc, ic, kh, kw, oh, ow = self._geometry(x)
        g = self._strip_ext(grad_out)
        cols = self._cols(x, kh, kw).reshape(x.shape[0], oh * ow, -1)
        gflat = g.transpose(0, 2, 3, 1).reshape(x.shape[0], oh * ow, oc)
        gw = np.einsum("npo,npc->oc", gflat, cols).reshape(self.weight.shape)
        gb = g.sum(axis=(0, 2, 3))
        return gw, gb


class ReLU:
    kind = "relu"

    def copy(self) -> "ReLU":
        return ReLU()

    def astype(self, dtype) -> "ReLU":
        return ReLU()

    def forward(self, x: np.ndarray) -> np.ndarray:
        return np.maximum(x, 0)

    def backward(self, x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
        return grad_out * (x > 0)


class _Pool:
    def __init__(self, k: int, stride: int | None = None):
        self.k = int(k)
        self.stride = self.k if stride is None else int(stride)

    def copy(self):
        return type(self)(self.k, self.stride)

    def astype(self, dtype):
        return type(self)(self.k, self.stride)

    def _geometry(self, x: np.ndarray):
        _check_4d(x, type(self).__name__)
        if x.shape[2] < self.k or x.shape[3] < self.k:
            raise ShapeError(f"{type(self).__name__} window {self.k} larger than "
                             f"input {x.shape[2]}x{x.shape[3]} on the spatial axes")
        oh = (x.shape[2] - self.k) // self.stride + 1
        ow = (x.shape[3] - self.k) // self.stride + 1
        return oh, ow

    def _windows(self, x: np.ndarray) -> np.ndarray:
        win = sliding_window_view(x, (self.k, self.k), axis=(2, 3))
        return win[:, :, ::self.stride, ::self.stride]  # (N, C, OH, OW, k, k)


class MaxPool2d(_Pool):
    kind = "maxpool2d"

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._geometry(x)
        return self._windows(x).max(axis=(4, 5))

    def backward(self, x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
        oh, ow = self._geometry(x)
        n, c = x.shape[:2]
        flat = self._windows(x).reshape(n, c, oh, ow, -1)
        # argmax returns the first maximal entry, which inside a window is the
        # lowest row-major index; ties route all gradient mass there.
        amax = flat.argmax(axis=4)
        gx = np.zeros_like(x, dtype=grad_out.dtype)
        ni, ci, oi, oj = np.indices(amax.shape)
        hi = oi * self.stride + amax // self.k
        wj = oj * self.stride + amax % self.k
        np.add.at(gx, (ni, ci, hi, wj), grad_out)
        return gx


class AvgPool2d(_Pool):
    kind = "avgpool2d"

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._geometry(x)
        return self._windows(x).mean(axis=(4, 5))

    def backward(self, x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
        oh, ow = self._geometry(x)
        gx = np.zeros_like(x, dtype=grad_out.dtype)
        share = grad_out / (self.k * self.k)
        s = self.stride
        for i in range(self.k):
            for j in range(self.k):
                # For a fixed (i, j) offset the strided targets never alias.
                gx[:, :, i:i + s * oh:s, j:j + s * ow:s] += share
        return gx


class Flatten:
    """(N, C, H, W) -> (N, C*H*W); channel-major, i.e. channel 0's pixels
    come first, row-major within each channel."""

    kind = "flatten"

    def copy(self) -> "Flatten":
        return Flatten()

    def astype(self, dtype) -> "Flatten":
        return Flatten()

    def forward(self, x: np.ndarray) -> np.ndarray:
        _check_4d(x, "Flatten")
        return np.ascontiguousarray(x).reshape(x.shape[0], -1)

    def backward(self, x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
        return grad_out.reshape(x.shape)


def ext_product(x_ext: np.ndarray, ext_weight: np.ndarray) -> np.ndarray:
    """(N, ext_f) x (out_f, ext_f) -> (N, out_f) without BLAS dispatch."""
    return np.einsum("nf,of->no", x_ext, ext_weight)


class Linear:
    """Affine map, weight (out_features, in_features).

    ext_weight (out_features, ext_features) and ext_bias (out_features,)
    consume input features beyond in_features.  Base and extension are
    accumulated as two separate products; see the module docstring.
    """

    kind = "linear"

    def __init__(self, weight: np.ndarray, bias: np.ndarray,
                 ext_weight: np.ndarray | None = None,
                 ext_bias: np.ndarray | None = None):
        weight = np.asarray(weight)
        bias = np.asarray(bias)
        if weight.ndim != 2:
            raise ShapeError("linear weight must be (out_features, in_features)")
        if bias.shape != (weight.shape[0],):
            raise ShapeError("linear bias must match out_features (axis 0), "
                             f"got {bias.shape}")
        if (ext_weight is None) != (ext_bias is None):
            raise ShapeError("ext_weight and ext_bias must be set together")
        if ext_weight is not None:
            ext_weight = np.asarray(ext_weight)
            ext_bias = np.asarray(ext_bias)
            if ext_weight.shape[0] != weight.shape[0]:
                raise ShapeError("ext_weight out_features (axis 0) must match "
                                 "the base weight")
            if ext_bias.shape != (weight.shape[0],):
                raise ShapeError("ext_bias must match out_features (axis 0)")
        self.weight = weight
        self.bias = bias
        self.ext_weight = ext_weight
        self.ext_bias = ext_bias

    @classmethod
    def init(cls, in_features: int, out_features: int, rng,
             dtype=np.float32) -> "Linear":
        w = rng.kaiming_uniform((out_features, in_features), in_features, dtype)
        b = np.zeros(out_features, dtype=dtype)
        return cls(w, b)

    @property
    def in_features(self) -> int:
        return self.weight.shape[1]

    @property
    def ext_features(self) -> int:
        return 0 if self.ext_weight is None else self.ext_weight.shape[1]

    def copy(self) -> "Linear":
        return Linear(self.weight.copy(), self.bias.copy(),
                      None if self.ext_weight is None else self.ext_weight.copy(),
                      None if self.ext_bias is None else self.ext_bias.copy())

    def astype(self, dtype) -> "Linear":
        return Linear(self.weight.astype(dtype), self.bias.astype(dtype),
                      None if self.ext_weight is None else self.ext_weight.astype(dtype),
                      None if self.ext_bias is None else self.ext_bias.astype(dtype))

    def _check(self, x: np.ndarray) -> None:
        if x.ndim != 2:
            raise ShapeError(f"Linear expects (N, F) input, got ndim={x.ndim}")
        want = self.in_features + self.ext_features
        if x.shape[1] != want:
            raise ShapeError(f"Linear input has {x.shape[1]} features on axis 1, "
                             f"layer expects {want}")

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._check(x)
        nf = self.in_features
        base = np.ascontiguousarray(x[:, :nf]) @ self.weight.T + self.bias
        if self.ext_weight is None:
            return base
        # einsum accumulates each output element sequentially over the summed
        # axis, independent of the batch size, so an extension bias computed
        # from the same product at edit time cancels it exactly.
        ext = ext_product(np.ascontiguousarray(x[:, nf:]), self.ext_weight)
        return base + (ext + self.ext_bias)

    def backward(self, x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
        self._check(x)
        gx_base = grad_out @ self.weight
        if self.ext_weight is None:
            return gx_base
        gx_ext = grad_out @ self.ext_weight
        return np.concatenate([gx_base, gx_ext], axis=1)

    def param_grads(self, x: np.ndarray, grad_out: np.ndarray):
        self._check(x)
        nf = self.in_features
        gw = grad_out.T @ np.ascontiguousarray(x[:, :nf])
        gb = grad_out.sum(axis=0)
        return gw, gb


Layer = Conv2d | ReLU | MaxPool2d | AvgPool2d | Flatten | Linear


def forward_stack(layers, x: np.ndarray) -> np.ndarray:
    for layer in layers:
        x = layer.forward(x)
    return x


def forward_stack_cached(layers, x: np.ndarray):
    """Run a stack keeping each layer's input; returns (inputs, output)."""
    inputs = []
    for layer in layers:
        inputs.append(x)
        x = layer.forward(x)
    return inputs, x


def backward_stack(layers, inputs, grad: np.ndarray) -> np.ndarray:
    for layer, x_in in zip(reversed(layers), reversed(inputs)):
        grad = layer.backward(x_in, grad)
    return grad


def grad_wrt_input(layers, x: np.ndarray, class_index: int) -> np.ndarray:
    """Gradient of the selected output score w.r.t. x through `layers`.

    The stack must end in a (N, classes) output.  Accepts a single
    unbatched input as well; the result matches x's shape.
    """
    single = x.ndim == 3
    xb = x[None] if single else x
    inputs, y = forward_stack_cached(layers, xb)
    if y.ndim != 2:
        raise ShapeError(f"stack output must be (N, classes), got ndim={y.ndim}")
    if not 0 <= class_index < y.shape[1]:
        raise ValueError(f"class index {class_index} out of range "
                         f"for {y.shape[1]} classes")
    seed = np.zeros_like(y)
    seed[:, class_index] = 1.0
    g = backward_stack(layers, inputs, seed)
    return g[0] if single else g
