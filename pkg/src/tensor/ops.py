"""
Differentiable Primitive Operations

Each primitive is a Function subclass with a numpy forward and an analytic
backward, exposed through a lower-case functional wrapper. Convolutions are
lowered to matrix products over sliding windows (im2col); the transposed
convolution is the adjoint of the strided convolution.

Features:
- element-wise arithmetic with broadcasting
- activations: sigmoid, SiLU, GELU (erf form), softplus, exp, log, sqrt
- reductions: sum, mean, max (ties resolved to the lowest index)
- shape ops: reshape, transpose, getitem, concat, flip, pad2d
- linear algebra: batched matmul, conv2d, conv_transpose2d, depthwise conv1d
- layer_norm over the last axis
- nearest upsampling and strided subsampling
- dft2 (analysis only, no gradient)

Usage:
    y = conv2d(x, w, b, stride=1, pad=1)
    z = silu(layer_norm(seq, gamma, beta))
"""

from typing import Any, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from ..utils.errors import ConfigurationError, ShapeError
from .tensor import Function, Tensor, record_macs

# =============================================================================
# ELEMENT-WISE ARITHMETIC
# =============================================================================


class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        sa, sb = self.shapes
        return self.unbroadcast(grad, sa), self.unbroadcast(grad, sb)


class Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        sa, sb = self.shapes
        return self.unbroadcast(grad, sa), self.unbroadcast(-grad, sb)


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return (self.unbroadcast(grad * self.b, self.a.shape),
                self.unbroadcast(grad * self.a, self.b.shape))


class Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        ga = grad / self.b
        gb = -grad * self.a / (self.b * self.b)
        return self.unbroadcast(ga, self.a.shape), self.unbroadcast(gb, self.b.shape)


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


# =============================================================================
# ACTIVATIONS AND POINTWISE MATH
# =============================================================================


class Exp(Function):
    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class Log(Function):
    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, grad):
        return (grad / self.a,)


class Sqrt(Function):
    def forward(self, a):
        self.out = np.sqrt(a)
        return self.out

    def backward(self, grad):
        return (grad * 0.5 / self.out,)


class Sigmoid(Function):
    def forward(self, a):
        self.out = special.expit(a)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class SiLU(Function):
    def forward(self, a):
        self.a = a
        self.s = special.expit(a)
        return a * self.s

    def backward(self, grad):
        s = self.s
        return (grad * (s + self.a * s * (1.0 - s)),)


class GELU(Function):
    """Exact GELU, x * Phi(x)."""

    def forward(self, a):
        self.a = a
        self.cdf = 0.5 * (1.0 + special.erf(a / np.sqrt(2.0)))
        return a * self.cdf

    def backward(self, grad):
        pdf = np.exp(-0.5 * self.a * self.a) / np.sqrt(2.0 * np.pi)
        return (grad * (self.cdf + self.a * pdf),)


class Softplus(Function):
    def forward(self, a):
        self.a = a
        return np.logaddexp(0.0, a)

    def backward(self, grad):
        return (grad * special.expit(self.a),)


# =============================================================================
# REDUCTIONS
# =============================================================================


def _normalize_axes(axis: Any, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


class Sum(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.in_shape = a.shape
        self.axes = _normalize_axes(axis, a.ndim)
        self.keepdims = keepdims
        return np.sum(a, axis=self.axes, keepdims=keepdims)

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad, self.in_shape).copy(),)


class Mean(Function):
    def forward(self, a, axis=None, keepdims=False):
        self.in_shape = a.shape
        self.axes = _normalize_axes(axis, a.ndim)
        self.keepdims = keepdims
        self.count = int(np.prod([a.shape[i] for i in self.axes])) if self.axes else 1
        return np.mean(a, axis=self.axes, keepdims=keepdims)

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad / self.count, self.in_shape).copy(),)


class Max(Function):
    """Maximum over one axis; the gradient goes to the first maximal entry."""

    def forward(self, a, axis=0, keepdims=False):
        self.axis = axis % a.ndim
        self.in_shape = a.shape
        self.keepdims = keepdims
        self.index = np.expand_dims(np.argmax(a, axis=self.axis), self.axis)
        out = np.take_along_axis(a, self.index, axis=self.axis)
        return out if keepdims else np.squeeze(out, axis=self.axis)

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        full = np.zeros(self.in_shape, dtype=grad.dtype)
        np.put_along_axis(full, self.index, grad, axis=self.axis)
        return (full,)


# =============================================================================
# SHAPE OPERATIONS
# =============================================================================


class Reshape(Function):
    def forward(self, a, shape=()):
        self.in_shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Transpose(Function):
    def forward(self, a, axes=None):
        self.axes = tuple(axes) if axes else tuple(reversed(range(a.ndim)))
        return np.transpose(a, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class GetItem(Function):
    """Basic (slice/int) indexing."""

    def forward(self, a, index=None):
        self.in_shape = a.shape
        self.index = index
        self.dtype = a.dtype
        return a[index]

    def backward(self, grad):
        full = np.zeros(self.in_shape, dtype=grad.dtype)
        full[self.index] = grad
        return (full,)


class Concat(Function):
    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.bounds = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.bounds, axis=self.axis))


class Flip(Function):
    def forward(self, a, axis=0):
        self.axis = axis
        return np.flip(a, axis=axis).copy()

    def backward(self, grad):
        return (np.flip(grad, axis=self.axis).copy(),)


class Pad2d(Function):
    """Pad the last two axes with zero, reflect or replicate (edge) values."""

    _NUMPY_MODES = {"zero": "constant", "reflect": "reflect", "replicate": "edge"}

    def forward(self, a, pads=(0, 0, 0, 0), mode="zero"):
        top, bottom, left, right = pads
        self.in_shape = a.shape
        self.pads = pads
        self.mode = mode
        width = [(0, 0)] * (a.ndim - 2) + [(top, bottom), (left, right)]
        return np.pad(a, width, mode=self._NUMPY_MODES[mode])

    def backward(self, grad):
        top, bottom, left, right = self.pads
        h, w = self.in_shape[-2:]
        if self.mode == "zero":
            return (grad[..., top:top + h, left:left + w].copy(),)
        index = np.pad(np.arange(h * w).reshape(h, w), [(top, bottom), (left, right)],
                       mode=self._NUMPY_MODES[self.mode])
        lead = int(np.prod(self.in_shape[:-2], dtype=np.int64))
        flat = grad.reshape(lead, -1)
        out = np.zeros((lead, h * w), dtype=grad.dtype)
        np.add.at(out, (slice(None), index.ravel()), flat)
        return (out.reshape(self.in_shape),)


# =============================================================================
# LINEAR ALGEBRA
# =============================================================================


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError("matmul operands do not align", left=a.shape, right=b.shape)
        self.a, self.b = a, b
        out = a @ b
        record_macs(out.size * a.shape[-1])
        return out

    def backward(self, grad):
        ga = grad @ np.swapaxes(self.b, -1, -2)
        gb = np.swapaxes(self.a, -1, -2) @ grad
        return self.unbroadcast(ga, self.a.shape), self.unbroadcast(gb, self.b.shape)


def _im2col(x: np.ndarray, k: int, stride: int, pad: int) -> Tuple[np.ndarray, int, int]:
    """(B,C,H,W) -> rows of (C*k*k) patches, one per output pixel."""
    if pad:
        x = np.pad(x, [(0, 0), (0, 0), (pad, pad), (pad, pad)])
    windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    batch, channels, out_h, out_w = windows.shape[:4]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(batch * out_h * out_w, channels * k * k)
    return cols, out_h, out_w


def _col2im(cols: np.ndarray, shape: Tuple[int, ...], k: int, stride: int, pad: int,
            out_h: int, out_w: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch rows back onto a (B,C,H,W) canvas."""
    batch, channels, height, width = shape
    patches = cols.reshape(batch, out_h, out_w, channels, k, k)
    canvas = np.zeros((batch, channels, height + 2 * pad, width + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            canvas[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += \
                patches[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return canvas[:, :, pad:pad + height, pad:pad + width]


def _check_conv(x: np.ndarray, w: np.ndarray, in_axis: int) -> None:
    if x.ndim != 4:
        raise ShapeError("convolution input must be B x C x H x W", got=x.shape)
    if w.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ConfigurationError("convolution kernel must be square and 4-D", kernel=w.shape)
    if x.shape[1] != w.shape[in_axis]:
        raise ConfigurationError("input channels do not match kernel",
                                 input_channels=x.shape[1], kernel_channels=w.shape[in_axis])


class Conv2d(Function):
    """Cross-correlation with zero padding. w: Cout x Cin x k x k."""

    def forward(self, x, w, b, stride=1, pad=0):
        _check_conv(x, w, 1)
        k = w.shape[2]
        if x.shape[2] + 2 * pad < k or x.shape[3] + 2 * pad < k:
            raise ShapeError("input smaller than kernel", input=x.shape, kernel=k, pad=pad)
        cols, out_h, out_w = _im2col(x, k, stride, pad)
        w2 = w.reshape(w.shape[0], -1)
        out = (cols @ w2.T).reshape(x.shape[0], out_h, out_w, w.shape[0]).transpose(0, 3, 1, 2)
        record_macs(cols.shape[0] * w2.size)
        self.cols, self.w, self.x_shape = cols, w, x.shape
        self.stride, self.pad, self.out_hw = stride, pad, (out_h, out_w)
        return out + b.reshape(1, -1, 1, 1)

    def backward(self, grad):
        out_channels = self.w.shape[0]
        g2 = grad.transpose(0, 2, 3, 1).reshape(-1, out_channels)
        gw = (g2.T @ self.cols).reshape(self.w.shape)
        gb = grad.sum(axis=(0, 2, 3))
        gcols = g2 @ self.w.reshape(out_channels, -1)
        gx = _col2im(gcols, self.x_shape, self.w.shape[2], self.stride, self.pad, *self.out_hw)
        return gx, gw, gb


class ConvTranspose2d(Function):
    """
    Transposed convolution, the adjoint of Conv2d. w: Cin x Cout x k x k.
    Output extent: (H - 1) * stride - 2 * pad + k + output_padding.
    """

    def forward(self, x, w, b, stride=2, pad=1, output_padding=1):
        _check_conv(x, w, 0)
        batch, _, h, wd = x.shape
        k = w.shape[2]
        out_h = (h - 1) * stride - 2 * pad + k + output_padding
        out_w = (wd - 1) * stride - 2 * pad + k + output_padding
        x2 = x.transpose(0, 2, 3, 1).reshape(-1, x.shape[1])
        cols = x2 @ w.reshape(w.shape[0], -1)
        record_macs(x2.shape[0] * w.size)
        out = _col2im(cols, (batch, w.shape[1], out_h, out_w), k, stride, pad, h, wd)
        self.x2, self.w, self.x_shape = x2, w, x.shape
        self.stride, self.pad = stride, pad
        return out + b.reshape(1, -1, 1, 1)

    def backward(self, grad):
        k = self.w.shape[2]
        gcols, h, wd = _im2col(grad, k, self.stride, self.pad)
        batch = self.x_shape[0]
        # the canvas may be one row/column larger than the adjoint footprint
        gcols = gcols.reshape(batch, h, wd, -1)[:, :self.x_shape[2], :self.x_shape[3]].reshape(
            -1, gcols.shape[1])
        w2 = self.w.reshape(self.w.shape[0], -1)
        gx = (gcols @ w2.T).reshape(batch, self.x_shape[2], self.x_shape[3], -1).transpose(0, 3, 1, 2)
        gw = (self.x2.T @ gcols).reshape(self.w.shape)
        gb = grad.sum(axis=(0, 2, 3))
        return gx, gw, gb


class DepthwiseConv1d(Function):
    """Per-channel convolution along the sequence axis of B x L x C, same padding."""

    def forward(self, x, w, b):
        if x.ndim != 3 or w.ndim != 2 or w.shape[0] != x.shape[2]:
            raise ShapeError("depthwise conv expects B x L x C input and C x k kernel",
                             input=x.shape, kernel=w.shape)
        k = w.shape[1]
        left = (k - 1) // 2
        right = k - 1 - left
        xp = np.pad(x, [(0, 0), (left, right), (0, 0)])
        length = x.shape[1]
        out = np.zeros_like(x) + b
        for j in range(k):
            out = out + xp[:, j:j + length, :] * w[:, j]
        record_macs(x.size * k)
        self.xp, self.w, self.left = xp, w, left
        return out

    def backward(self, grad):
        k = self.w.shape[1]
        length = grad.shape[1]
        gxp = np.zeros_like(self.xp)
        gw = np.empty_like(self.w)
        for j in range(k):
            gw[:, j] = np.sum(grad * self.xp[:, j:j + length, :], axis=(0, 1))
            gxp[:, j:j + length, :] += grad * self.w[:, j]
        gb = grad.sum(axis=(0, 1))
        return gxp[:, self.left:self.left + length, :], gw, gb


class LayerNorm(Function):
    """Normalization over the last axis with affine gamma/beta."""

    def forward(self, x, gamma, beta, eps=1e-5):
        mu = x.mean(axis=-1, keepdims=True)
        centered = x - mu
        var = (centered * centered).mean(axis=-1, keepdims=True)
        self.rstd = 1.0 / np.sqrt(var + eps)
        self.xhat = centered * self.rstd
        self.gamma = gamma
        return self.xhat * gamma + beta

    def backward(self, grad):
        lead = tuple(range(grad.ndim - 1))
        ggamma = np.sum(grad * self.xhat, axis=lead)
        gbeta = np.sum(grad, axis=lead)
        gxhat = grad * self.gamma
        gx = self.rstd * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                          - self.xhat * (gxhat * self.xhat).mean(axis=-1, keepdims=True))
        return gx, ggamma, gbeta


# =============================================================================
# RESAMPLING
# =============================================================================


class UpsampleNearest(Function):
    def forward(self, x, factor=2):
        self.factor = factor
        return x.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def backward(self, grad):
        f = self.factor
        *lead, h, w = grad.shape
        return (grad.reshape(*lead, h // f, f, w // f, f).sum(axis=(-3, -1)),)


class Subsample(Function):
    def forward(self, x, stride=2):
        self.in_shape = x.shape
        self.stride = stride
        return x[..., ::stride, ::stride].copy()

    def backward(self, grad):
        full = np.zeros(self.in_shape, dtype=grad.dtype)
        full[..., ::self.stride, ::self.stride] = grad
        return (full,)


# =============================================================================
# FUNCTIONAL API
# =============================================================================


def add(a: Any, b: Any) -> Tensor:
    return Add.apply(a, b)


def sub(a: Any, b: Any) -> Tensor:
    return Sub.apply(a, b)


def mul(a: Any, b: Any) -> Tensor:
    return Mul.apply(a, b)


def div(a: Any, b: Any) -> Tensor:
    return Div.apply(a, b)


def neg(a: Any) -> Tensor:
    return Neg.apply(a)


def exp(a: Any) -> Tensor:
    return Exp.apply(a)


def log(a: Any) -> Tensor:
    return Log.apply(a)


def sqrt(a: Any) -> Tensor:
    return Sqrt.apply(a)


def sigmoid(a: Any) -> Tensor:
    return Sigmoid.apply(a)


def silu(a: Any) -> Tensor:
    return SiLU.apply(a)


def gelu(a: Any) -> Tensor:
    return GELU.apply(a)


def softplus(a: Any) -> Tensor:
    return Softplus.apply(a)


def sum(a: Any, axis: Any = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def mean(a: Any, axis: Any = None, keepdims: bool = False) -> Tensor:
    return Mean.apply(a, axis=axis, keepdims=keepdims)


def max(a: Any, axis: int = 0, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Max.apply(a, axis=axis, keepdims=keepdims)


def reshape(a: Any, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def transpose(a: Any, axes: Optional[Sequence[int]] = None) -> Tensor:
    return Transpose.apply(a, axes=tuple(axes) if axes else None)


def getitem(a: Any, index: Any) -> Tensor:
    return GetItem.apply(a, index=index)


def concat(tensors: Sequence[Any], axis: int = 0) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def split(a: Tensor, sizes: Sequence[int], axis: int = 1) -> Tuple[Tensor, ...]:
    """Split along an axis into consecutive pieces of the given sizes."""
    pieces = []
    start = 0
    for size in sizes:
        index = [slice(None)] * a.ndim
        index[axis] = slice(start, start + size)
        pieces.append(getitem(a, tuple(index)))
        start += size
    return tuple(pieces)


def flip_spatial(x: Any, axis: str) -> Tensor:
    """Reverse row order ("vertical") or column order ("horizontal") of B x C x H x W."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != 4:
        raise ShapeError("flip_spatial expects a 4-D tensor", got=x.shape)
    if axis not in ("vertical", "horizontal"):
        raise ConfigurationError("flip axis must be vertical or horizontal", axis=axis)
    return Flip.apply(x, axis=2 if axis == "vertical" else 3)


def pad2d(x: Any, pads: Tuple[int, int, int, int], mode: str = "zero") -> Tensor:
    """Pad (top, bottom, left, right) on the last two axes."""
    if mode not in Pad2d._NUMPY_MODES:
        raise ConfigurationError("unknown padding mode", mode=mode)
    return Pad2d.apply(x, pads=tuple(pads), mode=mode)


def matmul(a: Any, b: Any) -> Tensor:
    return MatMul.apply(a, b)


def linear(x: Any, weight: Any, bias: Any = None) -> Tensor:
    """x @ weight.T (+ bias); weight is out x in."""
    out = matmul(x, transpose(weight, (1, 0)))
    return out if bias is None else add(out, bias)


def conv2d(x: Any, w: Any, b: Any, stride: int = 1, pad: int = 0) -> Tensor:
    if w.shape[2] not in (1, 3):
        raise ConfigurationError("conv2d supports kernel sizes 1 and 3", kernel=w.shape[2])
    return Conv2d.apply(x, w, b, stride=stride, pad=pad)


def conv_transpose2d(x: Any, w: Any, b: Any, stride: int = 2, pad: int = 1,
                     output_padding: int = 1) -> Tensor:
    return ConvTranspose2d.apply(x, w, b, stride=stride, pad=pad, output_padding=output_padding)


def depthwise_conv1d(x: Any, w: Any, b: Any) -> Tensor:
    return DepthwiseConv1d.apply(x, w, b)


def layer_norm(x: Any, gamma: Any, beta: Any, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ConfigurationError("layer_norm eps must be positive", eps=eps)
    return LayerNorm.apply(x, gamma, beta, eps=eps)


def upsample_nearest(x: Any, factor: int = 2) -> Tensor:
    return UpsampleNearest.apply(x, factor=factor)


def subsample(x: Any, stride: int = 2) -> Tensor:
    return Subsample.apply(x, stride=stride)


def dft2(x: Any) -> np.ndarray:
    """Unnormalized forward 2-D DFT of a real map; returns a complex array."""
    array = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if array.ndim != 2:
        raise ShapeError("dft2 expects a 2-D map", got=array.shape)
    return np.fft.fft2(array)
