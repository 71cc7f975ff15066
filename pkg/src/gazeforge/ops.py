"""Differentiable operations on :class:`~gazeforge.tensor.Tensor`.

Image-shaped tensors are (batch, channels, height, width). All backward rules
are written against numpy arrays and return one gradient per parent.
"""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, UsageError, as_tensor, make_result


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _require_4d(x: Tensor, name: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} expects a 4-D (N, C, H, W) tensor, got shape {x.shape}")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_result(a.data + b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return make_result(a.data - b.data, (a, b),
                       lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b),
                       lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return make_result(out, (a, b), backward, "div")


def power(x: Tensor, exponent: float) -> Tensor:
    xd = x.data
    return make_result(xd ** exponent, (x,),
                       lambda g: (g * exponent * xd ** (exponent - 1),), "pow")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_result(np.log(xd), (x,), lambda g: (g / xd,), "log")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    """max(x, floor); the gradient flows only where x exceeds the floor."""
    xd = x.data
    keep = xd > floor
    return make_result(np.maximum(xd, floor), (x,), lambda g: (g * keep,), "clamp_min")


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    # np.maximum propagates NaN, so a corrupted input is never silently zeroed
    return make_result(np.maximum(x.data, 0.0), (x,), lambda g: (g * keep,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope)
    return make_result(x.data * scale, (x,), lambda g: (g * scale,), "leaky_relu")


# ----------------------------------------------------------------- reductions

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# --------------------------------------------------------------- restructuring

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return make_result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                       lambda g: (g.transpose(inverse),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        index = [slice(None)] * g.ndim
        grads = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index[axis] = slice(lo, hi)
            grads.append(g[tuple(index)])
        return grads

    return make_result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward, "concat")


def take(x: Tensor, index) -> Tensor:
    """Basic-slicing view ``x[index]`` with a scatter backward."""
    shape = x.shape

    def backward(g):
        full = np.zeros(shape)
        full[index] += g
        return (full,)

    return make_result(np.array(x.data[index]), (x,), backward, "take")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return make_result(ad @ bd, (a, b), backward, "matmul")


# -------------------------------------------------------------- convolutions

def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of a batch of images with a bank of filters."""
    _require_4d(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be (outC, inC, kH, kW), got {weight.shape}")
    n, c, h, w = x.shape
    out_c, in_c, kh, kw = weight.shape
    if c != in_c:
        raise ShapeError(f"conv2d channel mismatch: input has {c}, weight expects {in_c}")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d needs stride >= 1 and padding >= 0")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0 or h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d output would be empty for input {x.shape} and kernel {weight.shape}")
    if bias is not None and bias.shape != (out_c,):
        raise ShapeError(f"conv2d bias must have shape ({out_c},), got {bias.shape}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    wd = weight.data
    out = np.tensordot(cols, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gcols = np.tensordot(g, wd, axes=([1], [0]))  # (N, Ho, Wo, C, kH, kW)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, parents, backward, "conv2d")


def conv1x1(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Pointwise channel mixing; a 1x1 conv2d done as a single matrix product."""
    _require_4d(x, "conv1x1")
    if weight.ndim != 4 or weight.shape[2:] != (1, 1):
        raise ShapeError(f"conv1x1 weight must be (outC, inC, 1, 1), got {weight.shape}")
    n, c, h, w = x.shape
    out_c, in_c = weight.shape[:2]
    if c != in_c:
        raise ShapeError(f"conv1x1 channel mismatch: input has {c}, weight expects {in_c}")
    if bias is not None and bias.shape != (out_c,):
        raise ShapeError(f"conv1x1 bias must have shape ({out_c},), got {bias.shape}")
    wm = weight.data[:, :, 0, 0]
    xd = x.data.reshape(n, c, h * w)
    out = np.matmul(wm, xd)
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = out.reshape(n, out_c, h, w)

    def backward(g):
        gm = g.reshape(n, out_c, h * w)
        gx = np.matmul(wm.T, gm).reshape(n, c, h, w) if x.requires_grad else None
        gw = np.einsum("nop,ncp->oc", gm, xd)[:, :, None, None] if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, gm.sum(axis=(0, 2))

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return make_result(out, parents, backward, "conv1x1")


# ------------------------------------------------------------ normalization

def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize every (batch, channel) plane; population variance, eps inside the root."""
    _require_4d(x, "instance_norm")
    if x.shape[2] * x.shape[3] < 2:
        raise UsageError(f"instance_norm needs at least 2 spatial positions per plane, got {x.shape[2:]}")
    mu = x.data.mean(axis=(2, 3), keepdims=True)
    centered = x.data - mu
    var = (centered ** 2).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv

    def backward(g):
        gm = g.mean(axis=(2, 3), keepdims=True)
        gxm = (g * xhat).mean(axis=(2, 3), keepdims=True)
        return (inv * (g - gm - xhat * gxm),)

    return make_result(xhat, (x,), backward, "instance_norm")


# ------------------------------------------------------------------ resampling

def nn_upsample(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour up-sampling: every pixel becomes a factor x factor block."""
    _require_4d(x, "nn_upsample")
    if factor < 1:
        raise ShapeError(f"upsample factor must be >= 1, got {factor}")
    if factor == 1:
        return make_result(x.data.copy(), (x,), lambda g: (g,), "nn_upsample")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return make_result(out, (x,), backward, "nn_upsample")


def downsample_avg(x: Tensor, factor: int) -> Tensor:
    """Average over non-overlapping factor x factor blocks."""
    _require_4d(x, "downsample_avg")
    if factor < 1:
        raise ShapeError(f"downsample factor must be >= 1, got {factor}")
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"extents {h}x{w} are not divisible by {factor}")
    if factor == 1:
        return make_result(x.data.copy(), (x,), lambda g: (g,), "downsample_avg")
    out = x.data.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))
    scale = 1.0 / (factor * factor)

    def backward(g):
        return (np.repeat(np.repeat(g, factor, axis=2), factor, axis=3) * scale,)

    return make_result(out, (x,), backward, "downsample_avg")


def separable_linear(x: Tensor, rows: np.ndarray, cols: np.ndarray, op: str = "separable_linear") -> Tensor:
    """Apply fixed matrices along height and width: out = rows @ plane @ cols.T."""
    _require_4d(x, op)
    if rows.shape[1] != x.shape[2] or cols.shape[1] != x.shape[3]:
        raise ShapeError(f"{op}: operator {rows.shape}/{cols.shape} does not fit input {x.shape}")
    out = np.matmul(np.matmul(rows, x.data), cols.T)

    def backward(g):
        return (np.matmul(np.matmul(rows.T, g), cols),)

    return make_result(out, (x,), backward, op)


def reflect_index(i: int, n: int) -> int:
    """Half-sample symmetric reflection (``d c b a | a b c d``), repeated as needed."""
    period = 2 * n
    m = i % period
    return m if m < n else period - 1 - m


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalized 1-D Gaussian taps on [-r, r] with r = ceil(3 sigma)."""
    if not sigma > 0:
        raise UsageError(f"gaussian sigma must be positive, got {sigma}")
    radius = int(math.ceil(3.0 * sigma))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    taps = np.exp(-offsets ** 2 / (2.0 * sigma * sigma))
    return taps / taps.sum()


@lru_cache(maxsize=64)
def _blur_matrix(n: int, sigma: float) -> np.ndarray:
    taps = gaussian_kernel(sigma)
    radius = (len(taps) - 1) // 2
    mat = np.zeros((n, n))
    for i in range(n):
        for k, t in enumerate(taps):
            mat[i, reflect_index(i + k - radius, n)] += t
    mat.flags.writeable = False
    return mat


def gaussian_blur(x: Tensor, sigma: float) -> Tensor:
    """Depthwise Gaussian blur with reflect padding.

    Half-sample reflection with a symmetric kernel makes every column of the
    operator sum to one, so plane sums are preserved exactly (up to rounding).
    """
    _require_4d(x, "gaussian_blur")
    return separable_linear(x, _blur_matrix(x.shape[2], float(sigma)),
                            _blur_matrix(x.shape[3], float(sigma)), "gaussian_blur")


@lru_cache(maxsize=64)
def _bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    mat = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = min(max((i + 0.5) * scale - 0.5, 0.0), n_in - 1)
        lo = int(math.floor(src))
        hi = min(lo + 1, n_in - 1)
        frac = src - lo
        mat[i, lo] += 1.0 - frac
        mat[i, hi] += frac
    mat.flags.writeable = False
    return mat


def resize_bilinear(x: Tensor, height: int, width: int) -> Tensor:
    """Bilinear resampling with pixel-centre alignment and clamped borders."""
    _require_4d(x, "resize_bilinear")
    return separable_linear(x, _bilinear_matrix(height, x.shape[2]),
                            _bilinear_matrix(width, x.shape[3]), "resize_bilinear")


# --------------------------------------------------------------- soft-max

def softmax_spatial(s: Tensor) -> Tensor:
    """Soft-max over the spatial positions of every (batch, channel) plane."""
    _require_4d(s, "softmax_spatial")
    z = s.data - s.data.max(axis=(2, 3), keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=(2, 3), keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=(2, 3), keepdims=True)),)

    return make_result(p, (s,), backward, "softmax_spatial")


def logsumexp_spatial(s: np.ndarray) -> np.ndarray:
    peak = s.max(axis=(2, 3), keepdims=True)
    return peak + np.log(np.exp(s - peak).sum(axis=(2, 3), keepdims=True))
