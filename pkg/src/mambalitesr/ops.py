"""Differentiable operations on :class:`~mambalitesr.tensor.Tensor`.

Every function here computes its forward value with numpy and registers a
backward rule through :func:`~mambalitesr.tensor.make_result`.
"""

from __future__ import annotations

import builtins
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError, UsageError
from .tensor import Tensor, broadcast_shape, make_result, unbroadcast

LAYER_NORM_EPS = 1e-5


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return a, b
    if isinstance(a, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype)), b
    raise UsageError("at least one operand must be a Tensor")


# -- arithmetic ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def backward(g):
        return unbroadcast(g, sa), unbroadcast(g, sb)

    return make_result(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    broadcast_shape(a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def backward(g):
        return unbroadcast(g, sa), unbroadcast(-g, sb)

    return make_result(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        ga = unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    broadcast_shape(a.shape, b.shape)
    ad, bd = a.data, b.data

    def backward(g):
        ga = unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad / bd, (a, b), backward)


def neg(x: Tensor) -> Tensor:
    return make_result(-x.data, (x,), lambda g: (-g,))


def power(x: Tensor, exponent: float) -> Tensor:
    xd = x.data
    p = float(exponent)

    def backward(g):
        return (g * p * xd ** (p - 1.0),)

    return make_result(xd ** p, (x,), backward)


def matmul(a, b) -> Tensor:
    """Batched matrix product with trailing-axis broadcasting of batch dims."""
    a, b = _pair(a, b)
    if a.ndim == 0 or b.ndim == 0:
        raise DimensionError(f"matmul needs at least 1-d operands, got {a.shape} and {b.shape}")
    if a.ndim == 1:
        out = matmul(reshape(a, (1, a.shape[0])), b)
        return reshape(out, out.shape[:-2] + out.shape[-1:])
    if b.ndim == 1:
        out = matmul(a, reshape(b, (b.shape[0], 1)))
        return reshape(out, out.shape[:-1])
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    broadcast_shape(a.shape[:-2], b.shape[:-2])
    ad, bd = a.data, b.data

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_result(ad @ bd, (a, b), backward)


# -- reductions and shape ---------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return make_result(np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return sum(x, axis=axes, keepdims=keepdims) * (1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"cannot reshape {src} into {tuple(shape)}") from None
    return make_result(out, (x,), lambda g: (g.reshape(src),))


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_result(np.ascontiguousarray(x.data.transpose(axes)), (x,),
                       lambda g: (g.transpose(inverse),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(x: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data
    shape, dtype = x.shape, x.dtype
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_result(np.array(x.data[index], copy=True), (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ndim = tensors[0].ndim
    axis = axis % ndim
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise DimensionError(f"cannot concatenate shapes {[t.shape for t in tensors]} on axis {axis}") from None
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [builtins.slice(None)] * ndim
            sl[axis] = builtins.slice(int(lo), int(hi))
            parts.append(g[tuple(sl)])
        return tuple(parts)

    return make_result(out, tensors, backward)


def pad(x: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` has one ``(before, after)`` pair per axis."""
    widths = [tuple(w) for w in widths]
    if len(widths) != x.ndim:
        raise DimensionError(f"pad widths {widths} do not match tensor rank {x.ndim}")
    crop = tuple(builtins.slice(lo, lo + n) for (lo, _), n in zip(widths, x.shape))
    return make_result(np.pad(x.data, widths), (x,), lambda g: (g[crop],))


# -- elementwise functions ---------------------------------------------------

def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return make_result(np.log(xd), (x,), lambda g: (g / xd,))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),))


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    xd = x.data
    s = _sigmoid(xd)

    def backward(g):
        return (g * s * (1.0 + xd * (1.0 - s)),)

    return make_result(xd * s, (x,), backward)


def softplus(x: Tensor) -> Tensor:
    """ln(1 + e^x), evaluated without overflow."""
    xd = x.data
    out = np.logaddexp(np.zeros((), dtype=xd.dtype), xd)
    return make_result(out.astype(xd.dtype, copy=False), (x,), lambda g: (g * _sigmoid(xd),))


def abs(x: Tensor) -> Tensor:
    xd = x.data
    return make_result(np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def l1(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference over all elements."""
    if pred.shape != target.shape:
        raise DimensionError(f"l1 operands differ in shape: {pred.shape} vs {target.shape}")
    return mean(abs(sub(pred, target)))


def layer_norm(x: Tensor, weight: Optional[Tensor] = None, bias: Optional[Tensor] = None,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    """Normalize over the last axis, then apply the optional affine map."""
    xd = x.data
    d = xd.shape[-1]
    for p in (weight, bias):
        if p is not None and p.shape != (d,):
            raise DimensionError(f"layer_norm affine shape {p.shape} does not match feature dim {d}")
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    wd = weight.data if weight is not None else None
    out = xhat * wd if wd is not None else xhat.copy()
    if bias is not None:
        out = out + bias.data
    lead = tuple(range(xd.ndim - 1))

    def backward(g):
        gxhat = g * wd if wd is not None else g
        gx = inv_std * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        gw = (g * xhat).sum(axis=lead) if weight is not None else None
        gb = g.sum(axis=lead) if bias is not None else None
        return gx, gw, gb

    parents = [x, weight if weight is not None else Tensor(np.zeros(0, xd.dtype)),
               bias if bias is not None else Tensor(np.zeros(0, xd.dtype))]
    return make_result(out.astype(xd.dtype, copy=False), parents, backward)


# -- image operators ---------------------------------------------------------

def _correlate(xp: np.ndarray, w: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Valid cross-correlation of padded ``xp`` (N, C, H, W) with ``w`` (O, C, kh, kw).

    Returns the output (N, O, H', W') and the im2col matrix used to produce it.
    """
    n, c = xp.shape[:2]
    o, _, kh, kw = w.shape
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # N, C, H', W', kh, kw
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = cols @ w.reshape(o, -1).T
    return out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2), cols


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, padding: int = 0) -> Tensor:
    """Stride-1 2-d cross-correlation.

    ``x`` is (C_in, H, W) or (N, C_in, H, W); ``weight`` is (C_out, C_in, kH, kW).
    """
    batched = x.ndim == 4
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d input must be (C,H,W) or (N,C,H,W), got {x.shape}")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d weight must be 4-d, got {weight.shape}")
    xd = x.data if batched else x.data[None]
    o, c, kh, kw = weight.shape
    if xd.shape[1] != c:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs weight {weight.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"conv2d kernel must be odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (o,):
        raise DimensionError(f"conv2d bias {bias.shape} does not match {o} output channels")
    p = int(padding)
    h, w_ = xd.shape[2], xd.shape[3]
    if h + 2 * p < kh or w_ + 2 * p < kw:
        raise DimensionError(f"conv2d kernel {kh}x{kw} larger than padded input {x.shape}")
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    wd = weight.data
    out, cols = _correlate(xp, wd)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        g4 = g if batched else g[None]
        gx = gw = gb = None
        if weight.requires_grad:
            gflat = g4.transpose(0, 2, 3, 1).reshape(-1, o)
            gw = (gflat.T @ cols).reshape(wd.shape)
        if bias is not None and bias.requires_grad:
            gb = g4.sum(axis=(0, 2, 3))
        if x.requires_grad:
            gp = np.pad(g4, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
            flipped = np.ascontiguousarray(wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
            gxp, _ = _correlate(gp, flipped)
            gx = gxp[:, :, p:p + h, p:p + w_]
            if not batched:
                gx = gx[0]
            gx = np.ascontiguousarray(gx)
        return gx, gw, gb

    parents = [x, weight, bias if bias is not None else Tensor(np.zeros(0, wd.dtype))]
    return make_result(out if batched else out[0], parents, backward)


def pixel_shuffle(x: Tensor, scale: int) -> Tensor:
    """Rearrange (..., C*s*s, H, W) into (..., C, s*H, s*W).

    ``out[c, s*h + dy, s*w + dx] = in[c*s*s + dy*s + dx, h, w]``.
    """
    s = int(scale)
    if s < 1:
        raise ConfigurationError(f"pixel_shuffle scale must be >= 1, got {s}")
    *lead, ch, h, w = x.shape
    if ch % (s * s):
        raise ConfigurationError(f"pixel_shuffle: {ch} channels not divisible by scale^2 = {s * s}")
    c = ch // (s * s)
    nl = len(lead)
    y = reshape(x, (*lead, c, s, s, h, w))
    perm = list(range(nl)) + [nl, nl + 3, nl + 1, nl + 4, nl + 2]
    y = transpose(y, perm)
    return reshape(y, (*lead, c, h * s, w * s))


def pixel_unshuffle(x: Tensor, scale: int) -> Tensor:
    """Exact inverse of :func:`pixel_shuffle`."""
    s = int(scale)
    *lead, c, hs, ws = x.shape
    if hs % s or ws % s:
        raise ConfigurationError(f"pixel_unshuffle: spatial dims {hs}x{ws} not divisible by {s}")
    h, w = hs // s, ws // s
    nl = len(lead)
    y = reshape(x, (*lead, c, h, s, w, s))
    perm = list(range(nl)) + [nl, nl + 2, nl + 4, nl + 1, nl + 3]
    y = transpose(y, perm)
    return reshape(y, (*lead, c * s * s, h, w))


def causal_depthwise_conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Per-channel causal convolution along the token axis.

    ``x`` is (..., L, C), ``weight`` is (C, K). Output token ``t`` sees
    inputs ``t-K+1 .. t``; positions before the sequence start read zeros.
    """
    c, k = weight.shape
    if x.shape[-1] != c:
        raise DimensionError(f"depthwise conv channel mismatch: input {x.shape} vs weight {weight.shape}")
    length = x.shape[-2]
    widths = [(0, 0)] * x.ndim
    widths[-2] = (k - 1, 0)
    xp = pad(x, widths)
    out = None
    for j in range(k):
        term = xp[..., j:j + length, :] * weight[:, j]
        out = term if out is None else out + term
    if bias is not None:
        out = out + bias
    return out
