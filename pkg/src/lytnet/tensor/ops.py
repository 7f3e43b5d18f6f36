"""Differentiable operators on NHWC tensors.

Each op computes its forward result with numpy and returns a closure giving
the gradients of its inputs. Binary ops accept equal shapes, scalars, and a
single broadcast form: an ``(N, 1, 1, C)`` descriptor against an
``(N, H, W, C)`` feature map.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .core import Tensor, as_tensor, make_result

__all__ = [
    "add", "sub", "mul", "div", "neg", "power", "exp", "log", "sqrt", "abs",
    "relu", "tanh", "clamp_min", "sum", "mean", "reshape", "transpose",
    "getitem", "concat", "concat_channels", "pad_reflect", "matmul", "dense",
    "conv2d", "depthwise_conv2d", "softmax", "layer_norm", "pool2d",
    "upsample_bilinear", "smooth_l1_elementwise", "soft_histogram", "elementwise",
]


# ---------------------------------------------------------------- helpers

def _is_scalar_shape(shape) -> bool:
    return all(s == 1 for s in shape)


def _check_binary(a: Tensor, b: Tensor, op: str) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or _is_scalar_shape(sa) or _is_scalar_shape(sb):
        return
    if len(sa) == 4 and len(sb) == 4 and sa[0] == sb[0] and sa[3] == sb[3]:
        if sa[1:3] == (1, 1) or sb[1:3] == (1, 1):
            return
    raise ValueError(f"{op}: incompatible shapes {sa} and {sb}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b, op):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    _check_binary(a, b, op)
    return a, b


# ---------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _pair(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b, "mul")

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b, "div")

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * a.data / b.data, b.shape)

    return make_result(a.data / b.data, (a, b), bw, "div")


def neg(x: Tensor) -> Tensor:
    return make_result(-x.data, (x,), lambda g: (-g,), "neg")


def power(x: Tensor, p: float) -> Tensor:
    p = float(p)
    out = x.data ** p

    def bw(g):
        return (g * p * x.data ** (p - 1.0),)

    return make_result(out, (x,), bw, "power")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    return make_result(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_result(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return make_result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def clamp_min(x: Tensor, floor: float) -> Tensor:
    mask = x.data > floor
    out = np.where(mask, x.data, np.asarray(floor, dtype=x.dtype))
    return make_result(out, (x,), lambda g: (g * mask,), "clamp_min")


def smooth_l1_elementwise(d: Tensor, beta: float = 1.0) -> Tensor:
    """Per-element Huber penalty: ``0.5 d^2 / beta`` inside ``|d| < beta``, ``|d| - beta/2`` outside."""
    ad = np.abs(d.data)
    inside = ad < beta
    out = np.where(inside, 0.5 * d.data * d.data / beta, ad - 0.5 * beta).astype(d.dtype, copy=False)

    def bw(g):
        return (g * np.where(inside, d.data / beta, np.sign(d.data)),)

    return make_result(out, (d,), bw, "smooth_l1")


# --------------------------------------------------------- reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return make_result(np.asarray(out, dtype=x.dtype), (x,), bw, "mean")


# ------------------------------------------------------------- shape

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(shape)
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def getitem(x: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing; fancy indexing is not supported."""
    if not isinstance(index, tuple):
        index = (index,)
    if any(not isinstance(i, (slice, int, type(Ellipsis))) for i in index):
        raise TypeError("only basic slicing is differentiable")
    out = x.data[index]

    def bw(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return make_result(np.ascontiguousarray(out), (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[d] != tensors[0].shape[d] for d in range(t.ndim) if d != ax
        ):
            raise ValueError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    sizes = [t.shape[ax] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=ax)

    def bw(g):
        return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=ax))

    return make_result(out, tensors, bw, "concat")


def concat_channels(*tensors: Tensor) -> Tensor:
    return concat(tensors, axis=-1)


def _reflect_index(n: int, before: int, after: int) -> np.ndarray:
    if before >= n or after >= n:
        raise ValueError(f"reflect padding ({before}, {after}) too large for extent {n}")
    idx = np.arange(-before, n + after)
    idx = np.abs(idx)
    over = idx > n - 1
    idx[over] = 2 * (n - 1) - idx[over]
    return idx


def pad_reflect(x: Tensor, pad_h: tuple[int, int], pad_w: tuple[int, int]) -> Tensor:
    """Mirror-pad the spatial axes of an NHWC tensor (edge pixel not repeated)."""
    ih = _reflect_index(x.shape[1], *pad_h)
    iw = _reflect_index(x.shape[2], *pad_w)
    out = x.data[:, ih][:, :, iw]

    def bw(g):
        gh = np.zeros((g.shape[0], x.shape[1], g.shape[2], g.shape[3]), dtype=g.dtype)
        np.add.at(gh, (slice(None), ih), g)
        gx = np.zeros(x.shape, dtype=g.dtype)
        np.add.at(gx, (slice(None), slice(None), iw), gh)
        return (gx,)

    return make_result(out, (x,), bw, "pad_reflect")


# ------------------------------------------------------------ linear

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``(..., m, k) @ (..., k, n)`` with equal batch dims."""
    if a.shape[-1] != b.shape[-2] or a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data

    def bw(g):
        return g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g

    return make_result(out, (a, b), bw, "matmul")


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Fully connected layer over the last axis: ``x @ W (+ b)``."""
    din, dout = weight.shape
    if x.shape[-1] != din:
        raise ValueError(f"dense: input has {x.shape[-1]} features, weight expects {din}")
    if bias is not None and bias.shape != (dout,):
        raise ValueError(f"dense: bias shape {bias.shape} != ({dout},)")
    x2 = x.data.reshape(-1, din)
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    out = out.reshape(x.shape[:-1] + (dout,))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, dout)
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_result(out, parents, bw, "dense")


def _same_pads(n: int, k: int, stride: int) -> tuple[int, int, int]:
    out = -(-n // stride)
    before = (k - 1) // 2
    after = max((out - 1) * stride + k - n - before, 0)
    return out, before, after


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: str = "same") -> Tensor:
    """2-D cross-correlation, NHWC input and ``(kh, kw, Cin, Cout)`` weight.

    ``same`` zero-pads so the output has ``ceil(H / stride)`` rows; the first
    output row is centred on input row 0, so stride 2 samples even coordinates.
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d expects NHWC input, got shape {x.shape}")
    kh, kw, cin, cout = weight.shape
    n, h, w, c = x.shape
    if c != cin:
        raise ValueError(f"conv2d: input has {c} channels but weight expects {cin}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if padding == "same":
        ho, pt, pb = _same_pads(h, kh, stride)
        wo, pl, pr = _same_pads(w, kw, stride)
    elif padding == "valid":
        if kh > h or kw > w:
            raise ValueError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{w}")
        ho, wo = (h - kh) // stride + 1, (w - kw) // stride + 1
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x.data
    taps = [(i, j) for i in range(kh) for j in range(kw)]
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    cols = np.concatenate([xp[:, i:i + hs:stride, j:j + ws:stride, :] for i, j in taps], axis=-1)
    cols2 = cols.reshape(-1, kh * kw * cin)
    wmat = weight.data.reshape(kh * kw * cin, cout)
    out = cols2 @ wmat
    if bias is not None:
        out = out + bias.data
    out = out.reshape(n, ho, wo, cout)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gx = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(n, ho, wo, kh * kw, cin)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for t, (i, j) in enumerate(taps):
                gxp[:, i:i + hs:stride, j:j + ws:stride, :] += gcols[:, :, :, t, :]
            gx = gxp[:, pt:pt + h, pl:pl + w, :]
        gw = (cols2.T @ g2).reshape(weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_result(out, parents, bw, "conv2d")


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     padding: str = "same") -> Tensor:
    """Per-channel correlation with a ``(kh, kw, C)`` kernel, stride 1."""
    if x.ndim != 4:
        raise ValueError(f"depthwise_conv2d expects NHWC input, got shape {x.shape}")
    kh, kw, c = weight.shape
    n, h, w, cx = x.shape
    if c != cx:
        raise ValueError(f"depthwise_conv2d: input has {cx} channels but weight has {c}")
    if bias is not None and bias.shape != (c,):
        raise ValueError(f"depthwise_conv2d: bias shape {bias.shape} != ({c},)")
    if padding == "same":
        ho, wo = h, w
        pt, pl = (kh - 1) // 2, (kw - 1) // 2
        pb, pr = kh - 1 - pt, kw - 1 - pl
        xp = np.pad(x.data, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    elif padding == "valid":
        if kh > h or kw > w:
            raise ValueError(f"depthwise_conv2d: kernel {kh}x{kw} larger than input {h}x{w}")
        ho, wo = h - kh + 1, w - kw + 1
        pt = pl = 0
        xp = x.data
    else:
        raise ValueError(f"unknown padding {padding!r}")
    out = np.zeros((n, ho, wo, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            out += xp[:, i:i + ho, j:j + wo, :] * weight.data[i, j]
    if bias is not None:
        out += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + ho, j:j + wo, :] += g * weight.data[i, j]
            gx = gxp[:, pt:pt + h, pl:pl + w, :]
        if weight.requires_grad:
            gw = np.empty(weight.shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gw[i, j] = (g * xp[:, i:i + ho, j:j + wo, :]).sum(axis=(0, 1, 2))
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 1, 2))

    return make_result(out, parents, bw, "depthwise_conv2d")


# ------------------------------------------------------ normalisation

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), bw, "softmax")


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last (channel) axis at every position, then scale and shift."""
    c = x.shape[-1]
    if gain.shape != (c,) or shift.shape != (c,):
        raise ValueError(f"layer_norm: gain/shift must have shape ({c},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + shift.data
    red = tuple(range(x.ndim - 1))

    def bw(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_result(out.astype(x.dtype, copy=False), (x, gain, shift), bw, "layer_norm")


# ------------------------------------------------------------ spatial

def pool2d(x: Tensor, kind: str = "avg", window: int = 2, stride: int | None = None) -> Tensor:
    """``avg``/``max`` pooling with a square window (no padding) or ``global_avg``."""
    if kind == "global_avg":
        return mean(x, axis=(1, 2), keepdims=True)
    if kind not in ("avg", "max"):
        raise ValueError(f"unknown pooling kind {kind!r}")
    stride = stride or window
    n, h, w, c = x.shape
    if window > h or window > w:
        raise ValueError(f"pool2d: window {window} larger than input {h}x{w}")
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1
    hs, ws = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    taps = [(i, j) for i in range(window) for j in range(window)]
    views = [x.data[:, i:i + hs:stride, j:j + ws:stride, :] for i, j in taps]

    if kind == "avg":
        out = np.add.reduce(views) / (window * window)

        def bw(g):
            gx = np.zeros(x.shape, dtype=g.dtype)
            gs = g / (window * window)
            for i, j in taps:
                gx[:, i:i + hs:stride, j:j + ws:stride, :] += gs
            return (gx,)

        return make_result(out.astype(x.dtype, copy=False), (x,), bw, "avg_pool")

    stack = np.stack(views)
    arg = stack.argmax(axis=0)
    out = np.take_along_axis(stack, arg[None], axis=0)[0]

    def bw_max(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        for t, (i, j) in enumerate(taps):
            gx[:, i:i + hs:stride, j:j + ws:stride, :] += g * (arg == t)
        return (gx,)

    return make_result(out, (x,), bw_max, "max_pool")


def _bilinear_matrix(n: int, scale: int, dtype) -> np.ndarray:
    """Interpolation weights, half-pixel centres, edges clamped."""
    m = np.zeros((n * scale, n), dtype=dtype)
    src = (np.arange(n * scale) + 0.5) / scale - 0.5
    src = np.clip(src, 0, n - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = src - lo
    rows = np.arange(n * scale)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def upsample_bilinear(x: Tensor, scale: int) -> Tensor:
    if scale < 2:
        raise ValueError(f"upsample scale must be >= 2, got {scale}")
    a = _bilinear_matrix(x.shape[1], scale, x.dtype)
    b = _bilinear_matrix(x.shape[2], scale, x.dtype)
    t = np.einsum("ih,nhwc->niwc", a, x.data)
    out = np.einsum("jw,niwc->nijc", b, t)

    def bw(g):
        gt = np.einsum("jw,nijc->niwc", b, g)
        return (np.einsum("ih,niwc->nhwc", a, gt),)

    return make_result(out, (x,), bw, "upsample_bilinear")


# ----------------------------------------------------------- histogram

def soft_histogram(x: Tensor, bins: int, bandwidth: float, lo: float = 0.0, hi: float = 1.0,
                   chunk: int = 8192) -> Tensor:
    """Gaussian soft-binned counts of a flat tensor; bin centres at ``lo + (b + 0.5) * width``.

    Returns unnormalised mass per bin, differentiable w.r.t. the sample values.
    """
    vals = x.data.reshape(-1)
    centers = (lo + (np.arange(bins) + 0.5) * (hi - lo) / bins).astype(x.dtype)
    inv2 = 1.0 / (2.0 * bandwidth * bandwidth)
    out = np.zeros(bins, dtype=x.dtype)
    for s in range(0, vals.size, chunk):
        d = vals[s:s + chunk, None] - centers[None, :]
        out += np.exp(-d * d * inv2).sum(axis=0)

    def bw(g):
        gx = np.empty_like(vals)
        for s in range(0, vals.size, chunk):
            d = vals[s:s + chunk, None] - centers[None, :]
            k = np.exp(-d * d * inv2)
            gx[s:s + chunk] = (k * (-2.0 * inv2) * d) @ g
        return (gx.reshape(x.shape),)

    return make_result(out, (x,), bw, "soft_histogram")


# ------------------------------------------------------------ dispatch

_UNARY = {"relu": relu, "tanh": tanh, "exp": exp, "abs": abs, "neg": neg}
_BINARY = {"add": add, "mul": mul, "sub": sub, "div": div}


def elementwise(x: Tensor, fn: str, other=None) -> Tensor:
    """Named pointwise op: relu, tanh, add, mul, sub, div, concat_channels, ..."""
    if fn in _UNARY:
        return _UNARY[fn](x)
    if fn in _BINARY:
        return _BINARY[fn](x, other)
    if fn == "concat_channels":
        return concat_channels(x, other)
    raise ValueError(f"unknown elementwise fn {fn!r}")

