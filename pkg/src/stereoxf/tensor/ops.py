"""Differentiable ops over :class:`Tensor`.

Image-like tensors are laid out (batch, channel, height, width).
"""

from __future__ import annotations

import numpy as np

from .core import ShapeError, Tensor, as_tensor, make_op

LEAKY_SLOPE = 0.2


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise --------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.data, b.data)
    sa, sb = a.shape, b.shape
    return make_op(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.data, b.data)
    sa, sb = a.shape, b.shape
    return make_op(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.data, b.data)
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_op(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a.data, b.data)
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        ga = _unbroadcast(g / bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None
        return ga, gb

    return make_op(out, (a, b), backward)


def absolute(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)
    return make_op(np.abs(a.data), (a,), lambda g: (g * sign,))


def max2(a, b) -> Tensor:
    """Elementwise maximum; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("max2", a.data, b.data)
    pick_a = a.data >= b.data

    def backward(g):
        return (_unbroadcast(np.where(pick_a, g, 0), a.shape),
                _unbroadcast(np.where(pick_a, 0, g), b.shape))

    return make_op(np.maximum(a.data, b.data), (a, b), backward)


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "div": div, "max2": max2}


def elementwise(kind: str, a, b=None) -> Tensor:
    if kind == "abs":
        return absolute(a)
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(a, b)


# -- activations -----------------------------------------------------------------

def leaky_relu(x, slope: float = LEAKY_SLOPE) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    scale = np.where(pos, 1.0, slope).astype(x.dtype)
    return make_op(x.data * scale, (x,), lambda g: (g * scale,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return make_op(out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return make_op(out, (x,), lambda g: (g * (1.0 - out * out),))


def activation(kind: str, x) -> Tensor:
    if kind == "leaky_relu":
        return leaky_relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "tanh":
        return tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


# -- reductions ------------------------------------------------------------------

def total(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return make_op(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, x.size
    return make_op(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                   lambda g: (np.full(shape, g / n, dtype=x.dtype),))


def mean_abs(x, mask=None) -> Tensor:
    """sum(|x| * mask) / max(sum(mask), 1); plain mean of |x| without a mask."""
    x = as_tensor(x)
    sign = np.sign(x.data)
    if mask is None:
        n = x.size
        val = np.abs(x.data).sum() / n
        return make_op(np.asarray(val, dtype=x.dtype), (x,),
                       lambda g: (g * sign / n,))
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    try:
        m = np.broadcast_to(m, x.shape).astype(x.dtype)
    except ValueError:
        raise ShapeError("mean_abs mask", x.shape, np.shape(m)) from None
    denom = max(float(m.sum()), 1.0)
    val = (np.abs(x.data) * m).sum() / denom
    return make_op(np.asarray(val, dtype=x.dtype), (x,),
                   lambda g: (g * sign * m / denom,))


def reduce(kind: str, x, mask=None) -> Tensor:
    if kind == "mean_abs":
        return mean_abs(x, mask)
    if kind == "mean":
        if mask is None:
            return mean(x)
        x = as_tensor(x)
        m = np.broadcast_to(np.asarray(mask.data if isinstance(mask, Tensor) else mask),
                            x.shape).astype(x.dtype)
        denom = max(float(m.sum()), 1.0)
        return make_op(np.asarray((x.data * m).sum() / denom, dtype=x.dtype), (x,),
                       lambda g: (g * m / denom,))
    raise ValueError(f"unknown reduction {kind!r}")


# -- structural --------------------------------------------------------------------

def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return make_op(out, tensors, backward)


def index(x, idx) -> Tensor:
    x = as_tensor(x)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        if _fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return make_op(np.array(x.data[idx]), (x,), backward)


def _fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return make_op(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def repeat_channels(x, times: int) -> Tensor:
    x = as_tensor(x)
    c = x.shape[1]
    return make_op(np.repeat(x.data, times, axis=1), (x,),
                   lambda g: (g.reshape(g.shape[0], c, times, *g.shape[2:]).sum(axis=2),))


def channel_sum(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return make_op(x.data.sum(axis=1, keepdims=True), (x,),
                   lambda g: (np.broadcast_to(g, shape).copy(),))


def channel_max(x) -> tuple[Tensor, np.ndarray]:
    """Per-pixel max over channels and its argmax (ties go to the lowest index).

    The backward pass routes the whole upstream gradient to the argmax channel.
    """
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] < 1:
        raise ShapeError("channel_max", x.shape)
    arg = np.argmax(x.data, axis=1)[:, None]
    vals = np.take_along_axis(x.data, arg, axis=1)
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(full, arg, g, axis=1)
        return (full,)

    return make_op(vals, (x,), backward), arg


# -- convolution -------------------------------------------------------------------

def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with zero padding."""
    x, weight = as_tensor(x), as_tensor(weight)
    bias = as_tensor(bias) if bias is not None else None
    if stride < 1:
        raise ValueError(f"conv2d: stride must be positive, got {stride}")
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError("conv2d bias", weight.shape, bias.shape)
    if stride == 1:
        out, backward = _conv_s1(x.data, weight.data, padding)
    else:
        out, backward = _conv_strided(x.data, weight.data, stride, padding)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def vjp(g):
        gx, gw = backward(g, x.requires_grad, weight.requires_grad)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return make_op(out, parents, vjp)


def _conv_s1(x: np.ndarray, w: np.ndarray, p: int):
    # Flat-offset GEMM: each kernel tap is a contiguous column window of the
    # padded, row-flattened input.
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    hp, wp = h + 2 * p, wd + 2 * p
    ho, wo = hp - kh + 1, wp - kw + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d (kernel larger than padded input)", x.shape, w.shape)
    span = ho * wp
    offsets = [dy * wp + dx for dy in range(kh) for dx in range(kw)]
    dtype = np.result_type(x.dtype, w.dtype)
    buf = np.zeros((n, c, hp * wp + kw - 1), dtype=dtype)
    buf[:, :, :hp * wp].reshape(n, c, hp, wp)[:, :, p:p + h, p:p + wd] = x
    w_taps = w.transpose(2, 3, 0, 1).reshape(kh * kw * o, c).astype(dtype, copy=False)
    out = np.empty((n, o, ho, wo), dtype=dtype)
    for b in range(n):
        y = (w_taps @ buf[b]).reshape(kh * kw, o, -1)
        acc = y[0, :, offsets[0]:offsets[0] + span].copy()
        for k in range(1, len(offsets)):
            acc += y[k, :, offsets[k]:offsets[k] + span]
        out[b] = acc.reshape(o, ho, wp)[:, :, :wo]

    def backward(g, want_x, want_w):
        g_ext = np.zeros((n, o, ho, wp), dtype=dtype)
        g_ext[:, :, :, :wo] = g
        g_ext = g_ext.reshape(n, o, span)
        gx = gw = None
        if want_x:
            w_taps_t = w.transpose(2, 3, 1, 0).reshape(kh * kw * c, o).astype(dtype, copy=False)
            gx = np.empty((n, c, h, wd), dtype=dtype)
            for b in range(n):
                z = (w_taps_t @ g_ext[b]).reshape(kh * kw, c, span)
                dbuf = np.zeros((c, hp * wp + kw - 1), dtype=dtype)
                for k, off in enumerate(offsets):
                    dbuf[:, off:off + span] += z[k]
                gx[b] = dbuf[:, :hp * wp].reshape(c, hp, wp)[:, p:p + h, p:p + wd]
        if want_w:
            gw_taps = np.zeros((kh * kw, o, c), dtype=dtype)
            for b in range(n):
                for k, off in enumerate(offsets):
                    gw_taps[k] += g_ext[b] @ buf[b, :, off:off + span].T
            gw = gw_taps.reshape(kh, kw, o, c).transpose(2, 3, 0, 1).astype(w.dtype, copy=False)
        return gx, gw

    return out, backward


def _conv_strided(x: np.ndarray, w: np.ndarray, s: int, p: int):
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    ho = (h + 2 * p - kh) // s + 1
    wo = (wd + 2 * p - kw) // s + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d (kernel larger than padded input)", x.shape, w.shape)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::s, ::s][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * kh * kw)
    wmat = w.reshape(o, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, o).transpose(0, 3, 1, 2).copy()

    def backward(g, want_x, want_w):
        gm = g.transpose(0, 2, 3, 1).reshape(n, ho * wo, o)
        gx = gw = None
        if want_x:
            dcols = (gm @ wmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros_like(xp)
            for dy in range(kh):
                for dx in range(kw):
                    dxp[:, :, dy:dy + s * ho:s, dx:dx + s * wo:s] += \
                        dcols[:, :, :, :, dy, dx].transpose(0, 3, 1, 2)
            gx = dxp[:, :, p:p + h, p:p + wd]
        if want_w:
            gw = np.einsum("npo,npk->ok", gm, cols).reshape(w.shape)
        return gx, gw

    return out, backward


# -- resampling --------------------------------------------------------------------

def _up_axis(x: np.ndarray, axis: int) -> np.ndarray:
    n = x.shape[axis]
    idx = np.arange(n)
    prev = np.take(x, np.clip(idx - 1, 0, n - 1), axis=axis)
    nxt = np.take(x, np.clip(idx + 1, 0, n - 1), axis=axis)
    even = 0.25 * prev + 0.75 * x
    odd = 0.75 * x + 0.25 * nxt
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(x.shape)
    shape[axis] = 2 * n
    return out.reshape(shape)


def _up_axis_t(g: np.ndarray, axis: int) -> np.ndarray:
    g = np.moveaxis(g, axis, -1)
    ge, go = g[..., 0::2], g[..., 1::2]
    dx = 0.75 * (ge + go)
    dx[..., :-1] += 0.25 * ge[..., 1:]
    dx[..., 0] += 0.25 * ge[..., 0]
    dx[..., 1:] += 0.25 * go[..., :-1]
    dx[..., -1] += 0.25 * go[..., -1]
    return np.moveaxis(dx, -1, axis)


def upsample_bilinear2x(x) -> Tensor:
    """Double H and W with half-pixel-centre (align_corners=False) bilinear weights."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("upsample_bilinear2x", x.shape)
    out = _up_axis(_up_axis(x.data, 2), 3)
    return make_op(out, (x,), lambda g: (_up_axis_t(_up_axis_t(g, 3), 2),))


def grid_sample_bilinear(source, sample_x, sample_y) -> Tensor:
    """Bilinearly sample ``source`` at absolute pixel coordinates.

    ``sample_x``/``sample_y`` are (N, 1, Ho, Wo); coordinates outside the
    image clamp to the border (edge replication). Differentiable with
    respect to the source values and both coordinate maps.
    """
    src = as_tensor(source)
    sx, sy = as_tensor(sample_x), as_tensor(sample_y)
    if sx.shape != sy.shape:
        raise ShapeError("grid_sample coordinates", sx.shape, sy.shape)
    if src.ndim != 4 or sx.ndim != 4 or sx.shape[1] != 1 or sx.shape[0] != src.shape[0]:
        raise ShapeError("grid_sample", src.shape, sx.shape)
    n, c, h, w = src.shape
    _, _, ho, wo = sx.shape
    dtype = np.result_type(src.dtype, sx.dtype, sy.dtype)

    xc = np.clip(sx.data[:, 0], 0, w - 1).astype(dtype, copy=False)
    yc = np.clip(sy.data[:, 0], 0, h - 1).astype(dtype, copy=False)
    # at the last row/column the lower corner is the pixel itself (frac 0), so integer samples are exact
    x0 = np.floor(xc).astype(np.int64)
    y0 = np.floor(yc).astype(np.int64)
    fx = xc - x0
    fy = yc - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    inside_x = (sx.data[:, 0] > 0) & (sx.data[:, 0] < w - 1)
    inside_y = (sy.data[:, 0] > 0) & (sy.data[:, 0] < h - 1)

    flat = src.data.reshape(n, c, h * w)
    i00, i01 = y0 * w + x0, y0 * w + x1
    i10, i11 = y1 * w + x0, y1 * w + x1
    out = np.empty((n, c, ho, wo), dtype=dtype)
    corners = []
    for b in range(n):
        v00 = flat[b][:, i00[b]]
        v01 = flat[b][:, i01[b]]
        v10 = flat[b][:, i10[b]]
        v11 = flat[b][:, i11[b]]
        ax, ay = fx[b], fy[b]
        top = v00 + ax * (v01 - v00)
        bot = v10 + ax * (v11 - v10)
        out[b] = top + ay * (bot - top)
        corners.append((v00, v01, v10, v11))

    def backward(g):
        gsrc = np.zeros((n, c, h * w), dtype=dtype) if src.requires_grad else None
        gx = np.zeros((n, 1, ho, wo), dtype=dtype) if sx.requires_grad else None
        gy = np.zeros((n, 1, ho, wo), dtype=dtype) if sy.requires_grad else None
        hw = h * w
        for b in range(n):
            ax, ay = fx[b], fy[b]
            gb = g[b]
            if gsrc is not None:
                chan = (np.arange(c) * hw)[:, None, None]
                for idx, wgt in ((i00[b], (1 - ax) * (1 - ay)), (i01[b], ax * (1 - ay)),
                                 (i10[b], (1 - ax) * ay), (i11[b], ax * ay)):
                    gsrc[b] += np.bincount((idx[None] + chan).ravel(),
                                           weights=(gb * wgt[None]).ravel(),
                                           minlength=c * hw).reshape(c, hw)
            v00, v01, v10, v11 = corners[b]
            if gx is not None:
                d = (1 - ay) * (v01 - v00) + ay * (v11 - v10)
                gx[b, 0] = (gb * d).sum(axis=0) * inside_x[b]
            if gy is not None:
                top = v00 + ax * (v01 - v00)
                bot = v10 + ax * (v11 - v10)
                gy[b, 0] = (gb * (bot - top)).sum(axis=0) * inside_y[b]
        if gsrc is not None:
            gsrc = gsrc.reshape(n, c, h, w).astype(src.dtype, copy=False)
        return gsrc, gx, gy

    return make_op(out, (src, sx, sy), backward)
