"""Neural kernels over :class:`Tensor` with hand-written backward rules."""
from __future__ import annotations

import math

import numpy as np

from .tensor import ShapeError, Tensor, make_node, matmul, swapaxes, _wrap

CHECK_FINITE = True


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if CHECK_FINITE and not np.isfinite(arr).all():
        raise FloatingPointError(f"{op} produced non-finite values")
    return arr


# -- convolution ----------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int | tuple[int, int] = 0) -> Tensor:
    """2-D cross-correlation. ``x`` is ``[C,H,W]`` or ``[N,C,H,W]``.

    Output extent per axis is ``(H + 2*pad - k) // stride + 1``.
    """
    squeeze = x.ndim == 3
    if squeeze:
        from .tensor import reshape
        x = reshape(x, (1,) + x.dims)
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be 3-D or 4-D, got dims {x.dims}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-D, got dims {weight.dims}")
    n, c, h, w = x.dims
    o, ci, kh, kw = weight.dims
    if ci != c:
        raise ShapeError(f"conv2d: channel axis mismatch, input has {c}, kernel expects {ci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"conv2d: kernel extents must be odd, got {kh}x{kw}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    ph, pw = (padding, padding) if isinstance(padding, int) else padding
    hp, wp = h + 2 * ph, w + 2 * pw
    if hp < kh:
        raise ShapeError(f"conv2d: height axis too small ({h}+2*{ph} < {kh})")
    if wp < kw:
        raise ShapeError(f"conv2d: width axis too small ({w}+2*{pw} < {kw})")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1

    xd = x.data
    # channels-last im2col: rows are output pixels, columns (kh, kw, C)
    xt = np.ascontiguousarray(xd.transpose(0, 2, 3, 1))
    if ph or pw:
        xt = np.pad(xt, ((0, 0), (ph, ph), (pw, pw), (0, 0)))
    cols = np.empty((n, ho, wo, kh, kw, c), dtype=xd.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xt[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
    cols = cols.reshape(n * ho * wo, kh * kw * c)
    wd = weight.data
    wmat = np.ascontiguousarray(wd.transpose(0, 2, 3, 1)).reshape(o, kh * kw * c)
    out = (cols @ wmat.T).reshape(n, ho, wo, o)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bias is not None:
        out += bias.data.reshape(1, o, 1, 1)
    _check_finite(out, "conv2d")

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * ho * wo, o)
        gw = (g2.T @ cols).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        dcols = (g2 @ wmat).reshape(n, ho, wo, kh, kw, c)
        gxt = np.zeros((n, hp, wp, c), dtype=xd.dtype)
        for i in range(kh):
            for j in range(kw):
                gxt[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, :, i, j]
        gx = gxt[:, ph:ph + h, pw:pw + w].transpose(0, 3, 1, 2)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (np.ascontiguousarray(gx), np.ascontiguousarray(gw)) + ((gb,) if bias is not None else ())

    parents = (x, weight) + ((bias,) if bias is not None else ())
    result = make_node(out, parents, bw, "conv2d")
    if squeeze:
        from .tensor import reshape
        result = reshape(result, result.dims[1:])
    return result


# -- softmax / attention --------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    xd = x.data
    if xd.shape[axis] < 1:
        raise ShapeError("softmax over an empty axis")
    shifted = xd - xd.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    _check_finite(out, "softmax")

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_node(out, (x,), bw, "softmax")


def scaled_dot_attention(query: Tensor, key: Tensor, value: Tensor) -> Tensor:
    """softmax(Q K^T / sqrt(d)) V over the last two axes; leading axes batch."""
    d = query.dims[-1]
    if key.dims[-1] != d:
        raise ShapeError(f"attention: query width {d} != key width {key.dims[-1]}")
    if key.dims[-2] != value.dims[-2]:
        raise ShapeError(f"attention: {key.dims[-2]} keys but {value.dims[-2]} values")
    if key.dims[-2] < 1:
        raise ShapeError("attention needs at least one key")
    scores = matmul(query, swapaxes(key, -1, -2)) * (1.0 / math.sqrt(d))
    return matmul(softmax(scores, axis=-1), value)


# -- normalization --------------------------------------------------------

def group_norm(x: Tensor, groups: int, gamma: Tensor | None = None,
               beta: Tensor | None = None, eps: float = 1e-5) -> Tensor:
    """Group normalization over ``[N,C,...]`` with per-channel affine."""
    n, c = x.dims[:2]
    if c % groups:
        raise ShapeError(f"group_norm: {c} channels not divisible into {groups} groups")
    xd = x.data
    xg = xd.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv).reshape(xd.shape)
    bshape = (1, c) + (1,) * (xd.ndim - 2)
    out = xhat
    if gamma is not None:
        out = out * gamma.data.reshape(bshape)
    if beta is not None:
        out = out + beta.data.reshape(bshape)
    _check_finite(out, "group_norm")
    red = (0,) + tuple(range(2, xd.ndim))

    def bw(g):
        gx_hat = g * gamma.data.reshape(bshape) if gamma is not None else g
        gh = gx_hat.reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        gx = inv * (gh - gh.mean(axis=2, keepdims=True) - xh * (gh * xh).mean(axis=2, keepdims=True))
        grads = [gx.reshape(xd.shape)]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=red))
        if beta is not None:
            grads.append(g.sum(axis=red))
        return tuple(grads)

    parents = (x,) + tuple(p for p in (gamma, beta) if p is not None)
    return make_node(out, parents, bw, "group_norm")


def layer_norm(x: Tensor, gamma: Tensor | None = None, beta: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis."""
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    var = xd.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mu) * inv
    out = xhat
    if gamma is not None:
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    _check_finite(out, "layer_norm")
    red = tuple(range(xd.ndim - 1))

    def bw(g):
        gh = g * gamma.data if gamma is not None else g
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=red))
        if beta is not None:
            grads.append(g.sum(axis=red))
        return tuple(grads)

    parents = (x,) + tuple(p for p in (gamma, beta) if p is not None)
    return make_node(out, parents, bw, "layer_norm")


# -- resampling -----------------------------------------------------------

def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Nearest-neighbour upsampling of the last two axes."""
    xd = x.data
    out = xd.repeat(factor, axis=-2).repeat(factor, axis=-1)

    def bw(g):
        s = g.shape
        g = g.reshape(s[:-2] + (s[-2] // factor, factor, s[-1] // factor, factor))
        return (g.sum(axis=(-3, -1)),)

    return make_node(out, (x,), bw, "upsample")


def avg_pool(x: Tensor, size: int) -> Tensor:
    """Non-overlapping ``size x size`` mean pooling of the last two axes."""
    if size == 1:
        return x
    xd = x.data
    s = xd.shape
    if s[-2] % size or s[-1] % size:
        raise ShapeError(f"avg_pool: extents {s[-2:]} not divisible by {size}")
    out = xd.reshape(s[:-2] + (s[-2] // size, size, s[-1] // size, size)).mean(axis=(-3, -1))

    def bw(g):
        return (g.repeat(size, axis=-2).repeat(size, axis=-1) / (size * size),)

    return make_node(out, (x,), bw, "avg_pool")


def mse(pred: Tensor, target) -> Tensor:
    diff = pred - _wrap(target, pred)
    return (diff * diff).mean()
