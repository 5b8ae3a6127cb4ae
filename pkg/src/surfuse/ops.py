"""Differentiable primitives.

Every function takes :class:`~surfuse.tensor.Tensor` operands (plain arrays
and scalars are wrapped as constants) and returns a new tensor. When a tape is
active and an operand requires a gradient, a backward rule is recorded.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import (
    ConfigError,
    NumericError,
    ShapeError,
    Tensor,
    current_tape,
    get_default_dtype,
)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=get_default_dtype()))


def _emit(arr: np.ndarray, inputs: tuple, backward, op: str) -> Tensor:
    tape = current_tape()
    needs = tape is not None and any(tape.tracks(t) for t in inputs)
    out = Tensor._wrap(arr, needs)
    if needs:
        tape.record(inputs, out, backward, op)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _emit(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _emit(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit(a.data * b.data, (a, b), backward, "mul")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = x.data.dtype.type(c)
    return _emit(x.data * c, (x,), lambda g: (g * c,), "scale")


def relu(x) -> Tensor:
    x = as_tensor(x)
    y = np.maximum(x.data, x.dtype.type(0))
    return _emit(y, (x,), lambda g: (g * (y > 0),), "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    return _emit(s, (x,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return _emit(y, (x,), lambda g: (g * y,), "exp")


def dropout(x, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are rescaled by 1/(1-p) so eval mode is identity."""
    if not 0.0 <= p < 1.0:
        raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in training mode needs an explicit rng")
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return _emit(x.data * mask, (x,), lambda g: (g * mask,), "dropout")


# ---------------------------------------------------------------------------
# shape manipulation and reductions


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inverse = np.argsort(axes)
    return _emit(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def index(x, idx) -> Tensor:
    x = as_tensor(x)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _emit(np.array(x.data[idx]), (x,), backward, "index")


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).astype(x.dtype, copy=True),)

    return _emit(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), backward, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _emit(a.data @ b.data, (a, b), backward, "matmul")


# ---------------------------------------------------------------------------
# layers


def linear(x, w, b=None) -> Tensor:
    """y[..., j] = sum_k x[..., k] * w[j, k] + b[j]."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    y = x.data @ w.data.T
    if b is not None:
        y = y + b.data
    m, n = w.shape

    def backward(g):
        g2 = g.reshape(-1, m)
        gx = (g @ w.data) if x.requires_grad else None
        gw = g2.T @ x.data.reshape(-1, n) if w.requires_grad else None
        gb = g2.sum(axis=0) if b is not None and b.requires_grad else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return _emit(y, inputs, backward, "linear")


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x, k, bias=None, stride: int = 1, pad: int = 0, channels_last: bool = False) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``x`` is [B, C, H, W] (or [B, H, W, C] with ``channels_last``); the kernel
    is always [C_out, C_in, kh, kw]. Output uses the same layout as ``x``.
    """
    x, k = as_tensor(x), as_tensor(k)
    if x.ndim != 4 or k.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and kernel, got {x.shape} and {k.shape}")
    if channels_last:
        B, H, W, C = x.shape
        xd = x.data
    else:
        B, C, H, W = x.shape
        xd = x.data.transpose(0, 2, 3, 1)
    O, Ci, kh, kw = k.shape
    if Ci != C:
        raise ShapeError(f"conv2d: input channels {C} != kernel channels {Ci} ({x.shape} vs {k.shape})")
    if stride < 1 or pad < 0:
        raise ConfigError(f"conv2d: stride must be >= 1 and pad >= 0, got {stride}, {pad}")
    if kh > H + 2 * pad or kw > W + 2 * pad:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {H + 2 * pad}x{W + 2 * pad}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (O,):
            raise ShapeError(f"conv2d: bias {bias.shape} does not match {O} output channels")
    Ho, Wo = conv_output_size(H, kh, stride, pad), conv_output_size(W, kw, stride, pad)

    # im2col in [B*Ho*Wo, kh*kw*C] order so the column gradient scatters back contiguously
    xp = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else xd
    if kh == 1 and kw == 1:
        cols = np.ascontiguousarray(xp[:, ::stride, ::stride][:, :Ho, :Wo]).reshape(-1, C)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride][:, :Ho, :Wo]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(B * Ho * Wo, kh * kw * C)
    wmat = k.data.transpose(0, 2, 3, 1).reshape(O, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    y = out.reshape(B, Ho, Wo, O)
    if not channels_last:
        y = np.ascontiguousarray(y.transpose(0, 3, 1, 2))

    def backward(g):
        gm = g.reshape(-1, O) if channels_last else g.transpose(0, 2, 3, 1).reshape(-1, O)
        gk = (gm.T @ cols).reshape(O, kh, kw, C).transpose(0, 3, 1, 2) if k.requires_grad else None
        gb = gm.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gm @ wmat).reshape(B, Ho, Wo, kh, kw, C)
            gxp = np.zeros((B, H + 2 * pad, W + 2 * pad, C), dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += dcols[:, :, :, i, j]
            gx = gxp[:, pad : pad + H, pad : pad + W]
            if not channels_last:
                gx = gx.transpose(0, 3, 1, 2)
            gx = np.ascontiguousarray(gx)
        if gk is not None:
            gk = np.ascontiguousarray(gk)
        return (gx, gk, gb) if bias is not None else (gx, gk)

    inputs = (x, k, bias) if bias is not None else (x, k)
    return _emit(y, inputs, backward, "conv2d")


def _standardize_backward(g_hat, xhat, inv):
    # d/dx of (x - mean) * inv with statistics over the last axis
    m1 = g_hat.mean(axis=-1, keepdims=True)
    m2 = (g_hat * xhat).mean(axis=-1, keepdims=True)
    return inv * (g_hat - m1 - xhat * m2)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis, then scale by gamma and shift by beta."""
    if eps <= 0:
        raise ConfigError(f"layer_norm eps must be positive, got {eps}")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma {gamma.shape}/beta {beta.shape} do not match last axis {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gx = _standardize_backward(g * gamma.data, xhat, inv) if x.requires_grad else None
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit(y.astype(x.dtype, copy=False), (x, gamma, beta), backward, "layer_norm")


def _group_mean(a: np.ndarray, groups: int) -> np.ndarray:
    """Mean of a [B, M, C] array over M and each channel group, broadcast back to [B, 1, C]."""
    B, M, C = a.shape
    ch = np.ones(M, dtype=a.dtype) @ a  # [B, C]; BLAS reduction over the contiguous spatial axis
    g = ch.reshape(B, groups, C // groups).sum(axis=-1) / (M * (C // groups))
    return np.repeat(g, C // groups, axis=-1)[:, None, :]


def group_norm(x, gamma, beta, groups: int, eps: float = 1e-5, channels_last: bool = False) -> Tensor:
    """Per-sample standardization over channel groups of an image batch.

    Layout is [B, C, H, W], or [B, H, W, C] with ``channels_last``.
    """
    if eps <= 0:
        raise ConfigError(f"group_norm eps must be positive, got {eps}")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    B = x.shape[0]
    C = x.shape[-1] if channels_last else x.shape[1]
    if groups < 1 or C % groups:
        raise ConfigError(f"group_norm: {C} channels not divisible into {groups} groups")
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"group_norm: gamma {gamma.shape}/beta {beta.shape} do not match {C} channels")
    if channels_last:
        x3 = x.data.reshape(B, -1, C)
        xc = x3 - _group_mean(x3, groups)
        inv = 1.0 / np.sqrt(_group_mean(xc * xc, groups) + eps)
        xhat = xc * inv
        y = (xhat * gamma.data + beta.data).reshape(x.shape)

        def backward(g):
            g3 = g.reshape(B, -1, C)
            gx = None
            if x.requires_grad:
                g_hat = g3 * gamma.data
                m1 = _group_mean(g_hat, groups)
                m2 = _group_mean(g_hat * xhat, groups)
                gx = (inv * (g_hat - m1 - xhat * m2)).reshape(x.shape)
            flat = g3.reshape(-1, C)
            ones = np.ones(flat.shape[0], dtype=g.dtype)
            return gx, ones @ (flat * xhat.reshape(-1, C)), ones @ flat

        return _emit(y.astype(x.dtype, copy=False), (x, gamma, beta), backward, "group_norm")

    xg = x.data.reshape(B, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat_g = xc * inv
    xhat = xhat_g.reshape(x.shape)
    bshape = (1, C) + (1,) * (x.ndim - 2)
    y = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    red = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        gx = None
        if x.requires_grad:
            g_hat = (g * gamma.data.reshape(bshape)).reshape(xg.shape)
            gx = _standardize_backward(g_hat, xhat_g, inv).reshape(x.shape)
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return _emit(y.astype(x.dtype, copy=False), (x, gamma, beta), backward, "group_norm")


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{where}: non-finite input")


def softmax(x) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data, "softmax")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _emit(s, (x,), backward, "softmax")


def simplex_weights(w) -> Tensor:
    """Softmax of a 1-D logit vector whose entries sum to exactly one.

    One weight is the complement of the others. With two entries the smaller
    weight is taken as ``1 - larger``; since the larger lies in [0.5, 1] that
    subtraction is exact, so ``a[0] + a[1] == 1`` holds exactly at any precision.
    """
    w = as_tensor(w)
    if w.ndim != 1 or w.shape[0] < 2:
        raise ShapeError(f"simplex_weights expects a 1-D vector of length >= 2, got {w.shape}")
    _check_finite(w.data, "simplex_weights")
    e = np.exp(w.data - w.data.max())
    s = e / e.sum()
    if s.shape[0] == 2:
        k = int(s[1] > s[0])
        s[1 - k] = 1.0 - s[k]
    else:
        s[-1] = 1.0 - s[:-1].sum()

    def backward(g):
        return (s * (g - (g * s).sum()),)

    return _emit(s, (w,), backward, "simplex_weights")


def log_softmax(x) -> Tensor:
    x = as_tensor(x)
    _check_finite(x.data, "log_softmax")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    y = z - lse
    s = np.exp(y)
    return _emit(y, (x,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),), "log_softmax")


def cross_entropy(logits, targets) -> Tensor:
    """Mean negative log-likelihood of integer class targets, log-sum-exp form."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects [B, C] logits, got {logits.shape}")
    B, C = logits.shape
    t = np.asarray(targets)
    if t.shape != (B,):
        raise ShapeError(f"cross_entropy: targets shape {t.shape} does not match batch {B}")
    if not np.issubdtype(t.dtype, np.integer):
        raise TypeError("cross_entropy targets must be integer class indices")
    if B and (t.min() < 0 or t.max() >= C):
        raise IndexError(f"cross_entropy: targets must lie in [0, {C}), got range [{t.min()}, {t.max()}]")
    _check_finite(logits.data, "cross_entropy")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(B)
    loss = np.asarray((lse - z[rows, t]).mean(), dtype=logits.dtype)

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, t] -= 1.0
        return (p * (g / B),)

    return _emit(loss, (logits,), backward, "cross_entropy")


def multi_head_attention(
    x,
    w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o,
    heads: int,
    return_weights: bool = False,
):
    """Scaled dot-product self-attention over ``x`` of shape [B, L, d].

    Each head attends with scale ``1/sqrt(d/heads)``; head outputs are
    concatenated and passed through the output projection.
    """
    x = as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"multi_head_attention expects [B, L, d], got {x.shape}")
    B, L, d = x.shape
    if heads < 1 or d % heads:
        raise ConfigError(f"model width {d} is not divisible by {heads} heads")
    dh = d // heads

    def split(t):
        return transpose(reshape(t, (B, L, heads, dh)), (0, 2, 1, 3))

    q = split(linear(x, w_q, b_q))
    k = split(linear(x, w_k, b_k))
    v = split(linear(x, w_v, b_v))
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = softmax(scores)
    ctx = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (B, L, d))
    out = linear(ctx, w_o, b_o)
    return (out, attn) if return_weights else out


def global_avg_pool(x, channels_last: bool = False) -> Tensor:
    """Mean over the spatial axes of an image batch -> [B, C]."""
    return mean(x, axis=(1, 2) if channels_last else (2, 3))


def sinusoidal_encoding(length: int, d: int, dtype=None) -> np.ndarray:
    """Fixed sin/cos position table of shape [length, d] (sin on even, cos on odd dims)."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(0, d, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i / d)
    table = np.zeros((length, d), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d // 2])
    return table.astype(dtype or get_default_dtype())
