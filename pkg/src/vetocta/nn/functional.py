"""Differentiable layer primitives. Images are channel-last: ``[N, H, W, C]``."""

from __future__ import annotations

import math

import numpy as np

from ..errors import ConfigError
from .tensor import Tensor, as_tensor, matmul

GELU_C = 0.7978845608
GELU_A = 0.044715


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """``(out, pad_before, pad_after)`` for "same" padding; the odd pixel goes after."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return out, total // 2, total - total // 2


def _taps(kh, kw):
    return [(i, j) for i in range(kh) for j in range(kw)]


def _conv_forward(x, w, stride):
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w.shape
    ho, pt, pb = same_padding(h, kh, stride)
    wo, pl, pr = same_padding(wd, kw, stride)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    out = np.zeros((n, ho, wo, cout), dtype=np.result_type(x, w))
    for i, j in _taps(kh, kw):
        patch = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
        out += patch @ w[i, j]
    return out


def _conv_input_grad(g, w, x_shape, stride):
    """Adjoint of :func:`_conv_forward` with respect to its input."""
    n, h, wd, cin = x_shape
    kh, kw, _, cout = w.shape
    ho, pt, pb = same_padding(h, kh, stride)
    wo, pl, pr = same_padding(wd, kw, stride)
    gxp = np.zeros((n, h + pt + pb, wd + pl + pr, cin), dtype=np.result_type(g, w))
    for i, j in _taps(kh, kw):
        gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += g @ w[i, j].T
    return gxp[:, pt:pt + h, pl:pl + wd, :]


def _conv_weight_grad(x, g, w_shape, stride):
    n, h, wd, cin = x.shape
    kh, kw, _, cout = w_shape
    ho, pt, pb = same_padding(h, kh, stride)
    wo, pl, pr = same_padding(wd, kw, stride)
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    g2 = g.reshape(-1, cout)
    gw = np.empty(w_shape, dtype=np.result_type(x, g))
    for i, j in _taps(kh, kw):
        patch = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
        gw[i, j] = patch.reshape(-1, cin).T @ g2
    return gw


def _check_conv(x, w, b, cin_axis):
    if x.ndim != 4 or w.ndim != 4:
        raise ConfigError(f"conv expects x [N,H,W,C] and w [kh,kw,Cin,Cout], got {x.shape} and {w.shape}")
    if x.shape[-1] != w.shape[cin_axis]:
        raise ConfigError(f"channel mismatch: input has {x.shape[-1]}, kernel expects {w.shape[cin_axis]}")
    out_c = w.shape[3 if cin_axis == 2 else 2]
    if b is not None and b.shape != (out_c,):
        raise ConfigError(f"bias shape {b.shape} does not match {out_c} output channels")


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1) -> Tensor:
    """Cross-correlation with zero "same" padding; output spatial dims are ``ceil(H / stride)``."""
    x, w = as_tensor(x), as_tensor(w)
    _check_conv(x, w, b, 2)
    if stride not in (1, 2):
        raise ConfigError(f"stride must be 1 or 2, got {stride}")
    xd, wd = x.data, w.data
    out = _conv_forward(xd, wd, stride)
    parents = (x, w)
    if b is not None:
        out = out + b.data
        parents = (x, w, b)

    rx, rw = x.requires_grad, w.requires_grad

    def back(g):
        gx = _conv_input_grad(g, wd, xd.shape, stride) if rx else None
        gw = _conv_weight_grad(xd, g, wd.shape, stride) if rw else None
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 1, 2))

    return Tensor.from_op(out, parents, back, "conv2d")


def conv2d_transpose(y: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2) -> Tensor:
    """Adjoint of :func:`conv2d` sharing the kernel ``w [kh, kw, Cout, Cin]``.

    Maps ``[N, H, W, Cin]`` to ``[N, stride*H, stride*W, Cout]``; with zero
    bias ``<conv2d(x, w), y> == <x, conv2d_transpose(y, w)>`` exactly (up to
    rounding).
    """
    y, w = as_tensor(y), as_tensor(w)
    _check_conv(y, w, b, 3)
    n, h, wdt, _ = y.shape
    x_shape = (n, stride * h, stride * wdt, w.shape[2])
    yd, wd = y.data, w.data
    out = _conv_input_grad(yd, wd, x_shape, stride)
    parents = (y, w)
    if b is not None:
        out = out + b.data
        parents = (y, w, b)

    ry, rw = y.requires_grad, w.requires_grad

    def back(g):
        gy = _conv_forward(g, wd, stride) if ry else None
        gw = _conv_weight_grad(g, yd, wd.shape, stride) if rw else None
        if b is None:
            return gy, gw
        return gy, gw, g.sum(axis=(0, 1, 2))

    return Tensor.from_op(out, parents, back, "conv2d_transpose")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[-1] != w.shape[0]:
        raise ConfigError(f"linear: input width {x.shape[-1]} does not match weight {w.shape}")
    out = matmul(x, w)
    return out if b is None else out + b


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last (channel) axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data
    lead = tuple(range(xd.ndim - 1))

    def back(g):
        dxhat = g * gd
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return Tensor.from_op(out, (x, gamma, beta), back, "layer_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor.from_op(y, (x,), back, "softmax")


def leaky_relu(x: Tensor, alpha: float = 0.3) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    slope = np.where(xd >= 0, 1.0, alpha).astype(xd.dtype)
    return Tensor.from_op(xd * slope, (x,), lambda g: (g * slope,), "leaky_relu")


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    xd = x.data
    u = GELU_C * (xd + GELU_A * xd * xd * xd)
    t = np.tanh(u)
    out = 0.5 * xd * (1.0 + t)

    def back(g):
        du = GELU_C * (1.0 + 3.0 * GELU_A * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du),)

    return Tensor.from_op(out, (x,), back, "gelu")


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention over ``[..., T, C]`` split into ``heads`` heads.

    Scores are multiplied by ``1 / sqrt(C / heads)`` and softmax runs over
    the key axis. Heads are concatenated back to ``[..., T, C]``.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    *lead, t, c = q.shape
    if c % heads:
        raise ConfigError(f"channels {c} not divisible by {heads} heads")
    if k.shape != q.shape or v.shape != q.shape:
        raise ConfigError("q, k, v must share a shape")
    d = c // heads
    nl = len(lead)

    def split(a):
        # [..., T, C] -> [..., M, T, d]
        perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)
        return a.reshape(*lead, t, heads, d).transpose(perm)

    qh, kh, vh = split(q), split(k), split(v)
    perm_k = tuple(range(nl + 1)) + (nl + 2, nl + 1)
    scores = matmul(qh, kh.transpose(perm_k)) * (1.0 / math.sqrt(d))
    attn = softmax(scores, axis=-1)
    out = matmul(attn, vh)
    perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)
    return out.transpose(perm).reshape(*lead, t, c)


def ffn(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Two dense layers with a GELU between them."""
    return linear(gelu(linear(x, w1, b1)), w2, b2)


def mse_loss(pred: Tensor, target) -> Tensor:
    pred, target = as_tensor(pred), as_tensor(target, pred.dtype)
    if pred.shape != target.shape:
        raise ConfigError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred - target
    return (diff * diff).mean()
