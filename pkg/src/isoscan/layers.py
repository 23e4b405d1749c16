"""Primitive differentiable ops with explicit backward passes.

Feature maps are channels-last: ``(F, h, W, C)`` for one volume, or
``(B, F, h, W, C)`` for a batch.  Every ``op`` returns ``(y, saved)``; the
matching ``op_backward(saved, dy)`` returns cotangents in argument order.
"""
from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .diffcore import Module, ParamStore

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


# ---------------------------------------------------------------- padding

def reflect_index(n: int, pad: int) -> np.ndarray:
    """Source indices for reflect padding (edge not repeated); size-1 axes replicate."""
    idx = np.arange(-pad, n + pad)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def reflect_pad3(x: np.ndarray, pad: int = 1) -> tuple[np.ndarray, tuple]:
    """Reflect-pad the three spatial axes of a ``(B, F, h, W, C)`` array."""
    _, f, h, w, _ = x.shape
    idx = (reflect_index(f, pad), reflect_index(h, pad), reflect_index(w, pad))
    xp = x[:, idx[0]][:, :, idx[1]][:, :, :, idx[2]]
    return xp, (idx, x.shape)


def reflect_pad3_backward(saved, dxp: np.ndarray) -> np.ndarray:
    idx, shape = saved
    b, f, h, w, c = shape
    g = np.zeros((b, f) + dxp.shape[2:], dtype=dxp.dtype)
    np.add.at(g, (slice(None), idx[0]), dxp)
    g2 = np.zeros((b, f, h) + dxp.shape[3:], dtype=dxp.dtype)
    np.add.at(g2, (slice(None), slice(None), idx[1]), g)
    g3 = np.zeros(shape, dtype=dxp.dtype)
    np.add.at(g3, (slice(None), slice(None), slice(None), idx[2]), g2)
    return g3


def _batched(x: np.ndarray) -> tuple[np.ndarray, bool]:
    if x.ndim == 4:
        return x[None], True
    if x.ndim == 5:
        return x, False
    raise ValueError(f"expected a (F,h,W,C) or (B,F,h,W,C) array, got shape {x.shape}")


# ---------------------------------------------------------------- dense

def linear(x, w, b=None):
    """``y = x @ w.T + b`` over the last axis; ``w`` is ``(out, in)``."""
    y = x @ w.T
    if b is not None:
        y = y + b
    return y, (x, w, b is not None)


def linear_backward(saved, dy):
    x, w, has_b = saved
    dx = dy @ w
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = dy2.T @ x2
    db = dy2.sum(axis=0) if has_b else None
    return dx, dw, db


def conv3d(x, w, b):
    """3x3x3 convolution with reflect padding.

    ``w`` has shape ``(C_out, 3, 3, 3, C_in)`` so that the im2col layout is a
    plain reshape.
    """
    xb, squeeze = _batched(x)
    bsz, f, h, wd, cin = xb.shape
    xp, psaved = reflect_pad3(xb, 1)
    win = sliding_window_view(xp, (3, 3, 3), axis=(1, 2, 3))  # (B,F,h,W,C,3,3,3)
    cols = win.transpose(0, 1, 2, 3, 5, 6, 7, 4).reshape(bsz * f * h * wd, 27 * cin)
    wm = w.reshape(w.shape[0], -1)
    y = (cols @ wm.T + b).reshape(bsz, f, h, wd, w.shape[0])
    if squeeze:
        y = y[0]
    return y, (cols, w, psaved, xp.shape, squeeze)


def conv3d_backward(saved, dy):
    cols, w, psaved, pshape, squeeze = saved
    dyb = dy[None] if squeeze else dy
    bsz, f, h, wd, cout = dyb.shape
    cin = w.shape[-1]
    dy2 = dyb.reshape(-1, cout)
    dw = (dy2.T @ cols).reshape(w.shape)
    db = dy2.sum(axis=0)
    dcols = (dy2 @ w.reshape(cout, -1)).reshape(bsz, f, h, wd, 3, 3, 3, cin)
    dxp = np.zeros(pshape, dtype=dy.dtype)
    for a in range(3):
        for bb in range(3):
            for c in range(3):
                dxp[:, a:a + f, bb:bb + h, c:c + wd] += dcols[:, :, :, :, a, bb, c]
    dx = reflect_pad3_backward(psaved, dxp)
    if squeeze:
        dx = dx[0]
    return dx, dw, db


def depthwise_conv3d(x, w, b):
    """Per-channel 3x3x3 convolution, reflect padding; ``w`` is ``(3, 3, 3, C)``."""
    xb, squeeze = _batched(x)
    _, f, h, wd, _ = xb.shape
    xp, psaved = reflect_pad3(xb, 1)
    y = np.zeros_like(xb)
    for a in range(3):
        for bb in range(3):
            for c in range(3):
                y += xp[:, a:a + f, bb:bb + h, c:c + wd] * w[a, bb, c]
    y += b
    if squeeze:
        y = y[0]
    return y, (xp, w, psaved, squeeze)


def depthwise_conv3d_backward(saved, dy):
    xp, w, psaved, squeeze = saved
    dyb = dy[None] if squeeze else dy
    _, f, h, wd, _ = dyb.shape
    dw = np.zeros_like(w)
    dxp = np.zeros_like(xp)
    for a in range(3):
        for bb in range(3):
            for c in range(3):
                sl = (slice(None), slice(a, a + f), slice(bb, bb + h), slice(c, c + wd))
                dw[a, bb, c] = np.einsum("bfhwc,bfhwc->c", xp[sl], dyb)
                dxp[sl] += dyb * w[a, bb, c]
    db = dyb.reshape(-1, dyb.shape[-1]).sum(axis=0)
    dx = reflect_pad3_backward(psaved, dxp)
    if squeeze:
        dx = dx[0]
    return dx, dw, db


# ---------------------------------------------------------------- norms

def layernorm(x, eps: float = 1e-5):
    """Normalise over the channel (last) axis, no affine parameters."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat, (xhat, rstd)


def layernorm_backward(saved, dy):
    xhat, rstd = saved
    n = xhat.shape[-1]
    dx = rstd * (dy - dy.mean(axis=-1, keepdims=True)
                 - xhat * (dy * xhat).sum(axis=-1, keepdims=True) / n)
    return (dx,)


def batchnorm(x, gamma, beta, running_mean, running_var, train: bool,
              momentum: float = 0.1, eps: float = 1e-5):
    """Batch norm over every axis but the last.

    In training mode the running statistics are updated in place.
    """
    axes = tuple(range(x.ndim - 1))
    if train:
        mu = x.mean(axis=axes)
        xc = x - mu
        var = (xc * xc).mean(axis=axes)
        m = x.size // x.shape[-1]
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
        xc = x - mu
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, (xhat, rstd, gamma, train)


def batchnorm_backward(saved, dy):
    xhat, rstd, gamma, train = saved
    axes = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    dxhat = dy * gamma
    if train:
        m = dy.size // dy.shape[-1]
        dx = rstd * (dxhat - dxhat.sum(axis=axes) / m
                     - xhat * (dxhat * xhat).sum(axis=axes) / m)
    else:
        dx = dxhat * rstd
    return dx, dgamma, dbeta


# ---------------------------------------------------------------- pointwise

def gelu(x):
    """tanh-approximated GELU."""
    inner = _SQRT_2_OVER_PI * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(saved, dy):
    x, t = saved
    dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x * x)
    return (dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)


def relu(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(mask, dy):
    return (dy * mask,)


def softplus(x):
    return np.logaddexp(0.0, x).astype(x.dtype, copy=False)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(logits, axis: int = -1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    return p, (p, axis)


def softmax_backward(saved, dp):
    p, axis = saved
    return (p * (dp - (dp * p).sum(axis=axis, keepdims=True)),)


def l2_normalize(x, eps: float = 1e-12):
    """Normalise rows (last axis) to unit length."""
    norm = np.sqrt((x * x).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    y = x / norm
    return y, (y, norm)


def l2_normalize_backward(saved, dy):
    y, norm = saved
    return ((dy - y * (dy * y).sum(axis=-1, keepdims=True)) / norm,)


# ---------------------------------------------------------------- reshapes

def pixel_shuffle_h(x, s: int):
    """``(F, h, W, s*C) -> (F, s*h, W, C)``.

    Output ``(f, y*s + j, x, c)`` takes input channel ``j*C + c`` at ``(f, y, x)``.
    """
    f, h, w, sc = x.shape
    if sc % s:
        raise ValueError(f"channel count {sc} not divisible by scale {s}")
    c = sc // s
    y = x.reshape(f, h, w, s, c).transpose(0, 1, 3, 2, 4).reshape(f, h * s, w, c)
    return y, (s,)


def pixel_unshuffle_h(y, s: int):
    f, hs, w, c = y.shape
    return y.reshape(f, hs // s, s, w, c).transpose(0, 1, 3, 2, 4).reshape(f, hs // s, w, s * c)


def pixel_shuffle_h_backward(saved, dy):
    (s,) = saved
    return (pixel_unshuffle_h(dy, s),)


# ---------------------------------------------------------------- layers

def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    def __init__(self, store: ParamStore, prefix: str, n_in: int, n_out: int,
                 rng: np.random.Generator, bias: bool = True, dtype=np.float64):
        super().__init__(store, prefix)
        self.bias = bias
        self.param("w", _uniform(rng, (n_out, n_in), n_in, dtype))
        if bias:
            self.param("b", np.zeros(n_out, dtype=dtype))

    def forward(self, x):
        return linear(x, self.p("w"), self.p("b") if self.bias else None)

    def backward(self, saved, dy):
        dx, dw, db = linear_backward(saved, dy)
        self.acc("w", dw)
        if self.bias:
            self.acc("b", db)
        return dx


class Conv3d(Module):
    def __init__(self, store: ParamStore, prefix: str, c_in: int, c_out: int,
                 rng: np.random.Generator, dtype=np.float64, bias: bool = True):
        super().__init__(store, prefix)
        self.bias = bias
        self.param("w", _uniform(rng, (c_out, 3, 3, 3, c_in), 27 * c_in, dtype))
        if bias:
            self.param("b", np.zeros(c_out, dtype=dtype))
        else:
            self._zero_b = np.zeros(c_out, dtype=dtype)

    def forward(self, x):
        return conv3d(x, self.p("w"), self.p("b") if self.bias else self._zero_b)

    def backward(self, saved, dy):
        dx, dw, db = conv3d_backward(saved, dy)
        self.acc("w", dw)
        if self.bias:
            self.acc("b", db)
        return dx


class DepthwiseConv3d(Module):
    def __init__(self, store: ParamStore, prefix: str, channels: int,
                 rng: np.random.Generator, dtype=np.float64):
        super().__init__(store, prefix)
        self.param("w", _uniform(rng, (3, 3, 3, channels), 27, dtype))
        self.param("b", np.zeros(channels, dtype=dtype))

    def forward(self, x):
        return depthwise_conv3d(x, self.p("w"), self.p("b"))

    def backward(self, saved, dy):
        dx, dw, db = depthwise_conv3d_backward(saved, dy)
        self.acc("w", dw)
        self.acc("b", db)
        return dx
