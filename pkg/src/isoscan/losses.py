"""Training losses (L1 + SSIM) and evaluation metrics (PSNR, SSIM).

SSIM is computed on each lateral slice ``data[f]`` with a separable Gaussian
window over the valid region, then averaged over slices.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass(frozen=True)
class SsimConfig:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    @property
    def c1(self) -> float:
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self) -> float:
        return (self.k2 * self.data_range) ** 2


DEFAULT_SSIM = SsimConfig()


def _check_pair(y, yhat):
    y = np.asarray(y)
    yhat = np.asarray(yhat)
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {yhat.shape}")
    return y, yhat


def l1_loss(y, yhat) -> float:
    y, yhat = _check_pair(y, yhat)
    return float(np.mean(np.abs(y - yhat)))


def l1_loss_backward(y, yhat):
    """Cotangent of ``l1_loss`` with respect to ``yhat``."""
    return np.sign(yhat - y) / yhat.size


def gaussian_window(length: int, sigma: float) -> np.ndarray:
    r = np.arange(length) - (length - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma * sigma))
    return g / g.sum()


def _window_for(shape, cfg: SsimConfig) -> np.ndarray:
    # shrink to the largest odd length that fits small slices
    n = min(cfg.window, *shape)
    if n % 2 == 0:
        n -= 1
    return gaussian_window(max(n, 1), cfg.sigma)


def _filt(img, g):
    """Valid separable correlation over the last two axes."""
    a = sliding_window_view(img, g.size, axis=-2) @ g
    return sliding_window_view(a, g.size, axis=-1) @ g


def _filt_t(res, g, shape):
    """Adjoint of :func:`_filt`."""
    k = g.size
    a = np.zeros(res.shape[:-1] + (shape[-1],), dtype=res.dtype)
    for j in range(k):
        a[..., j:j + res.shape[-1]] += g[j] * res
    out = np.zeros(shape, dtype=res.dtype)
    for j in range(k):
        out[..., j:j + res.shape[-2], :] += g[j] * a
    return out


def _ssim_terms(y, yhat, cfg: SsimConfig):
    y = y if y.ndim == 3 else y[None]
    yhat = yhat if yhat.ndim == 3 else yhat[None]
    g = _window_for(y.shape[1:], cfg)
    mx, my = _filt(y, g), _filt(yhat, g)
    exx, eyy, exy = _filt(y * y, g), _filt(yhat * yhat, g), _filt(y * yhat, g)
    a1 = 2 * mx * my + cfg.c1
    a2 = 2 * (exy - mx * my) + cfg.c2
    b1 = mx * mx + my * my + cfg.c1
    b2 = (exx - mx * mx) + (eyy - my * my) + cfg.c2
    smap = (a1 * a2) / (b1 * b2)
    return y, yhat, g, mx, my, a1, a2, b1, b2, smap


def ssim(y, yhat, cfg: SsimConfig = DEFAULT_SSIM) -> float:
    y, yhat = _check_pair(y, yhat)
    return float(np.mean(_ssim_terms(y.astype(np.float64), yhat.astype(np.float64), cfg)[-1]))


def ssim_grads(y, yhat, cfg: SsimConfig = DEFAULT_SSIM):
    """``(ssim, d ssim/d y, d ssim/d yhat)``."""
    y, yhat = _check_pair(y, yhat)
    shape = y.shape
    y3, yh3, g, mx, my, a1, a2, b1, b2, smap = _ssim_terms(y, yhat, cfg)
    gs = np.full_like(smap, 1.0 / smap.size)
    da1 = gs * a2 / (b1 * b2)
    da2 = gs * a1 / (b1 * b2)
    db1 = -gs * smap / b1
    db2 = -gs * smap / b2
    dmx = 2 * my * (da1 - da2) + 2 * mx * (db1 - db2)
    dmy = 2 * mx * (da1 - da2) + 2 * my * (db1 - db2)
    dexy = 2 * da2
    dexx = db2
    deyy = db2
    t = lambda r: _filt_t(r, g, y3.shape)
    dy = t(dmx) + 2 * y3 * t(dexx) + yh3 * t(dexy)
    dyh = t(dmy) + 2 * yh3 * t(deyy) + y3 * t(dexy)
    return float(np.mean(smap)), dy.reshape(shape), dyh.reshape(shape)


def ssim_loss(y, yhat, cfg: SsimConfig = DEFAULT_SSIM) -> float:
    return 1.0 - ssim(y, yhat, cfg)


def total_loss(y, yhat, cfg: SsimConfig = DEFAULT_SSIM) -> float:
    """Unweighted ``L1 + (1 - SSIM)``."""
    return l1_loss(y, yhat) + ssim_loss(y, yhat, cfg)


def total_loss_and_grad(y, yhat, cfg: SsimConfig = DEFAULT_SSIM):
    """Loss value and its cotangent with respect to the prediction ``yhat``."""
    y, yhat = _check_pair(y, yhat)
    s, _, ds = ssim_grads(y, yhat, cfg)
    loss = l1_loss(y, yhat) + 1.0 - s
    return loss, l1_loss_backward(y, yhat) - ds


def psnr(y, yhat, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical inputs give ``inf``."""
    y, yhat = _check_pair(y, yhat)
    mse = float(np.mean((np.asarray(y, np.float64) - np.asarray(yhat, np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 20.0 * math.log10(data_range) - 10.0 * math.log10(mse)


def metrics(y, yhat, cfg: SsimConfig = DEFAULT_SSIM) -> dict:
    return {"psnr": psnr(y, yhat, cfg.data_range), "ssim": ssim(y, yhat, cfg), "l1": l1_loss(y, yhat)}


def metrics_json(m: dict) -> str:
    out = dict(m)
    if math.isinf(out["psnr"]):
        out["psnr"] = "inf"
    return json.dumps(out)
