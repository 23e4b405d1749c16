import math

import numpy as np
from hypothesis import given, settings, strategies as st

from isoscan.losses import (l1_loss, metrics_json, psnr, ssim, total_loss, total_loss_and_grad)
from isoscan.volume import generate_phantom


def test_l1_example():
    assert l1_loss(np.zeros(4), np.array([1.0, -1.0, 0.5, 0.5])) == 0.75


def test_ssim_identity():
    x = generate_phantom((8, 16, 16), 0).data
    assert abs(ssim(x, x) - 1.0) <= 1e-12


def test_ssim_constant_patches():
    s = ssim(np.full((1, 16, 16), 0.3), np.full((1, 16, 16), 0.7))
    assert abs(s - 0.7241) < 1e-3


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_ssim_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((2, 12, 12)), rng.random((2, 12, 12))
    assert abs(ssim(a, b) - ssim(b, a)) < 1e-12
    assert -1 <= ssim(a, b) <= 1


def test_ssim_small_slices_use_shrunk_window():
    a = np.random.default_rng(1).random((3, 4, 5))
    assert abs(ssim(a, a) - 1.0) < 1e-12


def test_psnr_examples():
    y = np.zeros((2, 4, 4))
    assert abs(psnr(y, y + 1 / 255) - 48.13) < 0.01
    assert abs(psnr(y, y + 0.1) - 20.0) < 1e-9
    assert psnr(y, y) == math.inf
    assert '"inf"' in metrics_json({"psnr": math.inf, "ssim": 1.0})


def test_total_loss_grows_with_noise():
    y = generate_phantom((8, 16, 16), 2).data.astype(np.float64)
    rng = np.random.default_rng(3)
    n = rng.standard_normal(y.shape)
    losses = [total_loss(y, y + s * n) for s in (0.0, 0.01, 0.05, 0.2)]
    assert losses[0] < 1e-12
    assert all(a < b for a, b in zip(losses, losses[1:]))


def test_total_loss_grad_matches_value():
    rng = np.random.default_rng(4)
    y, yh = rng.random((1, 12, 12)), rng.random((1, 12, 12))
    loss, g = total_loss_and_grad(y, yh)
    assert abs(loss - total_loss(y, yh)) < 1e-12
    assert g.shape == yh.shape
