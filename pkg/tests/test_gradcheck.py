"""Every registered differentiable op against central differences, over five seeds."""
import pytest

from isoscan import registry


@pytest.mark.parametrize("name", sorted(registry.OPS))
def test_registered_op(name):
    for seed in range(5):
        err, tol, rep = registry.check(name, seed)
        assert err < tol, f"{name} seed {seed}: {rep}"


def test_registry_has_every_layer():
    expected = {"linear", "conv3d", "depthwise_conv3d", "layernorm", "batchnorm", "gelu", "relu",
                "softmax", "l2_normalize", "pixel_shuffle_h", "selective_scan", "dwam", "vemm",
                "vdim", "convffn", "rvmb", "encoder", "l1_loss", "ssim", "total_loss", "info_nce"}
    assert expected <= set(registry.OPS)
    assert "network" in registry.SLOW_OPS
