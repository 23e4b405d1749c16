"""Self-contained invariant suite behind ``isoscan selftest``."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import checkpoint as ckpt
from . import registry
from .degradation import gaussian_kernel
from .losses import psnr, ssim
from .moco import EncoderConfig, info_nce, make_moco, momentum_update
from .scanpath import CHUNK_DIRECTIONS, build_path, flatten, path_is_valid, restore
from .ssm import (conv_apply, discretize_zoh, init_ssm_params, lti_kernel, lti_scan,
                  selective_scan, selective_scan_parallel)
from .volume import from_bytes, generate_phantom, to_bytes


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float


def small_dims(max_voxels: int = 64):
    return [(f, h, w) for f in range(1, max_voxels + 1) for h in range(1, max_voxels // f + 1)
            for w in range(1, max_voxels // (f * h) + 1)]


def path_tables(dims, corrupt: bool = False):
    """The eight (chunk, direction) permutations for ``dims``."""
    perms = [build_path(dims, o, r).perm.copy() for _ in range(2) for o, r in CHUNK_DIRECTIONS]
    if corrupt and perms[0].size > 1:
        perms[0][1] = perms[0][0]
    return perms


def _scan_bijective(corrupt):
    for dims in small_dims():
        for k, perm in enumerate(path_tables(dims, corrupt)):
            if not path_is_valid(perm, dims)[0]:
                return False, f"path {k} for dims {dims} is not a bijection"
    return True, "all 8 paths bijective for every volume of <= 64 voxels"


def _scan_continuous(corrupt):
    for dims in small_dims():
        for k, perm in enumerate(path_tables(dims)):
            if not path_is_valid(perm, dims)[1]:
                return False, f"path {k} for dims {dims} has a jump"
    return True, "consecutive voxels are grid neighbours"


def _scan_restore(corrupt):
    rng = np.random.default_rng(0)
    for dims in [(2, 3, 4), (4, 1, 4), (3, 3, 3), (1, 5, 2)]:
        x = rng.standard_normal(dims + (3,))
        for o, r in CHUNK_DIRECTIONS:
            p = build_path(dims, o, r)
            if not np.array_equal(restore(flatten(x, p), p), x):
                return False, f"restore(flatten) != identity for {dims}"
    return True, "restore . flatten is the identity"


def _lti_duality(corrupt):
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(50):
        n, L = int(rng.integers(1, 5)), int(rng.integers(1, 20))
        Abar, Bbar = discretize_zoh(-rng.uniform(0.1, 2, n), rng.standard_normal(n), rng.uniform(0.01, 1))
        C, x = rng.standard_normal(n), rng.standard_normal(L)
        worst = max(worst, np.max(np.abs(lti_scan(Abar, Bbar, C, x) - conv_apply(x, lti_kernel(Abar, Bbar, C, L)))))
    return worst < 1e-10, f"max |scan - conv| = {worst:.2e}"


def _parallel_scan(corrupt):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(20):
        L, c = int(rng.integers(1, 24)), int(rng.integers(1, 4))
        p = init_ssm_params(c, 3, rng)
        x = rng.standard_normal((L, c))
        ref = selective_scan(x, p)
        for block in (1, 3, 8, L):
            worst = max(worst, np.max(np.abs(selective_scan_parallel(x, p, block) - ref)))
    return worst < 1e-9, f"max |parallel - sequential| = {worst:.2e}"


def _gradcheck_group(names):
    def run(corrupt):
        errs = []
        for name in names:
            err, tol, _ = registry.check(name)
            if err >= tol:
                return False, f"{name}: relative error {err:.2e} >= {tol:.0e}"
            errs.append(err)
        return True, f"max relative error {max(errs):.2e} over {len(names)} ops"
    return run


def _ssim_identity(corrupt):
    x = generate_phantom((8, 16, 16), 0).data
    s = ssim(x, x)
    return abs(s - 1.0) <= 1e-12, f"ssim(x, x) = {s!r}"


def _ssim_constant(corrupt):
    s = ssim(np.full((1, 16, 16), 0.3), np.full((1, 16, 16), 0.7))
    # zero variance: only the luminance term survives
    c1 = 0.01 ** 2
    ref = (2 * 0.3 * 0.7 + c1) / (0.3 ** 2 + 0.7 ** 2 + c1)
    return abs(s - ref) < 1e-12 and abs(s - 0.7241) < 1e-3, f"ssim = {s:.6f}"


def _psnr_closed_form(corrupt):
    y = np.zeros((2, 4, 4))
    v = psnr(y, y + 1 / 255)
    return abs(v - 20 * math.log10(255)) < 1e-9, f"psnr = {v:.4f} dB"


def _info_nce_uniform(corrupt):
    e = np.tile([[1.0, 0.0, 0.0]], (5, 1))
    loss = info_nce(e, e, 0.07)[0]
    return abs(loss - 5 * math.log(5)) < 1e-9, f"loss = {loss:.12f}"


def _momentum(corrupt):
    st = make_moco(EncoderConfig(channels=2, n_blocks=1, embed_dim=2), momentum=0.9)
    k0 = {k: v.copy() for k, v in st.key.store.params.items()}
    for v in st.query.store.params.values():
        v += 1.0
    q = st.query.store.params
    momentum_update(momentum_update(st))
    worst = max(np.max(np.abs(st.key.store.params[k] - (0.81 * k0[k] + 0.19 * q[k]))) for k in k0)
    return worst < 1e-12, f"EMA error {worst:.1e}"


def _volume_roundtrip(corrupt):
    v = generate_phantom((8, 16, 16), 3, (1.0, 2.5, 1.0))
    ok = to_bytes(from_bytes(to_bytes(v))) == to_bytes(v)
    return ok, "VEMV bytes stable under decode/encode"


def _checkpoint_roundtrip(corrupt):
    rng = np.random.default_rng(4)
    ck = ckpt.Checkpoint({"kind": "test", "step": 3},
                         {"param/a": rng.standard_normal((2, 3)).astype(np.float32),
                          "param/b": np.zeros(0, np.float32)})
    raw = ckpt.to_bytes(ck)
    back = ckpt.from_bytes(raw)
    ok = ckpt.to_bytes(back) == raw and all(np.array_equal(ck.blobs[k], back.blobs[k]) for k in ck.blobs)
    return ok, f"{len(raw)} bytes roundtrip"


def _kernel(corrupt):
    g = gaussian_kernel(8, 4.0)
    ok = g.size == 9 and abs(g.sum() - 1) < 1e-12 and np.array_equal(g, g[::-1])
    return ok, f"length {g.size}, sum {g.sum():.15f}"


CHECKS: list[tuple[str, Callable]] = [
    ("scan_bijective", _scan_bijective),
    ("scan_continuous", _scan_continuous),
    ("scan_restore_identity", _scan_restore),
    ("ssm_lti_scan_conv_duality", _lti_duality),
    ("ssm_parallel_equals_sequential", _parallel_scan),
    ("gradcheck_layers", _gradcheck_group(["linear", "conv3d", "depthwise_conv3d", "layernorm",
                                           "batchnorm", "gelu", "relu", "softmax", "l2_normalize",
                                           "pixel_shuffle_h"])),
    ("gradcheck_ssm", _gradcheck_group(["selective_scan"])),
    ("gradcheck_mixer", _gradcheck_group(["dwam", "vemm", "vdim", "convffn", "rvmb"])),
    ("gradcheck_encoder", _gradcheck_group(["encoder"])),
    ("gradcheck_losses", _gradcheck_group(["l1_loss", "ssim", "total_loss", "info_nce"])),
    ("ssim_identity", _ssim_identity),
    ("ssim_constant_closed_form", _ssim_constant),
    ("psnr_closed_form", _psnr_closed_form),
    ("info_nce_uniform", _info_nce_uniform),
    ("momentum_ema_closed_form", _momentum),
    ("degradation_kernel", _kernel),
    ("volume_roundtrip", _volume_roundtrip),
    ("checkpoint_roundtrip", _checkpoint_roundtrip),
]


def run_selftest(corrupt_path_table: bool = False, report: Callable[[str], None] | None = None):
    results = []
    for name, fn in CHECKS:
        t0 = time.time()
        try:
            ok, detail = fn(corrupt_path_table)
        except Exception as e:  # a crashing check is a failing check
            ok, detail = False, f"{type(e).__name__}: {e}"
        res = CheckResult(name, bool(ok), detail, time.time() - t0)
        results.append(res)
        if report:
            report(f"{'PASS' if res.ok else 'FAIL'}  {name:32s} {detail} ({res.seconds:.2f}s)")
    return results
