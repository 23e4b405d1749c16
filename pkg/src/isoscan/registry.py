"""Every differentiable op in the package, wrapped for :func:`gradcheck`.

Each builder takes a seed and returns a :class:`Case` holding the op, a small
random float64 point, the finite-difference step and the per-op tolerance.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import layers as L
from .diffcore import DiffOp, ParamStore, gradcheck_report, module_op
from .losses import l1_loss, l1_loss_backward, ssim, ssim_grads, total_loss, total_loss_and_grad
from .moco import DegradationEncoder, EncoderConfig, info_nce
from .network import ConvFFN, ModelConfig, RVMB, VDIM, ReconNet
from .ssm import PARAM_NAMES, init_ssm_params, selective_scan_backward, selective_scan_forward
from .vemm import VEMM, dwam_backward, dwam_forward, init_dwam_params

PER_OP_TOL = 1e-4
END_TO_END_TOL = 1e-3


@dataclass
class Case:
    op: DiffOp
    point: dict
    eps: float = 1e-5
    tol: float = PER_OP_TOL
    skip: tuple = field(default_factory=tuple)


def _fn(forward, backward, names, name):
    """DiffOp from ``forward(*arrays) -> (y, saved)`` and ``backward(saved, dy) -> tuple``."""
    def fwd(pt):
        return forward(*[pt[k] for k in names])

    def bwd(saved, dy):
        grads = backward(saved, np.asarray(dy, dtype=np.float64))
        return {k: g for k, g in zip(names, grads) if g is not None}

    return DiffOp(fwd, bwd, name)


def _u(rng, *shape, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, size=shape)


def _linear(seed):
    r = np.random.default_rng(seed)
    op = _fn(L.linear, L.linear_backward, ("x", "w", "b"), "linear")
    return Case(op, {"x": _u(r, 3, 4), "w": _u(r, 5, 4), "b": _u(r, 5)})


def _conv3d(seed):
    r = np.random.default_rng(seed)
    op = _fn(L.conv3d, L.conv3d_backward, ("x", "w", "b"), "conv3d")
    return Case(op, {"x": _u(r, 2, 3, 3, 2), "w": _u(r, 2, 3, 3, 3, 2), "b": _u(r, 2)})


def _depthwise(seed):
    r = np.random.default_rng(seed)
    op = _fn(L.depthwise_conv3d, L.depthwise_conv3d_backward, ("x", "w", "b"), "depthwise_conv3d")
    return Case(op, {"x": _u(r, 2, 3, 3, 2), "w": _u(r, 3, 3, 3, 2), "b": _u(r, 2)})


def _layernorm(seed):
    r = np.random.default_rng(seed)
    op = _fn(L.layernorm, L.layernorm_backward, ("x",), "layernorm")
    return Case(op, {"x": _u(r, 3, 5)})


def _batchnorm(seed):
    r = np.random.default_rng(seed)

    def fwd(x, g, b):
        return L.batchnorm(x, g, b, np.zeros(x.shape[-1]), np.ones(x.shape[-1]), train=True)

    op = _fn(fwd, L.batchnorm_backward, ("x", "gamma", "beta"), "batchnorm")
    return Case(op, {"x": _u(r, 2, 5, 3), "gamma": _u(r, 3, lo=0.5, hi=1.5), "beta": _u(r, 3)})


def _gelu(seed):
    r = np.random.default_rng(seed)
    return Case(_fn(L.gelu, L.gelu_backward, ("x",), "gelu"), {"x": _u(r, 7, lo=-3, hi=3)})


def _relu(seed):
    r = np.random.default_rng(seed)
    x = _u(r, 7)
    x = np.where(np.abs(x) < 0.05, 0.5, x)  # keep away from the kink
    return Case(_fn(L.relu, L.relu_backward, ("x",), "relu"), {"x": x})


def _softmax(seed):
    r = np.random.default_rng(seed)
    return Case(_fn(L.softmax, L.softmax_backward, ("x",), "softmax"), {"x": _u(r, 3, 4, lo=-2, hi=2)})


def _l2norm(seed):
    r = np.random.default_rng(seed)
    return Case(_fn(L.l2_normalize, L.l2_normalize_backward, ("x",), "l2_normalize"), {"x": _u(r, 3, 4)})


def _pixel_shuffle(seed):
    r = np.random.default_rng(seed)
    op = _fn(lambda x: L.pixel_shuffle_h(x, 2), L.pixel_shuffle_h_backward, ("x",), "pixel_shuffle_h")
    return Case(op, {"x": _u(r, 2, 2, 3, 4)})


def _selective_scan(seed):
    r = np.random.default_rng(seed)
    p = init_ssm_params(2, 3, r)
    p["w_delta"] = p["w_delta"] + _u(r, 2, 2) * 0.5
    names = ("x",) + PARAM_NAMES

    def fwd(x, *vals):
        return selective_scan_forward(x, dict(zip(PARAM_NAMES, vals)), block=2)

    def bwd(saved, dy):
        dx, g = selective_scan_backward(saved, dy)
        return (dx,) + tuple(g[k] for k in PARAM_NAMES)

    point = {"x": _u(r, 6, 2), **p}
    return Case(_fn(fwd, bwd, names, "selective_scan"), point)


def _dwam(seed):
    r = np.random.default_rng(seed)
    p = init_dwam_params(5, r)
    p = {k: v + _u(r, *v.shape) * 0.3 for k, v in p.items()}
    keys = tuple(p)

    def fwd(s, *vals):
        return dwam_forward(s, dict(zip(keys, vals)))

    def bwd(saved, dy):
        ds, g = dwam_backward(saved, dy)
        return (ds,) + tuple(g[k] for k in keys)

    return Case(_fn(fwd, bwd, ("stacked",) + keys, "dwam"), {"stacked": _u(r, 4, 2, 3), **p})


def _module_case(store, forward, backward, inputs, arrays, name, eps=1e-5, tol=PER_OP_TOL):
    op, make_point = module_op(store, forward, backward, inputs, name)
    return Case(op, make_point(**arrays), eps, tol)


def _perturb(store, r, scale=0.3):
    # move gates and affine maps off their identity init so every path carries gradient;
    # step sizes of order one keep scan outputs (and their gradients) well above roundoff
    for k, v in store.params.items():
        if k.endswith("delta_bias"):
            v[...] = r.uniform(0.0, 1.5, v.shape)
        elif not k.endswith("log_a"):
            v += scale * r.uniform(-1, 1, v.shape)


def _vemm(seed):
    r = np.random.default_rng(seed)
    store = ParamStore()
    m = VEMM(store, "", 4, 2, r, dwam_hidden=3, scan_block=2)
    _perturb(store, r)
    return _module_case(store, m.forward, m.backward, ("f",), {"f": _u(r, 2, 2, 2, 4)}, "vemm", 1e-4)


def _vdim(seed):
    r = np.random.default_rng(seed)
    store = ParamStore()
    m = VDIM(store, "", 3, 4, np.float64)
    _perturb(store, r)
    return _module_case(store, m.forward, m.backward, ("f", "d"),
                        {"f": _u(r, 2, 2, 2, 3), "d": _u(r, 4)}, "vdim")


def _convffn(seed):
    r = np.random.default_rng(seed)
    store = ParamStore()
    m = ConvFFN(store, "", 2, r, np.float64)
    _perturb(store, r)
    return _module_case(store, m.forward, m.backward, ("f",), {"f": _u(r, 2, 2, 3, 2)}, "convffn", 1e-4)


def _rvmb(seed):
    r = np.random.default_rng(seed)
    store = ParamStore()
    cfg = ModelConfig(channels=4, state_size=2, embed_dim=3, dwam_hidden=3, scan_block=2)
    m = RVMB(store, "", cfg, r, np.float64)
    _perturb(store, r)
    return _module_case(store, m.forward, m.backward, ("f", "d"),
                        {"f": _u(r, 2, 2, 2, 4), "d": _u(r, 3)}, "rvmb", 1e-4)


def _encoder(seed):
    r = np.random.default_rng(seed)
    enc = DegradationEncoder(EncoderConfig(channels=4, n_blocks=2, embed_dim=3, seed=seed))
    _perturb(enc.store, r, 0.1)

    def fwd(x):
        return enc.forward(x, train=True)

    return _module_case(enc.store, fwd, enc.backward, ("x",), {"x": _u(r, 2, 4, 8, 8, lo=0, hi=1)},
                        "encoder", 1e-5)  # a larger step crosses ReLU kinks


def _l1(seed):
    r = np.random.default_rng(seed)
    y = _u(r, 2, 3, 4)
    yhat = y + np.where(r.random(y.shape) < 0.5, -1, 1) * r.uniform(0.05, 0.5, y.shape)
    op = DiffOp(lambda pt: (l1_loss(pt["y"], pt["yhat"]), None),
                lambda _, dl: {"yhat": dl * l1_loss_backward(y, yhat)}, "l1_loss")
    return Case(op, {"y": y, "yhat": yhat}, skip=("y",))


def _ssim(seed):
    r = np.random.default_rng(seed)
    y, yhat = _u(r, 2, 12, 12, lo=0, hi=1), _u(r, 2, 12, 12, lo=0, hi=1)

    def fwd(pt):
        return ssim(pt["y"], pt["yhat"]), (pt["y"].copy(), pt["yhat"].copy())

    def bwd(saved, dl):
        _, dy, dyh = ssim_grads(*saved)
        return {"y": dl * dy, "yhat": dl * dyh}

    op = DiffOp(fwd, bwd, "ssim")
    return Case(op, {"y": y, "yhat": yhat})


def _total_loss(seed):
    r = np.random.default_rng(seed)
    y = _u(r, 2, 12, 12, lo=0, hi=1)
    yhat = y + np.where(r.random(y.shape) < 0.5, -1, 1) * r.uniform(0.05, 0.3, y.shape)

    def fwd(pt):
        return total_loss(pt["y"], pt["yhat"]), (pt["y"].copy(), pt["yhat"].copy())

    def bwd(saved, dl):
        return {"yhat": dl * total_loss_and_grad(*saved)[1]}

    return Case(DiffOp(fwd, bwd, "total_loss"),
                {"y": y, "yhat": yhat}, skip=("y",))


def _info_nce(seed):
    r = np.random.default_rng(seed)

    def fwd(pt):
        loss, dq, dk = info_nce(pt["q"], pt["k"], 0.5)
        return loss, (dq, dk)

    return Case(DiffOp(fwd, lambda sv, dl: {"q": dl * sv[0], "k": dl * sv[1]}, "info_nce"),
                {"q": _u(r, 3, 4), "k": _u(r, 3, 4)})


MICRO_MODEL = ModelConfig(channels=4, n_groups=1, n_blocks=1, scale=2, state_size=2,
                          embed_dim=4, dwam_hidden=3, scan_block=2)


def _network(seed):
    r = np.random.default_rng(seed)
    net = ReconNet(ModelConfig(**{**MICRO_MODEL.to_dict(), "seed": seed}))
    _perturb(net.store, r, 0.2)
    return _module_case(net.store, net.forward, net.backward, ("x", "d"),
                        {"x": _u(r, 2, 4, 4, lo=0, hi=1), "d": _u(r, 4)}, "network", 1e-4,
                        END_TO_END_TOL)


OPS: dict[str, Callable[[int], Case]] = {
    "linear": _linear,
    "conv3d": _conv3d,
    "depthwise_conv3d": _depthwise,
    "layernorm": _layernorm,
    "batchnorm": _batchnorm,
    "gelu": _gelu,
    "relu": _relu,
    "softmax": _softmax,
    "l2_normalize": _l2norm,
    "pixel_shuffle_h": _pixel_shuffle,
    "selective_scan": _selective_scan,
    "dwam": _dwam,
    "vemm": _vemm,
    "vdim": _vdim,
    "convffn": _convffn,
    "rvmb": _rvmb,
    "encoder": _encoder,
    "l1_loss": _l1,
    "ssim": _ssim,
    "total_loss": _total_loss,
    "info_nce": _info_nce,
}
# the end-to-end micro model is slow (thousands of coordinates); kept apart
SLOW_OPS: dict[str, Callable[[int], Case]] = {"network": _network}


def check(name: str, seed: int = 0):
    """``(max_rel_error, tol, report)`` for one registered op."""
    case = {**OPS, **SLOW_OPS}[name](seed)
    rep = gradcheck_report(case.op, case.point, case.eps, seed, case.skip)
    return rep.max_rel_error, case.tol, rep
