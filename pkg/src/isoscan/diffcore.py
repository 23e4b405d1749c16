"""Parameter storage, the differentiable-op contract and a finite-difference checker.

Every learnable piece of the package is written as a forward function that
returns ``(output, saved)`` plus a hand-written backward that maps
``(saved, output_cotangent)`` to input/parameter cotangents.  There is no tape:
the op set is small, so each backward is written out and verified with
:func:`gradcheck`.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Any, Callable, Iterator, Mapping

import numpy as np


class GradcheckError(RuntimeError):
    """Raised when the forward pass is non-finite at a perturbed point."""

    def __init__(self, name: str, index: tuple[int, ...], message: str):
        super().__init__(f"{message} at {name}{list(index)}")
        self.name = name
        self.index = index


class ParamStore:
    """Named parameters with matching cotangent accumulators.

    Non-trainable state (batch-norm running statistics) lives in ``buffers``
    and never gets a cotangent.
    """

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = np.array(value, copy=True)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate buffer name {name!r}")
        self.buffers[name] = np.array(value, copy=True)
        return self.buffers[name]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __len__(self) -> int:
        return len(self.params)

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def accumulate(self, name: str, grad: np.ndarray) -> None:
        self.grads[name] += grad

    def zero_grads(self) -> "ParamStore":
        for g in self.grads.values():
            g.fill(0.0)
        return self

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def set_values(self, values: Mapping[str, np.ndarray]) -> None:
        for name, v in values.items():
            target = self.params[name] if name in self.params else self.buffers[name]
            if target.shape != np.shape(v):
                raise ValueError(f"shape mismatch for {name}: {target.shape} vs {np.shape(v)}")
            target[...] = v

    def astype(self, dtype) -> "ParamStore":
        for d in (self.params, self.grads, self.buffers):
            for k in d:
                d[k] = d[k].astype(dtype)
        return self

    def copy(self) -> "ParamStore":
        out = ParamStore()
        out.params = {k: v.copy() for k, v in self.params.items()}
        out.grads = {k: v.copy() for k, v in self.grads.items()}
        out.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        for name in sorted(self.buffers):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.buffers[name]).tobytes())
        return h.hexdigest()

    def grads_all_zero(self) -> bool:
        return all(not np.any(g) for g in self.grads.values())


def zero_grads(store: ParamStore) -> ParamStore:
    return store.zero_grads()


class Module:
    """Base for parameter-holding layers; names are ``prefix + local name``."""

    def __init__(self, store: ParamStore, prefix: str = ""):
        self.store = store
        self.prefix = prefix

    def param(self, name: str, value: np.ndarray) -> np.ndarray:
        return self.store.add(self.prefix + name, value)

    def p(self, name: str) -> np.ndarray:
        return self.store.params[self.prefix + name]

    def acc(self, name: str, grad: np.ndarray) -> None:
        self.store.grads[self.prefix + name] += grad

    def child(self, name: str) -> str:
        return f"{self.prefix}{name}."

    def param_names(self) -> list[str]:
        return [n for n in self.store.params if n.startswith(self.prefix)]


@dataclass
class DiffOp:
    """A differentiable operation over a dict of named arrays.

    ``forward(point) -> (output, saved)``; ``backward(saved, dout) -> {name: cotangent}``.
    Names missing from the backward result are treated as zero cotangents.
    """

    forward: Callable[[dict[str, np.ndarray]], tuple[Any, Any]]
    backward: Callable[[Any, np.ndarray], dict[str, np.ndarray]]
    name: str = "op"


def _as_array(out) -> np.ndarray:
    return np.asarray(out, dtype=np.float64)


@dataclass
class GradcheckReport:
    max_rel_error: float
    worst_name: str | None
    worst_index: tuple[int, ...] | None
    analytic: float = 0.0
    numeric: float = 0.0


def gradcheck(
    op: DiffOp,
    point: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    seed: int = 0,
    skip: tuple[str, ...] = (),
) -> float:
    return gradcheck_report(op, point, eps, seed, skip).max_rel_error


def gradcheck_report(
    op: DiffOp,
    point: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    seed: int = 0,
    skip: tuple[str, ...] = (),
) -> GradcheckReport:
    """Max relative error between the analytic VJP and central differences.

    The output is scalarized with a fixed random projection ``r``; the analytic
    side is ``backward(saved, r)``.  Relative error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``.  Inputs listed in ``skip`` are held fixed
    (integer tables, masks).
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-6, 1e-3], got {eps}")
    point = {k: np.array(v, dtype=np.float64, copy=True) for k, v in point.items()}
    for name, v in point.items():
        if not np.all(np.isfinite(v)):
            raise ValueError(f"non-finite input {name}")

    out, saved = op.forward(point)
    out = _as_array(out)
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal(out.shape)
    analytic = op.backward(saved, proj.copy() if out.ndim else float(proj))

    report = GradcheckReport(0.0, None, None)
    for name, x in point.items():
        if name in skip:
            continue
        a_grad = analytic.get(name)
        a_grad = np.zeros_like(x) if a_grad is None else np.asarray(a_grad, dtype=np.float64)
        if a_grad.shape != x.shape:
            raise ValueError(f"cotangent shape {a_grad.shape} != input shape {x.shape} for {name}")
        flat = x.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(np.sum(_as_array(op.forward(point)[0]) * proj))
            flat[i] = orig - eps
            fm = float(np.sum(_as_array(op.forward(point)[0]) * proj))
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradcheckError(name, np.unravel_index(i, x.shape), "non-finite forward value")
            num = (fp - fm) / (2.0 * eps)
            a = float(a_grad.reshape(-1)[i])
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            if err > report.max_rel_error:
                report = GradcheckReport(err, name, np.unravel_index(i, x.shape), a, num)
    return report


def module_op(
    store: ParamStore,
    forward: Callable[..., tuple[Any, Any]],
    backward: Callable[[Any, np.ndarray], Any],
    inputs: tuple[str, ...],
    name: str = "module",
) -> tuple[DiffOp, Callable[[dict[str, np.ndarray]], dict[str, np.ndarray]]]:
    """Wrap a ParamStore-backed layer as a :class:`DiffOp`.

    ``forward(*inputs)`` must return ``(out, saved)`` and ``backward(saved, dout)``
    returns the input cotangent(s) while accumulating parameter cotangents in
    ``store``.  The point holds both the inputs and every store parameter.
    Returns the op and a helper that builds the full point from input arrays.
    """

    def _load(point):
        for k in store.params:
            store.params[k][...] = point[k]

    def fwd(point):
        _load(point)
        out, saved = forward(*[point[k] for k in inputs])
        return out, saved

    def bwd(saved, dout):
        store.zero_grads()
        din = backward(saved, dout)
        if len(inputs) == 1:
            din = (din,)
        res = {k: np.array(g) for k, g in zip(inputs, din) if g is not None}
        res.update({k: g.copy() for k, g in store.grads.items()})
        return res

    def make_point(**arrays):
        pt = {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()}
        pt.update({k: v.astype(np.float64) for k, v in store.params.items()})
        return pt

    return DiffOp(fwd, bwd, name), make_point
