"""``isoscan`` command line.

Exit status: 0 on success, 1 on a usage error, 2 when the command fails at
run time (bad files, mismatched checkpoints, failed checks).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time

from . import checkpoint as ckpt
from .degradation import DegradationProfile, degrade
from .infer import DEFAULT_OVERLAP, DEFAULT_TILE, reconstruct
from .losses import metrics, metrics_json
from .volume import VolumeFormatError, generate_phantom, import_raw_u8, load_volume, save_volume

USAGE_ERROR = 1
RUNTIME_ERROR = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


def _dims(text: str) -> tuple[int, int, int]:
    parts = text.replace("x", ",").split(",")
    try:
        dims = tuple(int(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must look like F,h,W (got {text!r})") from None
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"dims must be three positive integers (got {text!r})")
    return dims


def _spacing(text: str) -> tuple[float, float, float]:
    try:
        sp = tuple(float(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"spacing must look like z,y,x (got {text!r})") from None
    if len(sp) != 3 or min(sp) <= 0:
        raise argparse.ArgumentTypeError("spacing must be three positive numbers")
    return sp


def _read_input(path, raw_dims, spacing):
    if raw_dims:
        return import_raw_u8(path, raw_dims, spacing or (1.0, 1.0, 1.0))
    return load_volume(path)


def _add_raw(p):
    p.add_argument("--raw-dims", type=_dims, metavar="F,h,W",
                   help="read --input as raw uint8 of these dims instead of VEMV")
    p.add_argument("--spacing", type=_spacing, metavar="z,y,x", help="voxel spacing for raw input")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="isoscan", description="Isotropic reconstruction of anisotropic volumes.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("phantom", help="write a synthetic isotropic volume")
    p.add_argument("--dims", type=_dims, required=True, metavar="F,h,W")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--spacing", type=_spacing, default=(1.0, 1.0, 1.0), metavar="z,y,x")
    p.add_argument("--output", required=True)

    p = sub.add_parser("degrade", help="blur, decimate and add noise along h")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--scale", type=int, default=2)
    p.add_argument("--blur-sigma", type=float, default=4.0)
    p.add_argument("--filter-size", type=int, default=8)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    _add_raw(p)

    p = sub.add_parser("train-moco", help="stage 1: contrastive encoder training")
    p.add_argument("--config", required=True)
    p.add_argument("--resume")
    p.add_argument("--steps", type=int, help="run at most this many steps")

    p = sub.add_parser("train", help="stage 2: reconstruction training with a frozen encoder")
    p.add_argument("--config", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--resume")
    p.add_argument("--steps", type=int, help="run at most this many steps")

    p = sub.add_parser("reconstruct", help="upsample a volume with a trained model")
    p.add_argument("--input", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--scale", type=int, required=True)
    p.add_argument("--axis", choices=("h", "z"), default="h")
    p.add_argument("--output", required=True)
    p.add_argument("--tile", type=_dims, default=DEFAULT_TILE, metavar="F,h,W")
    p.add_argument("--overlap", type=int, default=DEFAULT_OVERLAP)
    _add_raw(p)

    p = sub.add_parser("evaluate", help="PSNR / SSIM / L1 of a prediction against a target")
    p.add_argument("--pred", required=True)
    p.add_argument("--target", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of registered ops")
    p.add_argument("--op", action="append", help="op name (repeatable); default all fast ops")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--list", action="store_true")

    p = sub.add_parser("selftest", help="run the invariant suite")
    p.add_argument("--corrupt-path-table", action="store_true", help=argparse.SUPPRESS)
    return ap


def _cmd_phantom(a):
    v = generate_phantom(a.dims, a.seed, a.spacing)
    save_volume(v, a.output)
    print(json.dumps({"dims": list(v.dims), "seed": a.seed}))


def _cmd_degrade(a):
    try:
        p = DegradationProfile(a.filter_size, a.blur_sigma, a.scale, a.noise_sigma, a.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None
    src = _read_input(a.input, a.raw_dims, a.spacing)
    out = degrade(src, p)
    save_volume(out, a.output)
    print(json.dumps({"dims_in": list(src.dims), "dims_out": list(out.dims), "profile": p.to_dict()}))


def _cmd_train_moco(a):
    from .train import TrainConfig, train_stage1
    cfg = TrainConfig.load(a.config)
    r = train_stage1(cfg, resume=a.resume, steps=a.steps)
    print(json.dumps({"checkpoint": r.checkpoint, "step": r.opt.step,
                      "first_loss": r.losses[0] if r.losses else None,
                      "last_loss": r.losses[-1] if r.losses else None}))


def _cmd_train(a):
    from .train import TrainConfig, train_stage2
    cfg = TrainConfig.load(a.config)
    r = train_stage2(cfg, a.encoder, resume=a.resume, steps=a.steps)
    print(json.dumps({"checkpoint": r.checkpoint, "step": r.opt.step,
                      "last_loss": r.losses[-1] if r.losses else None,
                      "validation": r.val[-1] if r.val else None}))


def _cmd_reconstruct(a):
    from .train import load_encoder, load_model
    net, _ = load_model(a.checkpoint)
    if net.cfg.scale != a.scale:
        raise ckpt.CheckpointError(f"checkpoint was trained for scale {net.cfg.scale}, not {a.scale}")
    enc = load_encoder(a.encoder)
    if enc.cfg.embed_dim != net.cfg.embed_dim:
        raise ckpt.CheckpointError("encoder embedding length does not match the model")
    if a.overlap < 0:
        raise UsageError("--overlap must be >= 0")
    vol = _read_input(a.input, a.raw_dims, a.spacing)
    t0 = time.time()
    out = reconstruct(vol, net, enc, a.axis, a.tile, a.overlap)
    save_volume(out, a.output)
    print(json.dumps({"dims_in": list(vol.dims), "dims_out": list(out.dims),
                      "seconds": round(time.time() - t0, 3)}))


def _cmd_evaluate(a):
    pred, target = load_volume(a.pred), load_volume(a.target)
    if pred.dims != target.dims:
        raise ValueError(f"dims differ: pred {pred.dims} vs target {target.dims}")
    print(metrics_json(metrics(target.data, pred.data)))


def _cmd_gradcheck(a):
    from . import registry
    names = list(registry.OPS) + list(registry.SLOW_OPS)
    if a.list:
        print("\n".join(names))
        return 0
    chosen = a.op or list(registry.OPS)
    unknown = [n for n in chosen if n not in names]
    if unknown:
        raise UsageError(f"unknown op(s): {', '.join(unknown)}")
    failed = 0
    for name in chosen:
        worst = max(registry.check(name, s)[0] for s in range(a.seeds))
        tol = registry.END_TO_END_TOL if name in registry.SLOW_OPS else registry.PER_OP_TOL
        ok = worst < tol
        failed += not ok
        print(f"{'PASS' if ok else 'FAIL'}  {name:20s} max rel err {worst:.3e} (tol {tol:.0e})")
    return RUNTIME_ERROR if failed else 0


def _cmd_selftest(a):
    from .selftest import run_selftest
    res = run_selftest(a.corrupt_path_table, report=print)
    n_ok = sum(r.ok for r in res)
    print(f"{n_ok}/{len(res)} checks passed")
    return 0 if n_ok == len(res) else RUNTIME_ERROR


COMMANDS = {
    "phantom": _cmd_phantom, "degrade": _cmd_degrade, "train-moco": _cmd_train_moco,
    "train": _cmd_train, "reconstruct": _cmd_reconstruct, "evaluate": _cmd_evaluate,
    "gradcheck": _cmd_gradcheck, "selftest": _cmd_selftest,
}


def main(argv=None) -> int:
    try:
        a = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[a.command](a) or 0
    except UsageError as e:
        print(f"isoscan {a.command}: error: {e}", file=sys.stderr)
        return USAGE_ERROR
    except (OSError, ValueError, VolumeFormatError, ckpt.CheckpointError, RuntimeError,
            AssertionError, FloatingPointError) as e:
        print(f"isoscan {a.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return RUNTIME_ERROR


if __name__ == "__main__":
    sys.exit(main())
