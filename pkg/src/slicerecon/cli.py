"""Command line front end.

Exit codes: 0 success, 2 configuration or precondition error, 3 numerical
failure, 4 I/O error. ``SLICERECON_OUTPUT_DIR`` overrides the output
directory of any subcommand that writes one.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .errors import ConfigError, ReconError

logger = logging.getLogger("slicerecon")

OUTPUT_ENV = "SLICERECON_OUTPUT_DIR"


def _out_dir(args, default: str) -> Path:
    env = os.environ.get(OUTPUT_ENV)
    p = Path(env) if env else Path(getattr(args, "out", None) or default)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------

def cmd_phantom(args) -> int:
    from .io import save_field, save_stack, write_json
    from .phantom import PhantomConfig, generate_phantom

    base = PhantomConfig().to_dict()
    if args.config:
        base.update(json.loads(Path(args.config).read_text()))
    for key in ("size", "n_slices", "amplitude", "seed"):
        val = getattr(args, key)
        if val is not None:
            base[key] = val
    cfg = PhantomConfig.from_dict(base)
    ph = generate_phantom(cfg)
    out = _out_dir(args, "phantom")
    save_stack(out / "truth", ph.truth)
    save_stack(out / "perturbed", ph.perturbed)
    write_json(out / "ground_truth.json", {"config": cfg.to_dict(),
                                           "transforms": [T.to_dict() for T in ph.gt_transforms]})
    if cfg.amplitude > 0:
        (out / "fields").mkdir(exist_ok=True)
        for i, phi in enumerate(ph.gt_fields):
            save_field(out / "fields" / f"field_{i:03d}", phi)
    print(out)
    return 0


def cmd_calibrate(args) -> int:
    from .calibrate import calibrate_stack
    from .io import load_image, write_json

    images = [load_image(p) for p in args.images]
    S, per, dev = calibrate_stack(images, args.pitch, rho_res=args.rho_res,
                                  theta_res=np.deg2rad(args.theta_res_deg), N=args.peaks, tau=args.tau)
    result = {
        "S": S.S,
        "per_image": [r.to_dict() for r in per],
        "relative_deviation": dev,
        "lines": per[0].to_dict()["lines"] if len(per) == 1 else [],
        "diagnostics": [d for r in per for d in r.diagnostics],
    }
    out = _out_dir(args, ".")
    write_json(out / "scale.json", result)
    print(f"S = {S.S:.6g} mm/px")
    return 0


def cmd_register(args) -> int:
    from .io import load_stack, save_field, save_stack, write_json
    from .ocm import OcmOptions, register_stack
    from .refine.predictor import PredictorParams
    from .refine.stack import refine_stack
    from .refine.variational import RefineConfig

    stack = load_stack(args.stack)
    out = _out_dir(args, "registered")
    if args.stage in ("ocm", "hybrid"):
        res = register_stack(stack, None, OcmOptions(workers=args.workers))
        save_stack(out / "ocm", res.aligned)
        write_json(out / "transforms.json", res.to_records())
        stack = res.aligned
    if args.stage in ("refine", "hybrid"):
        rcfg = RefineConfig(backend=args.backend, lam=args.lam)
        if args.backend == "amortized" and not args.params:
            raise ConfigError("--backend amortized needs --params")
        params = PredictorParams.load(args.params) if args.params else None
        refined, fields, traces = refine_stack(stack, rcfg, params)
        save_stack(out / "refined", refined)
        (out / "fields").mkdir(exist_ok=True)
        for i, phi in enumerate(fields):
            save_field(out / "fields" / f"field_{i:03d}", phi)
        write_json(out / "refine_traces.json", traces)
    print(out)
    return 0


def cmd_smooth(args) -> int:
    from .contour import extract_contour, rasterize_contour, smooth_contour
    from .io import load_mask, save_raster, write_json

    m = load_mask(args.mask)
    c = smooth_contour(extract_contour(m), args.segment_len, args.samples)
    diag: list = []
    sm = rasterize_contour(c, m.shape, m.spacing, diagnostics=diag)
    out = _out_dir(args, ".")
    save_raster(out / "smoothed.pgm", sm)
    payload = c.to_dict()
    payload["flags"] = list(c.flags) + diag
    write_json(out / "contour.json", payload)
    print(out)
    return 0


def cmd_reconstruct(args) -> int:
    from .io import load_stack, read_json, save_volume, write_json
    from .volume import measure, stack_to_volume

    stack = load_stack(args.stack)
    S = read_json(args.scale)["S"] if args.scale else None
    vol = stack_to_volume(stack, S)
    out = _out_dir(args, "reconstruction")
    save_volume(out / "volume", vol)
    write_json(out / "measurements.json", measure(vol))
    print(out)
    return 0


def _load_volume_like(path, scale=None):
    from .io import load_stack, load_volume
    from .volume import stack_to_volume
    p = Path(path)
    if p.is_dir():
        st = load_stack(p)
        return stack_to_volume(st, scale if scale is not None else (st.scale or st.spacing[0]))
    return load_volume(p.with_suffix(""))


def cmd_evaluate(args) -> int:
    from .io import load_image, write_json
    from .metrics import evaluate_all

    cand = _load_volume_like(args.candidate)
    ref = _load_volume_like(args.reference)
    pair = None
    if args.intensity:
        pair = (load_image(args.intensity[0]), load_image(args.intensity[1]))
    rep = evaluate_all(cand, ref, pair)
    out = _out_dir(args, ".")
    write_json(out / "report.json", rep.to_dict())
    print(json.dumps({k: rep.to_dict()[k] for k in ("dice", "iou", "hd95")}))
    return 0


def _metric_values(path, arm: Optional[str], metric: str) -> List[float]:
    from .io import read_json
    rep = read_json(path)
    if "arms" in rep:
        if arm is None:
            raise ConfigError(f"{path} holds several arms; pass --arm")
        rep = rep["arms"][arm]
    return [float(rep[metric])]


def cmd_stats(args) -> int:
    from .io import read_json
    from .metrics import wilcoxon_signed_rank

    if len(args.a) != len(args.b):
        raise ConfigError("the two report sets must pair up one to one")
    if len(args.a) == 1 and args.metric == "per_slice_dice":
        x = _slice_values(read_json(args.a[0]), args.arm_a)
        y = _slice_values(read_json(args.b[0]), args.arm_b)
    else:
        x = [v for p in args.a for v in _metric_values(p, args.arm_a, args.metric)]
        y = [v for p in args.b for v in _metric_values(p, args.arm_b, args.metric)]
    res = wilcoxon_signed_rank(x, y)
    print(json.dumps(res.to_dict()))
    return 0


def _slice_values(rep: dict, arm: Optional[str]) -> List[float]:
    if "arms" in rep:
        rep = rep["arms"][arm]
    return list(rep["per_slice_dice"])


def cmd_train(args) -> int:
    from .io import load_stack
    from .refine.predictor import TrainConfig, train_amortized
    from .refine.variational import RefineConfig, prepare

    rcfg = RefineConfig()
    pairs = []
    for d in args.stacks:
        st = load_stack(d)
        pairs += [(prepare(st[i - 1], rcfg), prepare(st[i], rcfg)) for i in range(1, len(st))]
    tcfg = TrainConfig(epochs=args.epochs, lr=args.lr, batch=args.batch, seed=args.seed or 0,
                       augment=args.augment)
    params = train_amortized(pairs, tcfg)
    out = _out_dir(args, ".")
    params.save(out / "predictor.npz")
    print(f"{len(pairs)} pairs, final loss {params.train_loss[-1] if params.train_loss else float('nan'):.4f}")
    return 0


def cmd_run(args) -> int:
    from .pipeline import PipelineConfig, load_config, run_pipeline

    cfg = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    env = os.environ.get(OUTPUT_ENV)
    if env:
        cfg.output_dir = env
    elif args.out:
        cfg.output_dir = args.out
    res = run_pipeline(cfg)
    print(f"{res.status}: {cfg.output_dir}")
    return res.exit_code


# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slicerecon", description="Slice-stack registration and reconstruction.")
    p.add_argument("--print-defaults", action="store_true", help="print the default run config and exit")
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command")

    def common(sp, out_default=True):
        sp.add_argument("--seed", type=int)
        if out_default:
            sp.add_argument("--out", help=f"output directory (overridden by ${OUTPUT_ENV})")
        return sp

    sp = common(sub.add_parser("phantom", help="generate a synthetic stack"))
    sp.add_argument("--config")
    sp.add_argument("--size", type=int)
    sp.add_argument("--n-slices", dest="n_slices", type=int)
    sp.add_argument("--amplitude", type=float)
    sp.set_defaults(func=cmd_phantom)

    sp = common(sub.add_parser("calibrate", help="scale factor from grid image(s)"))
    sp.add_argument("images", nargs="+")
    sp.add_argument("--pitch", type=float, required=True, help="grid pitch in mm")
    sp.add_argument("--rho-res", type=float, default=1.0)
    sp.add_argument("--theta-res-deg", type=float, default=1.0)
    sp.add_argument("--peaks", type=int, default=40)
    sp.add_argument("--tau", type=float, default=0.3)
    sp.set_defaults(func=cmd_calibrate)

    sp = common(sub.add_parser("register", help="OCM and/or residual refinement"))
    sp.add_argument("stack")
    sp.add_argument("--stage", choices=("ocm", "refine", "hybrid"), default="hybrid")
    sp.add_argument("--backend", choices=("variational", "amortized"), default="variational")
    sp.add_argument("--params", help="trained predictor (.npz) for the amortized backend")
    sp.add_argument("--lam", type=float, default=0.01)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_register)

    sp = common(sub.add_parser("smooth", help="Bezier-smooth a mask contour"))
    sp.add_argument("mask")
    sp.add_argument("--segment-len", type=int, default=8)
    sp.add_argument("--samples", type=int, default=16)
    sp.set_defaults(func=cmd_smooth)

    sp = common(sub.add_parser("reconstruct", help="stack to volume plus measurements"))
    sp.add_argument("stack")
    sp.add_argument("--scale", help="scale.json from calibrate")
    sp.set_defaults(func=cmd_reconstruct)

    sp = common(sub.add_parser("evaluate", help="metrics of a candidate against a reference"))
    sp.add_argument("candidate", help="stack directory or volume file")
    sp.add_argument("reference", help="stack directory or volume file")
    sp.add_argument("--intensity", nargs=2, metavar=("A", "B"), help="image pair for NCC/SSIM")
    sp.set_defaults(func=cmd_evaluate)

    sp = common(sub.add_parser("stats", help="Wilcoxon signed-rank test over paired reports"), out_default=False)
    sp.add_argument("--a", nargs="+", required=True)
    sp.add_argument("--b", nargs="+", required=True)
    sp.add_argument("--metric", default="dice")
    sp.add_argument("--arm-a")
    sp.add_argument("--arm-b")
    sp.set_defaults(func=cmd_stats)

    sp = common(sub.add_parser("train", help="train the amortized predictor"))
    sp.add_argument("stacks", nargs="+", help="OCM-aligned stack directories")
    sp.add_argument("--epochs", type=int, default=100)
    sp.add_argument("--lr", type=float, default=1e-4)
    sp.add_argument("--batch", type=int, default=8)
    sp.add_argument("--augment", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = common(sub.add_parser("run", help="full pipeline from a JSON config"))
    sp.add_argument("config", nargs="?")
    sp.set_defaults(func=cmd_run)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.print_defaults:
        from .io import dumps
        from .pipeline import PipelineConfig
        print(dumps(PipelineConfig().to_dict()))
        return 0
    if not getattr(args, "func", None):
        parser.print_help()
        return 2
    try:
        return int(args.func(args) or 0)
    except ReconError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        logger.error("I/O error: %s", exc)
        return 4
    except ValueError as exc:
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
