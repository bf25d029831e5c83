"""Command-line entry point: synth, train, propagate, evaluate, report.

Every run writes a ``manifest.json`` (atomically, at the end) recording the
command, its effective configuration, input/output paths, seed, and runtime,
so any output can be reproduced from its manifest.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys
import time
from dataclasses import asdict, fields

from . import __version__, evalkit, synth, trainer, volgrid, warpfield


def _write_manifest(directory, command, config, inputs, outputs, seed, runtime_s):
    os.makedirs(directory, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "inputs": inputs,
        "outputs": outputs,
        "seed": seed,
        "version": __version__,
        "runtime_s": runtime_s,
    }
    tmp = os.path.join(directory, ".manifest.json.tmp")
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    os.replace(tmp, os.path.join(directory, "manifest.json"))


def _add_train_overrides(parser):
    pairs = [
        ("--seed", int), ("--lr", float), ("--lambda1", float), ("--lambda2", float),
        ("--clip", float), ("--total-gen-iters", int), ("--patch-size", int),
        ("--margin", int), ("--patches-per-pair", int), ("--depth", int),
        ("--base-filters", int), ("--critic-depth", int), ("--critic-base-filters", int),
        ("--warmup-gen-iters", int), ("--warmup-critic-ratio", int),
        ("--steady-critic-ratio", int), ("--ckpt-every", int), ("--num-threads", int),
        ("--critic-mode", str), ("--torso-threshold", float),
    ]
    for flag, typ in pairs:
        parser.add_argument(flag, type=typ, default=None)
    parser.add_argument("--use-dice", dest="use_dice", action="store_true", default=None)
    parser.add_argument("--no-dice", dest="use_dice", action="store_false", default=None)


def _collect_overrides(args):
    keys = [f.name for f in fields(trainer.TrainConfig)]
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="regseg",
                                     description="Joint registration/segmentation pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic phantom cases")
    p.add_argument("--out", required=True)
    p.add_argument("--cases", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", type=int, nargs=3, default=(64, 64, 64))
    p.add_argument("--spacing", type=float, nargs=3, default=(1.0, 1.0, 1.0))
    p.add_argument("--amplitude-mm", type=float, default=5.0)
    p.add_argument("--control-spacing-mm", type=float, default=16.0)

    p = sub.add_parser("train", help="train the adversarial registration model")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    _add_train_overrides(p)

    p = sub.add_parser("propagate", help="estimate a DVF and warp image + contours")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--fixed", required=True)
    p.add_argument("--moving", required=True)
    p.add_argument("--moving-seg", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="score propagated contours against references")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="render mean±std tables with significance marks")
    p.add_argument("--in", dest="inputs", nargs="+", required=True)
    p.add_argument("--baselines", nargs="*", default=[])
    p.add_argument("--out", required=True)
    p.add_argument("--plots", action="store_true")
    return parser


def _cmd_synth(args) -> int:
    t0 = time.time()
    written = []
    for i in range(args.cases):
        seed = args.seed + i
        spec = synth.PhantomSpec(dims=tuple(args.dims), spacing=tuple(args.spacing),
                                 amplitude_mm=args.amplitude_mm,
                                 control_spacing_mm=args.control_spacing_mm, seed=seed)
        case = synth.make_phantom_case(spec)
        case_dir = os.path.join(args.out, f"case_{seed}")
        synth.save_case(case, case_dir)
        written.append(case_dir)
    _write_manifest(args.out, "synth",
                    {"cases": args.cases, "dims": list(args.dims),
                     "spacing": list(args.spacing), "amplitude_mm": args.amplitude_mm,
                     "control_spacing_mm": args.control_spacing_mm},
                    {}, {"cases": written}, args.seed, time.time() - t0)
    return 0


def _load_cases(data_dir):
    case_dirs = sorted(d for d in glob.glob(os.path.join(data_dir, "*"))
                       if os.path.isdir(d) and os.path.exists(os.path.join(d, "fixed.mhd")))
    if not case_dirs:
        raise ValueError(f"no case directories under {data_dir}")
    return [synth.load_case(d) for d in case_dirs]


def _cmd_train(args) -> int:
    t0 = time.time()
    file_values = trainer.read_config_file(args.config) if args.config else {}
    cfg = trainer.make_train_config(file_values, _collect_overrides(args))
    cases = _load_cases(args.data)
    trainer.train(cases, cfg, out_dir=args.out, resume=args.resume)
    _write_manifest(args.out, "train", asdict(cfg),
                    {"data": args.data, "resume": args.resume},
                    {"checkpoint": os.path.join(args.out, "ckpt_final.pt")},
                    cfg.seed, time.time() - t0)
    return 0


def _cmd_propagate(args) -> int:
    t0 = time.time()
    fixed = volgrid.load_volume(args.fixed)
    moving = volgrid.load_volume(args.moving)
    moving_seg = volgrid.load_segmentation(args.moving_seg)
    ckpt = trainer.load_checkpoint(args.ckpt)
    dvf, warped, warped_seg = trainer.propagate(ckpt, fixed, moving, moving_seg)
    os.makedirs(args.out, exist_ok=True)
    warpfield.save_dvf(dvf, os.path.join(args.out, "dvf.mhd"))
    volgrid.save_volume(warped, os.path.join(args.out, "warped.mhd"))
    volgrid.save_segmentation(warped_seg, os.path.join(args.out, "warped_seg.mhd"))
    _write_manifest(args.out, "propagate", {"ckpt": args.ckpt},
                    {"fixed": args.fixed, "moving": args.moving,
                     "moving_seg": args.moving_seg},
                    {"dvf": "dvf.mhd", "warped": "warped.mhd",
                     "warped_seg": "warped_seg.mhd"},
                    ckpt["config"].get("seed"), time.time() - t0)
    return 0


def _cmd_evaluate(args) -> int:
    t0 = time.time()
    pred_dirs = sorted(d for d in glob.glob(os.path.join(args.pred, "*"))
                       if os.path.isdir(d) and os.path.exists(os.path.join(d, "warped_seg.mhd")))
    if not pred_dirs:
        raise ValueError(f"no propagated cases under {args.pred}")
    results = []
    for pred_dir in pred_dirs:
        case_id = os.path.basename(os.path.normpath(pred_dir))
        ref_seg = volgrid.load_segmentation(os.path.join(args.ref, case_id, "fixed_seg.mhd"))
        pred_seg = volgrid.load_segmentation(os.path.join(pred_dir, "warped_seg.mhd"))
        dvf_path = os.path.join(pred_dir, "dvf.mhd")
        dvf = warpfield.load_dvf(dvf_path) if os.path.exists(dvf_path) else None
        runtime = float("nan")
        manifest_path = os.path.join(pred_dir, "manifest.json")
        if os.path.exists(manifest_path):
            with open(manifest_path) as fh:
                runtime = json.load(fh).get("runtime_s", float("nan"))
        results.append(evalkit.evaluate_case(case_id, ref_seg, pred_seg, dvf, runtime))
    evalkit.write_case_results_csv(results, args.out)
    _write_manifest(os.path.dirname(os.path.abspath(args.out)) or ".", "evaluate",
                    {}, {"pred": args.pred, "ref": args.ref},
                    {"csv": args.out}, None, time.time() - t0)
    return 0


def _cmd_report(args) -> int:
    t0 = time.time()
    results = {}
    for path in args.inputs:
        method = os.path.splitext(os.path.basename(path))[0]
        results[method] = evalkit.read_case_results_csv(path)
    text = evalkit.report_tables(results, args.baselines)
    rows = evalkit.report_csv_rows(results, args.baselines)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "tables.txt"), "w") as fh:
        fh.write(text)
    import csv as _csv
    with open(os.path.join(args.out, "tables.csv"), "w", newline="") as fh:
        writer = _csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    if args.plots:
        evalkit.emit_plots(results, args.out)
    _write_manifest(args.out, "report", {"baselines": args.baselines},
                    {"inputs": args.inputs}, {"tables": "tables.txt"},
                    None, time.time() - t0)
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "propagate": _cmd_propagate,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
}


def dispatch(argv) -> int:
    """Run one subcommand; 0 on success, 1 on domain errors, 2 on usage errors."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ValueError, OSError, RuntimeError, KeyError) as exc:
        print(f"regseg {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
