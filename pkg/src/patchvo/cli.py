"""Command-line entry points.

Subcommands:

* ``run``   -- track a recorded event stream, write a TUM trajectory + stats;
* ``eval``  -- score an estimated trajectory against ground truth;
* ``cost``  -- print the analytic cost report for a configuration;
* ``sweep`` -- sweep the patch-graph hyperparameters, extract the Pareto
  front and its knee, and render the trade-off scatter.

Exit codes: 0 success, 1 runtime fault, 2 usage or input error.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import costsweep, evaluation
from .config import CameraIntrinsics, ModelConfig, load_config
from .errors import (AssociationError, ConfigError, OrderingError, ParseError,
                     PatchVOError, ShapeMismatchError, ValidationError)
from .events import parse_event_stream, slice_fixed_count, slice_fixed_duration
from .pipeline import run as run_pipeline
from .trajectory import load_tum
from .weights import init_random, load_weights

USAGE_ERRORS = (FileNotFoundError, ParseError, ValidationError, ConfigError,
                OrderingError, ShapeMismatchError, AssociationError)


def _load_config_arg(value):
    """A config argument is a key-value file path or a preset name."""
    path = Path(value)
    if path.exists():
        return load_config(path)
    return ModelConfig.preset(value), None, {}


def _read_events(path, config):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"events file not found: {path}")
    fmt = "binary" if path.suffix in (".bin", ".dat", ".raw") else "csv"
    with open(path, "rb") as fp:
        return parse_event_stream(fp, fmt, config.width, config.height)


def cmd_run(args):
    config, intrinsics, extras = _load_config_arg(args.config)
    weights_path = Path(args.weights)
    if not weights_path.exists():
        raise FileNotFoundError(f"weights not found: {weights_path}")
    weights = load_weights(weights_path, config)
    events = _read_events(args.events, config)

    if "events_per_window" in extras:
        grids = slice_fixed_count(events, extras["events_per_window"],
                                  config.bins, config.width, config.height)
    else:
        window_us = extras.get("window_us", 40000)
        grids = slice_fixed_duration(events, window_us, config.bins,
                                     config.width, config.height)

    trajectory, stats = run_pipeline(grids, weights, config,
                                     intrinsics=intrinsics, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    traj_path = out / "trajectory.txt"
    trajectory.save_tum(traj_path)
    with open(out / "stats.json", "w") as fp:
        json.dump(stats.to_dict(), fp, indent=1)
    print(f"{len(trajectory)} poses -> {traj_path}")
    return 0


def cmd_eval(args):
    gt = load_tum(args.gt)
    if args.trim_head_m > 0 or args.trim_tail_m > 0:
        gt = evaluation.trim_trajectory(gt, args.trim_head_m, args.trim_tail_m)
    report = evaluation.EvalReport()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.runs_dir:
        run_files = sorted(Path(args.runs_dir).glob("*.txt"))
        if not run_files:
            raise ValidationError(f"no *.txt trajectories in {args.runs_dir}")
        for path in run_files:
            est = load_tum(path)
            alignment = evaluation.umeyama_align(est, gt)
            report.run_ates.append(evaluation.ate(est, gt, alignment))
        print(f"median ATE over {len(report.run_ates)} runs: "
              f"{evaluation.median_of_runs(report.run_ates):.6f} m")
        est = load_tum(run_files[0])
    else:
        if not args.est:
            raise ValidationError("either --est or --runs-dir is required")
        est = load_tum(args.est)
        alignment = evaluation.umeyama_align(est, gt)
        ate_m = evaluation.ate(est, gt, alignment)
        report.add_sequence(args.dataset, Path(args.est).stem, ate_m,
                            gt.path_length())
        report.alignment = {"scale": alignment.scale,
                            "quaternion_xyzw": alignment.q.tolist(),
                            "translation": alignment.t.tolist()}
        print(report.table())

    report.to_json(out / "eval_report.json")
    with open(out / "eval_report.csv", "w", newline="") as fp:
        writer = csv.DictWriter(fp, fieldnames=["dataset", "sequence",
                                                "ate_m", "length_m"])
        writer.writeheader()
        for row in report.sequences:
            writer.writerow(row)
    if not args.no_plot:
        from .plots import save_trajectory_overlay
        alignment = evaluation.umeyama_align(est, gt)
        save_trajectory_overlay(est, gt, out / "trajectory_overlay.png",
                                aligned=alignment)
    return 0


def cmd_cost(args):
    config, _, _ = _load_config_arg(args.config)
    report = costsweep.cost_report(config)
    print(f"n_edges        : {report.n_edges}")
    print(f"e_sigma        : {report.e_sigma}")
    print(f"MACs per frame : {report.macs_total}")
    for block, macs in report.macs.items():
        print(f"  {block:<12} : {macs}")
    print(f"peak memory    : {report.memory_total} bytes "
          f"({report.memory_total / 1e6:.1f} MB)")
    for component, nbytes in report.memory.items():
        print(f"  {component:<12} : {nbytes}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "cost_report.csv", "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(["quantity", "value"])
        writer.writerow(["n_edges", report.n_edges])
        writer.writerow(["e_sigma", report.e_sigma])
        for block, macs in report.macs.items():
            writer.writerow([f"macs_{block}", macs])
        writer.writerow(["macs_total", report.macs_total])
        for component, nbytes in report.memory.items():
            writer.writerow([f"memory_{component}", nbytes])
        writer.writerow(["memory_total_bytes", report.memory_total])
    return 0


def _parse_grid(spec):
    """``paper`` or ``key=lo:hi:step;key=a,b,c`` (both forms per key)."""
    if spec == "paper":
        return dict(costsweep.PAPER_GRID)
    grid = {}
    aliases = {"n_patches": "patches_per_frame", "r_w": "removal_window",
               "p_lt": "patch_lifetime"}
    for part in spec.split(";"):
        if not part.strip():
            continue
        key, _, values = part.partition("=")
        key = key.strip().lower()
        key = aliases.get(key, key)
        if key not in costsweep.PAPER_GRID:
            raise ValidationError(f"unknown grid parameter {key!r}")
        values = values.strip()
        if ":" in values:
            pieces = [int(v) for v in values.split(":")]
            lo, hi = pieces[0], pieces[1]
            step = pieces[2] if len(pieces) > 2 else 1
            grid[key] = list(range(lo, hi + 1, step))
        else:
            grid[key] = [int(v) for v in values.split(",")]
    missing = [k for k in costsweep.PAPER_GRID if k not in grid]
    if missing:
        raise ValidationError(f"grid spec missing parameters: {missing}")
    return grid


def _pipeline_evaluator(args, base_config):
    dataset = Path(args.dataset or "")
    if not dataset.is_dir():
        raise ValidationError("--evaluator pipeline requires --dataset DIR")
    gt_path = dataset / "groundtruth.txt"
    if not gt_path.exists():
        raise FileNotFoundError(f"ground truth not found: {gt_path}")
    gt = load_tum(gt_path)
    candidates = [p for p in dataset.iterdir()
                  if p.suffix in (".csv", ".bin") and p.stem == "events"]
    if not candidates:
        raise FileNotFoundError(f"no events.csv/.bin in {dataset}")
    events = _read_events(candidates[0], base_config)

    def evaluate(config):
        if args.weights:
            weights = load_weights(args.weights, config)
        else:
            weights = init_random(config, args.seed)
        grids = slice_fixed_duration(events, args.window_us, config.bins,
                                     config.width, config.height)
        est, _ = run_pipeline(grids, weights, config, seed=args.seed)
        alignment = evaluation.umeyama_align(est, gt)
        metric = evaluation.ate(est, gt, alignment)
        return costsweep.cost_report(config), metric

    return evaluate


def cmd_sweep(args):
    grid = _parse_grid(args.grid)
    if not costsweep.grid_cells(grid):
        raise ValidationError("empty sweep grid")
    if args.config:
        base_config, _, _ = _load_config_arg(args.config)
    else:
        base_config = ModelConfig.tiny()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.evaluator == "pipeline":
        evaluator = _pipeline_evaluator(args, base_config)
    else:
        evaluator = costsweep.cost_model_evaluator(base_config)

    rows = costsweep.run_sweep(grid, evaluator, base_config,
                               progress_path=out / "sweep.csv",
                               resume=args.resume)
    front = costsweep.sweep_pareto(rows)
    with open(out / "pareto.csv", "w", newline="") as fp:
        writer = csv.writer(fp)
        writer.writerow(["patches_per_frame", "removal_window",
                         "patch_lifetime", "macs_total", "metric"])
        for p in front:
            writer.writerow([*p.label, p.x, p.y])

    knee = costsweep.knee_point(front) if len(front) >= 3 else None
    if knee is not None:
        kp = front[knee.index]
        flag = " (degenerate: collinear front)" if knee.degenerate else ""
        print(f"knee point: patches={kp.label[0]} removal_window={kp.label[1]} "
              f"patch_lifetime={kp.label[2]} macs={kp.x:.4g} metric={kp.y:.4g}{flag}")
        with open(out / "knee.json", "w") as fp:
            json.dump({"patches_per_frame": kp.label[0],
                       "removal_window": kp.label[1],
                       "patch_lifetime": kp.label[2],
                       "macs_total": kp.x, "metric": kp.y,
                       "distance": knee.distance,
                       "degenerate": knee.degenerate}, fp, indent=1)
    else:
        print(f"Pareto front has {len(front)} point(s); knee selection "
              f"needs at least 3")
    if not args.no_plot:
        from .plots import save_sweep_scatter
        save_sweep_scatter(rows, front, knee, out / "sweep.png")
    print(f"{len(rows)} cells -> {out / 'sweep.csv'}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="patchvo",
        description="Sparse patch-graph visual odometry for event cameras.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="track an event stream")
    p.add_argument("--events", required=True, help="event file (.csv or .bin)")
    p.add_argument("--config", required=True, help="config file or preset name")
    p.add_argument("--weights", required=True, help="weights directory or manifest")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score a trajectory against ground truth")
    p.add_argument("--est", help="estimated trajectory (TUM)")
    p.add_argument("--gt", required=True, help="ground-truth trajectory (TUM)")
    p.add_argument("--trim-head-m", type=float, default=0.0)
    p.add_argument("--trim-tail-m", type=float, default=0.0)
    p.add_argument("--runs-dir", help="directory of per-run trajectories; "
                                      "reports the median ATE")
    p.add_argument("--dataset", default="dataset", help="dataset label")
    p.add_argument("--out", default="eval_out", help="output directory")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cost", help="analytic cost report")
    p.add_argument("--config", required=True, help="config file or preset name")
    p.add_argument("--out", default=".", help="directory for cost_report.csv")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("sweep", help="hyperparameter sweep + Pareto/knee")
    p.add_argument("--grid", default="paper",
                   help="'paper' or 'n_patches=16:96:8;r_w=8,10;p_lt=8:13'")
    p.add_argument("--evaluator", choices=["cost", "pipeline"], default="cost")
    p.add_argument("--dataset", help="dataset dir (pipeline evaluator)")
    p.add_argument("--config", help="base config file or preset (default: tiny)")
    p.add_argument("--weights", help="weights for the pipeline evaluator")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--window-us", type=int, default=40000)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", action="store_true",
                   help="skip cells already in the progress CSV")
    p.add_argument("--no-plot", action="store_true")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except PatchVOError as exc:
        print(f"runtime fault: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
