"""Command line entry point: ``morlora <command> [options]``.

Exit status is 0 on success, 1 on failure and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import accounting, bench, plotting, rankops, verify
from .adapters import init_lora, init_moelora, init_mor
from .checkpoint import CheckpointError, read_checkpoint, write_checkpoint
from .config import ConfigError, RunConfig, parse_config
from .matcore import SplitMix64, rng_gaussian_matrix

log = logging.getLogger("morlora")

DEFAULT_ROWS = [("lora", 8, 1), ("lora", 16, 1), ("dora", 8, 1), ("moelora", 8, 2), ("mor", 8, 8)]


def _parse_proj(text: str) -> tuple[int, int]:
    try:
        d_in, d_out = (int(v) for v in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"projection must look like D_IN:D_OUT, got {text!r}")
    return d_in, d_out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="morlora", description="Mixture-of-Ranks adapter toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("verify", help="run every self-check suite")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("count-params", help="trainable-parameter table for a geometry")
    p.add_argument("--preset", choices=["llama7b"], default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--proj", type=_parse_proj, action="append", default=None,
                   help="adapted projection D_IN:D_OUT (repeatable)")
    p.add_argument("--method", choices=accounting.METHODS, action="append", default=None)
    p.add_argument("--r", type=int, default=8)
    p.add_argument("--experts", type=int, default=None,
                   help="expert count (default 8 for mor, 2 for moelora)")
    p.add_argument("--no-router", action="store_true", help="exclude router weights from the count")
    p.add_argument("--csv", action="store_true", help="plain CSV with raw integers")

    p = sub.add_parser("svd-curve", help="SVD truncation error curve as CSV")
    p.add_argument("--matrix", type=Path, default=None, help="CSV file holding the matrix")
    p.add_argument("--rows", type=int, default=8)
    p.add_argument("--cols", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None, help="write CSV here instead of stdout")
    p.add_argument("--plot", type=Path, default=None, help="write a PNG figure here")

    p = sub.add_parser("train", help="teacher-student benchmark run")
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--out", type=Path, default=None, help="overrides output_dir")
    p.add_argument("--no-plots", action="store_true")

    p = sub.add_parser("router-report", help="per-task router weight matrix from a checkpoint")
    p.add_argument("--run-dir", type=Path, default=None)
    p.add_argument("--checkpoint", type=Path, default=None)
    p.add_argument("--config", type=Path, default=None)
    p.add_argument("--n-per-task", type=int, default=256)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--no-plots", action="store_true")
    return parser


# -- commands ---------------------------------------------------------------------

def cmd_verify(args) -> int:
    results = verify.run_all(args.seed)
    for res in results:
        print(res.line())
    ok = all(r.passed for r in results)
    print(f"{sum(r.passed for r in results)}/{len(results)} suites passed")
    return 0 if ok else 1


def cmd_count_params(args) -> int:
    if args.proj:
        geo = accounting.Geometry(args.layers or 1, tuple(args.proj))
    else:
        geo = accounting.llama7b_geometry()
        if args.layers:
            geo = accounting.Geometry(args.layers, geo.projections)
    if args.method:
        specs = []
        for m in args.method:
            n = args.experts if args.experts is not None else {"mor": 8, "moelora": 2}.get(m, 1)
            specs.append(accounting.MethodSpec(m, args.r, n, not args.no_router))
    else:
        specs = [accounting.MethodSpec(m, r, n) for m, r, n in DEFAULT_ROWS]

    rows = [(s.label, accounting.count_params(s, geo)) for s in specs]
    if args.csv:
        w = csv.writer(sys.stdout)
        w.writerow(["method", "params", "megaparams"])
        for label, n in rows:
            w.writerow([label, n, f"{n / 1e6:.1f}"])
        return 0
    width = max(len(label) for label, _ in rows)
    print(f"{'method':<{width}}  {'params':>14}  {'M':>7}")
    for label, n in rows:
        print(f"{label:<{width}}  {n:>14,}  {n / 1e6:>6.1f}M")
    return 0


def cmd_svd_curve(args) -> int:
    if args.matrix:
        M = np.loadtxt(args.matrix, delimiter=",", ndmin=2)
    else:
        M = rng_gaussian_matrix(SplitMix64(args.seed), args.rows, args.cols)
    curve = rankops.truncation_curve(M)
    sv = list(curve.singular_values) + [float("nan")]
    lines = ["rank,error,next_singular_value"]
    lines += [f"{r},{e!r},{s!r}" for (r, e), s in zip(curve.rows(), sv)]
    text = "\n".join(lines) + "\n"
    if args.out:
        args.out.write_text(text)
    else:
        sys.stdout.write(text)
    if args.plot:
        plotting.plot_truncation_curve(curve.ranks, curve.errors, args.plot)
    return 0


def build_student(cfg: RunConfig, teacher: bench.TeacherSpec):
    rng = SplitMix64(cfg.seed).spawn()
    if cfg.method == "lora":
        return init_lora(teacher.W, cfg.r, cfg.alpha, rng)
    if cfg.method == "moelora":
        return init_moelora(teacher.W, cfg.r, cfg.n_experts, cfg.alpha, rng)
    return init_mor(teacher.W, cfg.r, cfg.n_experts, cfg.alpha, rng, cfg.router_kind())


def build_teacher(cfg: RunConfig) -> bench.TeacherSpec:
    return bench.make_teacher(cfg.d_in, cfg.d_out, cfg.r, cfg.n_tasks, cfg.tag_width,
                              cfg.teacher_seed_value, cfg.alpha)


def run_training(cfg: RunConfig, out_dir: Path, plots: bool = True) -> bench.TrainReport:
    teacher = build_teacher(cfg)
    student = build_student(cfg, teacher)
    report = bench.train_student(teacher, student, cfg.train_config())
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    report.write(out_dir)
    write_checkpoint(student, out_dir / "checkpoint.mor")
    if plots:
        plotting.plot_loss_curve(report.log_steps, report.losses, out_dir / "loss_curve.png")
        plotting.plot_eval_curve(report.eval_steps, report.eval_errors, out_dir / "eval_curve.png")
        if report.router_mass is not None:
            plotting.plot_router_mass(report.router_mass, out_dir / "router_mass.png")
    return report


def cmd_train(args) -> int:
    cfg = parse_config(args.config) if args.config else RunConfig()
    out_dir = args.out or Path(cfg.output_dir)
    report = run_training(cfg, out_dir, plots=not args.no_plots)
    print(f"trained {cfg.method} ({report.n_trainable} trainable params) for {cfg.steps} steps")
    for k, e in enumerate(report.task_errors):
        print(f"task {k}: relative error {e:.4f}")
    print(f"mean relative error {report.mean_task_error:.4f}; reports in {out_dir}")
    return 0


def cmd_router_report(args) -> int:
    if args.run_dir:
        ckpt = args.checkpoint or args.run_dir / "checkpoint.mor"
        cfg_path = args.config or args.run_dir / "config.json"
    else:
        if not (args.checkpoint and args.config):
            print("router-report needs --run-dir or both --checkpoint and --config", file=sys.stderr)
            return 2
        ckpt, cfg_path = args.checkpoint, args.config
    cfg = parse_config(cfg_path)
    teacher = build_teacher(cfg)
    student = read_checkpoint(ckpt, teacher.W, cfg.router_kind())
    mass = bench.router_report(student, teacher, args.n_per_task, SplitMix64(args.seed))
    out_dir = args.out or args.run_dir or Path(".")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "router_report.json").write_text(json.dumps({"router_mass": mass.tolist()}, indent=2))
    with open(out_dir / "router_report.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["task"] + [f"expert{i}" for i in range(mass.shape[1])])
        for k, row in enumerate(mass):
            w.writerow([k] + [repr(float(v)) for v in row])
    if not args.no_plots:
        plotting.plot_router_mass(mass, out_dir / "router_report.png")
    for k, row in enumerate(mass):
        print(f"task {k}: " + " ".join(f"{v:.3f}" for v in row))
    return 0


COMMANDS = {
    "verify": cmd_verify,
    "count-params": cmd_count_params,
    "svd-curve": cmd_svd_curve,
    "train": cmd_train,
    "router-report": cmd_router_report,
}


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    if not args.command:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CheckpointError, bench.TrainingDiverged, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_command())
