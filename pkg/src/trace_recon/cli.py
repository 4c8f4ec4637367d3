"""Command line: ``trace run``, ``trace verify theorems`` and ``trace sweep``.

Exit codes: 0 success, 1 runtime failure (divergence, failed certificate),
2 invalid arguments.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .autograd import Tensor
from .engine import Schedules, TraceConfig, TraceDivergence, run_trace
from .fileio import read_f32, read_image, write_f32, write_image, write_trace_csv
from .network import ArchConfig
from .prox_oracle import certificates_csv, certify_all
from .tasks import TASK_KINDS, TaskSpec, degrade, make_operator, piecewise_smooth, shepp_logan

logger = logging.getLogger("trace_recon")

SYNTHETIC = {"shepp": lambda n, c: shepp_logan(n), "smooth": piecewise_smooth}


class UsageError(ValueError):
    """Bad user input detected after argument parsing (exit code 2)."""


def budget_pairs(budget: int, Ts) -> list[tuple[int, int]]:
    """``(T, K)`` pairs with ``T*K == budget``."""
    pairs = []
    for T in Ts:
        if T <= 0 or budget % T:
            raise UsageError(f"budget {budget} is not divisible by T={T}")
        pairs.append((T, budget // T))
    return pairs


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ------------------------------------------------------------------ problems


def _load_problem(inp: dict, task: TaskSpec):
    """Return ``(y, op, ground_truth, image_shape)`` from a manifest input block."""
    if inp.get("measurement"):
        y = read_f32(inp["measurement"])
        shape = tuple(inp["image_shape"])
        op = make_operator(task, shape)
        return Tensor(y), op, None, shape
    if inp.get("path"):
        path = Path(inp["path"])
        if inp.get("sha256") and _sha256(path) != inp["sha256"]:
            raise UsageError(f"{path} changed since the manifest was written")
        x = read_image(path)
    else:
        syn = inp["synthetic"]
        x = SYNTHETIC[syn["name"]](syn["size"], syn["channels"])
    y, op = degrade(task, x)
    return y, op, x, x.shape


def _measurement_shape(task: str, y_shape, size):
    c, h, w = y_shape
    if task in ("sr2", "sr4"):
        f = 2 if task == "sr2" else 4
        return (c, h * f, w * f)
    if task.startswith("ct_"):
        if size is None:
            raise UsageError("--size is required for CT measurements")
        return (1, size, size)
    return (c, h, w)


def _manifest_from_args(args) -> dict:
    if args.input and args.measurement:
        raise UsageError("--input and --measurement are mutually exclusive")
    inp: dict = {"path": None, "sha256": None, "synthetic": None, "measurement": None, "image_shape": None}
    if args.measurement:
        path = Path(args.measurement).resolve()
        y = read_f32(path)
        inp.update(measurement=str(path), image_shape=list(_measurement_shape(args.task, y.shape, args.size)))
        channels = y.shape[0]
    elif args.input:
        path = Path(args.input).resolve()
        inp.update(path=str(path), sha256=_sha256(path))
        channels = read_image(path).shape[0]
    else:
        channels = 1 if args.synthetic == "shepp" else args.channels
        inp["synthetic"] = {"name": args.synthetic, "size": args.size or 64, "channels": channels}
    config = TraceConfig(
        schedules=Schedules(
            T=args.T, K=args.K, lr=args.lr, beta_hi=args.beta_hi, beta_lo=args.beta_lo,
            beta_start=args.beta_start, beta_end=args.beta_end, eta=args.eta,
        ),
        arch=ArchConfig(depth=args.depth, width=args.width, in_channels=channels, out_channels=channels),
        seed=args.seed,
        disable_coupling=args.no_coupling,
        disable_perturbation=args.no_perturb,
        disable_inheritance=args.no_inherit,
        snapshot_every=args.snapshot_every,
    )
    return {
        "tool": "trace-recon",
        "version": __version__,
        "task": {"kind": args.task, "seed": args.seed, "params": {}},
        "config": config.to_dict(),
        "input": inp,
    }


def execute_manifest(manifest: dict, out: Path, save_states: bool = True):
    """Run one reconstruction and write recon, trace.csv, states and manifest."""
    task = TaskSpec(**manifest["task"])
    config = TraceConfig.from_dict(manifest["config"])
    y, op, gt, shape = _load_problem(manifest["input"], task)
    out.mkdir(parents=True, exist_ok=True)
    record = run_trace(config, y, op, gt, shape=shape)
    suffix = ".pgm" if shape[0] == 1 else ".ppm"
    write_image(out / f"recon{suffix}", record.x0)
    write_f32(out / "recon.f32", record.x0)
    write_trace_csv(out / "trace.csv", record)
    if save_states:
        states = out / "states"
        states.mkdir(exist_ok=True)
        for t, x in sorted(record.states.items()):
            write_f32(states / f"x_{t:04d}.f32", x)
    manifest = dict(manifest, output=str(out.resolve()))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return record


# ------------------------------------------------------------------ commands


def cmd_run(args) -> int:
    if args.manifest:
        manifest = json.loads(Path(args.manifest).read_text())
    else:
        if not args.task:
            raise UsageError("--task is required unless --manifest is given")
        manifest = _manifest_from_args(args)
    record = execute_manifest(manifest, Path(args.out), save_states=not args.no_states)
    last = record.steps[-1]
    print(f"x_0 written to {args.out}; psnr={last.psnr:.3f} ssim={last.ssim:.4f} steps={record.optimizer_steps}")
    return 0


def cmd_verify(args) -> int:
    scale = -1.0 if args.force_fail else 1.0
    certs = certify_all(args.n, args.trials, args.seed, tolerance_scale=scale)
    table = certificates_csv(certs)
    if args.out:
        Path(args.out).write_text(table)
    else:
        sys.stdout.write(table)
    failed = [c for c in certs if not c.passed]
    if failed:
        c = failed[0]
        print(f"FAIL {c.instance}: {c.bound}: lhs={c.lhs:.6e} rhs={c.rhs:.6e}", file=sys.stderr)
        return 1
    print(f"all {len(certs)} certificates passed", file=sys.stderr)
    return 0


def _parse_beta_pair(text: str) -> tuple[float, float]:
    try:
        hi, lo = (float(v) for v in text.split(":"))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected HI:LO, got {text!r}") from exc
    return hi, lo


def cmd_sweep(args) -> int:
    base = _manifest_from_args(args)
    configs = []
    if args.budget is not None:
        for T, K in budget_pairs(args.budget, args.T_list or [10, 20, 30, 40, 50, 60]):
            configs.append((f"T{T}_K{K}", {"T": T, "K": K}))
    for hi, lo in args.betas or []:
        configs.append((f"beta_{hi:g}_{lo:g}", {"beta_hi": hi, "beta_lo": lo}))
    if not configs:
        raise UsageError("give --budget and/or --betas")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for name, overrides in configs:
        manifest = json.loads(json.dumps(base))
        manifest["config"]["schedules"].update(overrides)
        record = execute_manifest(manifest, out / name, save_states=False)
        sch = manifest["config"]["schedules"]
        last = record.steps[-1]
        rows.append([name, sch["T"], sch["K"], "%.8e" % sch["beta_hi"], "%.8e" % sch["beta_lo"],
                     "%.8e" % last.psnr, "%.8e" % last.ssim, "%.8e" % float(np.mean(record.deltas()))])
    with open(out / "sweep.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["config", "T", "K", "beta_hi", "beta_lo", "psnr", "ssim", "mean_delta"])
        writer.writerows(rows)
    print(f"{len(rows)} configurations written to {out / 'sweep.csv'}")
    return 0


# ------------------------------------------------------------------- parsing


def _add_problem_args(p: argparse.ArgumentParser, task_required: bool) -> None:
    p.add_argument("--task", choices=TASK_KINDS, required=task_required)
    p.add_argument("--input", help="ground-truth image (PGM, PPM or F32)")
    p.add_argument("--measurement", help="measurement y as F32; no ground truth, metrics are nan")
    p.add_argument("--synthetic", choices=sorted(SYNTHETIC), default="smooth",
                   help="built-in ground truth used when neither --input nor --measurement is given")
    p.add_argument("--size", type=int, help="side of the synthetic image / CT image (default 64)")
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--T", type=int, default=40)
    p.add_argument("--K", type=int, default=150)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--beta-hi", type=float, default=5e-3)
    p.add_argument("--beta-lo", type=float, default=5e-4)
    p.add_argument("--beta-start", type=float, default=1e-4)
    p.add_argument("--beta-end", type=float, default=1e-2)
    p.add_argument("--eta", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--no-coupling", action="store_true")
    p.add_argument("--no-perturb", action="store_true")
    p.add_argument("--no-inherit", action="store_true")
    p.add_argument("--snapshot-every", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trace", description="Trajectory-constrained reconstruction")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="reconstruct one image")
    _add_problem_args(run, task_required=False)
    run.add_argument("--manifest", help="re-run exactly from a manifest.json")
    run.add_argument("--no-states", action="store_true", help="do not write per-step F32 states")
    run.set_defaults(func=cmd_run)

    verify = sub.add_parser("verify", help="numerical certificates")
    vsub = verify.add_subparsers(dest="what", required=True)
    theorems = vsub.add_parser("theorems", help="proximal stability certificates")
    theorems.add_argument("--n", type=int, default=16)
    theorems.add_argument("--trials", type=int, default=100)
    theorems.add_argument("--seed", type=int, default=0)
    theorems.add_argument("--out", help="write the CSV table here instead of stdout")
    theorems.add_argument("--force-fail", action="store_true", help=argparse.SUPPRESS)
    theorems.set_defaults(func=cmd_verify)

    sweep = sub.add_parser("sweep", help="fixed-budget T/K or coupling-schedule sweeps")
    _add_problem_args(sweep, task_required=True)
    sweep.add_argument("--budget", type=int, help="total inner steps N = T*K")
    sweep.add_argument("--T-list", type=int, nargs="+", dest="T_list")
    sweep.add_argument("--betas", type=_parse_beta_pair, nargs="+", help="coupling schedules as HI:LO")
    sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"trace: error: {exc}", file=sys.stderr)
        return 2
    except TraceDivergence as exc:
        print(f"trace: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"trace: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
