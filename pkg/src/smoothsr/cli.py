"""Command-line front end: ``smoothsr gen-data | optimize | fla | decode``.

Exit codes: 0 success, 2 validation error, 3 runtime or numerical failure.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .encoding import ConfigError, StructureError, TreeConfig, build_layout, decode
from .fla import fla_battery, parse_manipulator, write_report_csv, write_walk_csv
from .objective import Dataset, gen_poly10, load_problem_config
from .optimize import CMAESError, OptimizerConfig, run_experiment, write_json

log = logging.getLogger("smoothsr")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3


class UsageError(Exception):
    """Bad flags or inputs detected before any work is done."""


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _threads(value) -> int:
    if value is None:
        value = os.environ.get("SMOOTHSR_THREADS") or os.cpu_count() or 1
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"--threads must be an integer, got {value!r}") from None
    if n < 1:
        raise UsageError("--threads must be >= 1")
    return n


def _manifest(args, **extra) -> dict:
    flags = {k: v for k, v in vars(args).items() if k not in ("func",)}
    return {
        "tool": "smoothsr",
        "version": __version__,
        "command": args.command,
        "flags": flags,
        "created": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        **extra,
    }


def _prepare_dir(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists():
        if not force:
            raise UsageError(f"output directory {out} exists; pass --force to overwrite")
        if out.is_dir():
            shutil.rmtree(out)
        else:
            out.unlink()
    return out


def _load_inputs(args):
    inputs = {}
    dataset = None
    if args.data:
        if not Path(args.data).is_file():
            raise UsageError(f"data file {args.data} not found")
        dataset = Dataset.from_csv(args.data)
        inputs[str(args.data)] = _sha256(args.data)
    if args.config:
        if not Path(args.config).is_file():
            raise UsageError(f"config file {args.config} not found")
        inputs[str(args.config)] = _sha256(args.config)
        config = args.config
    else:
        config = {}
    problem, echo = load_problem_config(config, dataset)
    return problem, echo, inputs


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    if out.exists() and not args.force:
        raise UsageError(f"{out} exists; pass --force to overwrite")
    inputs = {}
    if args.problem == "poly10":
        data = gen_poly10(args.rows, args.seed, tuple(args.range))
    else:
        if not args.source or not Path(args.source).is_file():
            raise UsageError("--problem csv needs an existing --source file")
        data = Dataset.from_csv(args.source)
        inputs[args.source] = _sha256(args.source)
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True)
    data.to_csv(out)
    manifest = _manifest(args, inputs=inputs, rows=data.num_rows, columns=data.num_vars + 1,
                         sha256=_sha256(out))
    write_json(out.with_name(out.stem + ".manifest.json"), manifest)
    log.info("wrote %d rows to %s", data.num_rows, out)
    return EXIT_OK


def cmd_optimize(args) -> int:
    threads = _threads(args.threads)
    if not 0 < args.threshold < 1:
        raise UsageError("--threshold must lie in (0, 1)")
    problem, echo, inputs = _load_inputs(args)
    opt_doc = {}
    if args.opt:
        if not Path(args.opt).is_file():
            raise UsageError(f"optimizer config {args.opt} not found")
        opt_doc = json.loads(Path(args.opt).read_text(encoding="utf-8"))
        inputs[str(args.opt)] = _sha256(args.opt)
    if args.max_evals is not None:
        opt_doc["max_evals"] = args.max_evals
    if args.seed is not None:
        opt_doc["seed"] = args.seed
    opt = OptimizerConfig.from_dict(opt_doc).resolved(problem.dimension)
    out = _prepare_dir(args.out, args.force)
    trace = run_experiment(problem, opt, out_dir=out, threads=threads, var_threshold=args.threshold,
                           trace_evaluations=args.trace_evaluations,
                           manifest={**_manifest(args, inputs=inputs), "problem": echo})
    best = trace.best
    print(f"best total {best.total:.6g} (R^2 {best.r_squared:.6g}) after {trace.evaluations} evaluations")
    print(trace.formula)
    return EXIT_OK


def cmd_fla(args) -> int:
    threads = _threads(args.threads)
    names = [n for n in args.manipulators.split(",") if n.strip()]
    if not names:
        raise UsageError("--manipulators is empty")
    domain = None if args.no_domain else tuple(args.domain)
    manips = [parse_manipulator(n, args.max_manipulation, tuple(args.domain)) for n in names]
    if args.walk_length < 10:
        raise UsageError("--walk-length must be >= 10")
    if args.reps < 0 or args.neighbors < 1 or args.max_steps < 1 or args.epsilon < 0:
        raise UsageError("--reps >= 0, --neighbors >= 1, --max-steps >= 1 and --epsilon >= 0 are required")
    problem, echo, inputs = _load_inputs(args)
    out = _prepare_dir(args.out, args.force)
    reports = fla_battery(problem, manips, args.walk_length, args.reps, args.seed, neighbors=args.neighbors,
                          max_steps=args.max_steps, epsilon=args.epsilon,
                          lambdas=(args.lambda_op, args.lambda_var), domain=domain, threads=threads)
    out.mkdir(parents=True)
    write_report_csv(reports, out / "report.csv")
    if args.keep_traces:
        tdir = out / "traces"
        tdir.mkdir()
        for rep in reports:
            name = rep.manipulator.name
            write_walk_csv(rep.walks["random"], tdir / f"{name}_random.csv")
            for kind in ("up", "down"):
                for i, w in enumerate(rep.walks[kind]):
                    write_walk_csv(w, tdir / f"{name}_{kind}_{i:03d}.csv")
    write_json(out / "manifest.json", _manifest(
        args, inputs=inputs, problem=echo, reports=[r.summary() for r in reports],
        seeding="numpy SeedSequence([seed, manipulator_index, walk_kind(0=random,1=up,2=down), repetition])"))
    with open(out / "report.csv", encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    return EXIT_OK


def cmd_decode(args) -> int:
    if not 0 < args.threshold < 1:
        raise UsageError("--threshold must lie in (0, 1)")
    try:
        doc = json.loads(Path(args.genotype).read_text(encoding="utf-8"))
        lay = doc["layout"]
        layout = build_layout(TreeConfig(lay["depth"], lay["num_vars"], tuple(lay["operators"]), lay["leaf_mode"]))
        g = np.asarray(doc["genotype"], dtype=float)
        if g.ndim != 1 or not np.isfinite(g).all():
            raise ConfigError("genotype must be a flat list of finite numbers")
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"cannot read genotype file {args.genotype}: {exc}") from None
    tree = decode(g, layout, args.threshold)
    for w in tree.warnings:
        log.warning(w)
    print(tree.render())
    return EXIT_OK


def _range(text: str):
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'lo,hi', got {text!r}") from None
    return lo, hi


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smoothsr", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"smoothsr {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a benchmark dataset as CSV")
    g.add_argument("--problem", choices=("poly10", "csv"), default="poly10")
    g.add_argument("--rows", type=int, default=500)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--range", type=_range, default=(-1.0, 1.0), metavar="LO,HI")
    g.add_argument("--source", help="input CSV for --problem csv")
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen_data)

    def problem_flags(q):
        q.add_argument("--config", help="problem JSON (depth, operators, leaf_mode, penalty, data)")
        q.add_argument("--data", help="dataset CSV (overrides the config's data source)")
        q.add_argument("--out", required=True)
        q.add_argument("--threads", help="worker threads (default: $SMOOTHSR_THREADS or CPU count)")
        q.add_argument("--force", action="store_true")

    o = sub.add_parser("optimize", help="run CMA-ES with the staged penalty schedule")
    problem_flags(o)
    o.add_argument("--opt", help="optimizer JSON (sigma0, popsize, max_evals, target, seed)")
    o.add_argument("--max-evals", type=int)
    o.add_argument("--seed", type=int)
    o.add_argument("--threshold", type=float, default=0.05, help="variable-share threshold for decoding")
    o.add_argument("--trace-evaluations", action="store_true", help="also write evaluations.csv")
    o.set_defaults(func=cmd_optimize)

    f = sub.add_parser("fla", help="fitness landscape analysis battery")
    problem_flags(f)
    f.add_argument("--manipulators", default="poly-1-15,poly-all-15,poly-1-2,poly-all-2,uni-1")
    f.add_argument("--walk-length", type=int, default=10_000)
    f.add_argument("--reps", type=int, default=100)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--neighbors", type=int, default=100)
    f.add_argument("--max-steps", type=int, default=200)
    f.add_argument("--epsilon", type=float, default=0.0)
    f.add_argument("--lambda-op", type=float, default=0.0)
    f.add_argument("--lambda-var", type=float, default=0.0)
    f.add_argument("--max-manipulation", type=float, default=1.0)
    f.add_argument("--domain", type=_range, default=(-3.0, 3.0), metavar="LO,HI",
                   help="search box for walks; also the uniform manipulator's range")
    f.add_argument("--no-domain", action="store_true", help="let walks leave the box")
    f.add_argument("--keep-traces", action="store_true")
    f.set_defaults(func=cmd_fla)

    d = sub.add_parser("decode", help="print the crisp formula of a genotype file")
    d.add_argument("--genotype", required=True)
    d.add_argument("--threshold", type=float, default=0.05)
    d.set_defaults(func=cmd_decode)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, StructureError, ValueError) as exc:
        print(f"smoothsr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (CMAESError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"smoothsr {args.command}: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"smoothsr {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
