"""Command-line front end.

    fdehbo run <config> [--output DIR] [--seeds S1,S2,...] [--threads N]
    fdehbo validate <config>
    fdehbo audit-fd <config>

``run`` writes, per seed, ``run_<seed>.csv`` (one row per iteration), then
``summary.csv`` (per-iteration quartiles across seeds) and ``meta.json``
(config echo, versions, timestamps, per-seed status). Exit status: 0 when
every run finished, 1 on divergence or audit violations, 2 on configuration
errors, 3 on I/O failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import scipy

from . import __version__
from .analysis import fd_bound_audit
from .config import OUTPUT_ENV, RunConfig, build_problem, dump_config, load_config, resolve_schedule
from .errors import BilevelError, ConfigError, DivergenceError, UnsupportedCapabilityError
from .optimizers import IterationRecord, run

__all__ = ["execute", "main", "format_value", "write_run_csv", "summarize"]

log = logging.getLogger(__name__)

EXIT_OK, EXIT_DIVERGED, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3

COLUMNS = IterationRecord.columns()
SUMMARY_STATS = ("q1", "median", "q3")


def format_value(value) -> str:
    """CSV cell: integers verbatim, floats with 17 significant digits, missing as empty."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


def _write_rows(path: Path, header: Sequence[str], rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([format_value(v) for v in row])


def write_run_csv(path: Path, records: Sequence[IterationRecord]) -> None:
    _write_rows(path, COLUMNS, (rec.as_row() for rec in records))


def summarize(runs: Dict[int, List[IterationRecord]]) -> List[list]:
    """Per-iteration first quartile, median and third quartile of every metric across seeds."""
    by_t: Dict[int, List[IterationRecord]] = {}
    for records in runs.values():
        for rec in records:
            by_t.setdefault(rec.t, []).append(rec)
    rows = []
    for t in sorted(by_t):
        recs = by_t[t]
        row = [t, len(recs)]
        for rec_rows in zip(*(r.as_row()[1:] for r in recs)):
            vals = [v for v in rec_rows if v is not None]
            if vals:
                row.extend(np.percentile(vals, [25, 50, 75]).tolist())
            else:
                row.extend([None] * len(SUMMARY_STATS))
        rows.append(row)
    return rows


def summary_columns() -> List[str]:
    return ["t", "n_seeds"] + [f"{c}_{s}" for c in COLUMNS[1:] for s in SUMMARY_STATS]


def _run_seed(config: RunConfig, oracle, params, seed: int) -> dict:
    try:
        result = run(config.algorithm, oracle, params, seed=seed, diag_every=config.diag_every,
                     batch=config.batch)
    except DivergenceError as exc:
        return {"seed": seed, "status": "diverged", "message": str(exc), "iteration": exc.iteration,
                "records": exc.records, "final": {}}
    return {"seed": seed, "status": "ok", "records": result.records, "final": result.final}


def execute(config: RunConfig, threads: int = 1, stream=None) -> int:
    """Run every seed of ``config`` and write the CSV outputs; returns the exit status."""
    stream = sys.stdout if stream is None else stream
    started = datetime.now(timezone.utc)
    try:
        oracle = build_problem(config.problem)
        params = resolve_schedule(config.schedule, oracle)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if config.algorithm == "FMBO" and not oracle.has_second_order:
        print(f"error: algorithm: FMBO needs second-order products; {oracle.name} has none", file=sys.stderr)
        return EXIT_CONFIG

    out = Path(config.resolved_output_dir())
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create output directory {out}: {exc}", file=sys.stderr)
        return EXIT_IO

    t0 = time.perf_counter()
    if threads > 1 and len(config.seeds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(lambda s: _run_seed(config, oracle, params, s), config.seeds))
    else:
        results = [_run_seed(config, oracle, params, s) for s in config.seeds]
    elapsed = time.perf_counter() - t0

    try:
        for res in results:
            write_run_csv(out / f"run_{res['seed']}.csv", res["records"])
        _write_rows(out / "summary.csv", summary_columns(),
                    summarize({res["seed"]: res["records"] for res in results}))
        meta = {
            "config": dump_config(config),
            "schedule": asdict(params),
            "problem": oracle.name,
            "versions": {"fdehbo": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                         "python": platform.python_version()},
            "started": started.isoformat(),
            "finished": datetime.now(timezone.utc).isoformat(),
            "elapsed_seconds": elapsed,
            "threads": threads,
            "runs": [{k: v for k, v in res.items() if k != "records"} | {"iterations": len(res["records"])}
                     for res in results],
        }
        (out / "meta.json").write_text(json.dumps(meta, indent=2, default=_json_default) + "\n",
                                       encoding="utf-8")
    except OSError as exc:
        print(f"error: writing results to {out} failed: {exc}", file=sys.stderr)
        return EXIT_IO

    _report(config, results, out, elapsed, stream)
    return EXIT_OK if all(r["status"] == "ok" for r in results) else EXIT_DIVERGED


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _report(config: RunConfig, results, out: Path, elapsed: float, stream) -> None:
    print(f"{config.algorithm} on {config.problem.kind}: {len(results)} seed(s), "
          f"T={config.schedule.T}, {elapsed:.2f}s -> {out}", file=stream)
    for res in results:
        if res["status"] != "ok":
            print(f"  seed {res['seed']}: DIVERGED at iteration {res['iteration']}: {res['message']}", file=stream)
    finals = [r["final"] for r in results if r["status"] == "ok"]
    for key in ("outer_loss", "grad_phi_norm_sq", "err_y", "err_v"):
        vals = [f[key] for f in finals if key in f]
        if vals:
            print(f"  final {key}: median {np.median(vals):.6g} (min {min(vals):.6g}, max {max(vals):.6g})",
                  file=stream)


def _audit(config: RunConfig, stream) -> int:
    oracle = build_problem(config.problem)
    a = config.audit
    try:
        report = fd_bound_audit(oracle, n_trials=a.n_trials, delta_grid=a.deltas, r_v=a.r_v, seed=a.seed)
    except UnsupportedCapabilityError as exc:
        print(f"error: audit-fd: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    rows = list(report.rows())
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(list(rows[0]))
    for row in rows:
        writer.writerow([format_value(v) for v in row.values()])
    print(f"# violations: {report.violations}; monotonicity violations: {report.monotone_violations}",
          file=stream)
    return EXIT_OK if report.violations == 0 else EXIT_DIVERGED


def _parse_seeds(text: str) -> tuple:
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds or any(s < 0 for s in seeds) or len(set(seeds)) != len(seeds):
        raise argparse.ArgumentTypeError("seeds must be distinct nonnegative integers")
    return seeds


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        value = 0
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {text!r}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fdehbo", description="Hessian/Jacobian-free bilevel optimization runs.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log warnings and progress")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="execute all seeds of a config and write CSV metrics")
    p_run.add_argument("config")
    p_run.add_argument("--output", help=f"output directory (default: config output_dir, ${OUTPUT_ENV}, "
                                        "or ./fdehbo-runs)")
    p_run.add_argument("--seeds", type=_parse_seeds, help="comma-separated seeds overriding the config")
    p_run.add_argument("--threads", type=_positive_int, default=1, help="parallel worker slots")
    p_val = sub.add_parser("validate", help="parse and validate a config without running it")
    p_val.add_argument("config")
    p_aud = sub.add_parser("audit-fd", help="audit finite-difference error bounds on the configured problem")
    p_aud.add_argument("config")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        config = load_config(args.config)
    except OSError as exc:
        print(f"error: cannot read {args.config}: {exc}", file=sys.stderr)
        return EXIT_IO
    except ConfigError as exc:
        print(f"error: {args.config}: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "validate":
        try:
            oracle = build_problem(config.problem)
            params = resolve_schedule(config.schedule, oracle)
        except ConfigError as exc:
            print(f"error: {args.config}: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"ok: {config.algorithm} on {oracle.name} (p={oracle.p}, q={oracle.q}), "
              f"T={params.T}, {len(config.seeds)} seed(s)")
        return EXIT_OK
    if args.command == "audit-fd":
        try:
            return _audit(config, sys.stdout)
        except ConfigError as exc:
            print(f"error: {args.config}: {exc}", file=sys.stderr)
            return EXIT_CONFIG

    if args.output:
        config = replace(config, output_dir=args.output)
    if args.seeds:
        config = replace(config, seeds=args.seeds)
    try:
        return execute(config, threads=args.threads)
    except BilevelError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
