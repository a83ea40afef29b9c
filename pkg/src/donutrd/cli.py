"""Command line interface: ``donutrd {estimate,test,constants,simulate}``.

Exit codes: 0 success, 2 configuration or usage error, 3 statistical
degeneracy (insufficient support, degenerate test, ...), 4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .errors import ConfigError, DonutRDError, EstimationError, InsufficientDataError, SchemaError
from .inference import ci_length_ratio, estimate
from .kernels import KERNELS, get_kernel, kernel_constants
from .montecarlo import DEFAULT_L_GRID, DgpSpec, StudyResult, default_workers, run_study
from .rd import DesignSpec, Sample, nn_variance, select_bandwidth
from .spectests import delta_test, gamma_test

log = logging.getLogger("donutrd")

EXIT_OK, EXIT_CONFIG, EXIT_STAT, EXIT_IO = 0, 2, 3, 4


def parse_csv(path, cutoff: float = 0.0):
    """Read a CSV with columns ``x`` and ``y``; return ``(sample, info)``.

    ``x`` is shifted by ``cutoff``. Row numbers in error messages count data
    rows from 1 (the header is not counted).
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        reader.fieldnames = header
        for col in ("x", "y"):
            if col not in header:
                raise SchemaError(f"missing required column {col!r} in {path}")
        if "weight" in header:
            log.warning("column 'weight' is ignored")
        xs, ys = [], []
        for i, row in enumerate(reader, start=1):
            vals = []
            for col in ("x", "y"):
                raw = (row.get(col) or "").strip()
                try:
                    v = float(raw)
                except ValueError:
                    raise SchemaError(
                        f"row {i}: column {col!r} is missing or non-numeric ({raw!r})"
                    ) from None
                if not math.isfinite(v):
                    raise SchemaError(f"row {i}: column {col!r} is not finite ({raw!r})")
                vals.append(v)
            xs.append(vals[0] - cutoff)
            ys.append(vals[1])
    if len(xs) < 4:
        raise InsufficientDataError(f"need at least 4 valid rows, found {len(xs)}")
    info = {"path": str(path), "rows": len(xs), "cutoff": cutoff,
            "weight_ignored": "weight" in header}
    return Sample(np.array(xs), np.array(ys)), info


def _common(p: argparse.ArgumentParser):
    p.add_argument("--data", required=True, help="CSV file with columns x,y")
    p.add_argument("--cutoff", type=float, default=0.0)
    p.add_argument("--bandwidth", type=float, default=None,
                   help="bandwidth h (selected by worst-case MSE when omitted)")
    p.add_argument("--donut", type=float, default=0.0, help="donut radius d")
    p.add_argument("--kernel", choices=sorted(KERNELS), default="triangular")
    p.add_argument("--M", type=float, required=True, dest="M",
                   help="bound on the second derivative of the regression function")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--nn-j", type=int, default=3, dest="nn_j")
    p.add_argument("--share-bandwidth", action="store_true",
                   help="select h for the conventional estimator and reuse it")


def _config(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _check_design(args):
    if args.M < 0:
        raise ConfigError("--M must be nonnegative")
    if args.donut < 0:
        raise ConfigError("--donut must be nonnegative")
    if args.bandwidth is not None:
        if args.bandwidth <= 0:
            raise ConfigError("--bandwidth must be positive")
        if args.donut >= args.bandwidth:
            raise ConfigError(
                f"donut radius must satisfy d < h (d={args.donut}, h={args.bandwidth})"
            )
    elif args.M <= 0:
        raise ConfigError("bandwidth selection needs --M > 0; pass --bandwidth otherwise")
    if not 0 < args.alpha < 1:
        raise ConfigError("--alpha must lie in (0, 1)")


def cmd_estimate(args) -> dict:
    _check_design(args)
    sample, info = parse_csv(args.data, args.cutoff)
    rep = estimate(sample, args.M, args.donut, args.bandwidth, args.kernel, args.alpha,
                   J=args.nn_j, share_bandwidth=args.share_bandwidth)
    return {**rep.to_dict(), "data": info, "config": _config(args)}


def cmd_test(args) -> dict:
    _check_design(args)
    sample, info = parse_csv(args.data, args.cutoff)
    sigma2 = nn_variance(sample, args.nn_j)
    h = args.bandwidth
    if h is None:
        d_sel = 0.0 if args.share_bandwidth else args.donut
        h = select_bandwidth(sample, args.M, d_sel, args.kernel, sigma2=sigma2)
    spec = DesignSpec(h, args.donut, args.kernel, args.M)
    test = delta_test if args.method == "delta" else gamma_test
    res = test(sample, spec, args.alpha, sigma2=sigma2)
    return {**res.to_dict(), "bandwidth_selected": args.bandwidth is None,
            "data": info, "config": _config(args)}


def constants_rows(kernel, grid, alpha=0.05):
    k = get_kernel(kernel)
    base = kernel_constants(k, 0.0)
    rows = []
    for c in grid:
        kc = kernel_constants(k, c)
        rows.append((kc.c, kc.B, kc.S, kc.S_tilde, kc.B / base.B, kc.S / base.S,
                     ci_length_ratio(k, c, alpha)))
    return rows


def cmd_constants(args, out=None) -> None:
    if args.c_steps < 1:
        raise ConfigError("--c-steps must be at least 1")
    if not (0 <= args.c_from <= args.c_to < 1):
        raise ConfigError("need 0 <= --c-from <= --c-to < 1")
    grid = np.linspace(args.c_from, args.c_to, args.c_steps) if args.c_steps > 1 else [args.c_from]
    out = out or sys.stdout
    out.write(f"# kernel={args.kernel} alpha={args.alpha} c_from={args.c_from} "
              f"c_to={args.c_to} c_steps={args.c_steps}\n")
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["c", "B", "S", "S_tilde", "B_ratio", "S_ratio", "ci_length_ratio"])
    for row in constants_rows(args.kernel, grid, args.alpha):
        w.writerow([f"{v:.12g}" for v in row])


TABLE_COLUMNS = {
    "table1": ["L", "bias_regular", "bias_donut", "sd_regular", "sd_donut",
               "rmse_regular", "rmse_donut"],
    "table2": ["L", "coverage_regular", "coverage_donut", "length_regular", "length_donut"],
    "table3": ["L", "delta_reject", "gamma_reject"],
}


def write_study(study: StudyResult, out_dir) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for name, cols in TABLE_COLUMNS.items():
        path = out_dir / f"{name}.csv"
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in getattr(study, name):
                w.writerow([f"{row['L']:g}"] + [f"{row[c]:.6f}" for c in cols[1:]])
        written.append(path)
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(study.manifest(__version__), indent=2, sort_keys=True) + "\n",
                    encoding="utf-8")
    written.append(path)
    return written


def load_dgp_config(path) -> tuple:
    """DgpSpec overrides and an optional ``L_grid`` from a JSON file."""
    if path is None:
        return DgpSpec(), list(DEFAULT_L_GRID)
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path}: expected a JSON object")
    L_grid = raw.pop("L_grid", list(DEFAULT_L_GRID))
    known = {f.name for f in fields(DgpSpec)} - {"L"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"config {path}: unknown keys {sorted(unknown)}")
    try:
        return DgpSpec(**raw), [float(v) for v in L_grid]
    except TypeError as exc:
        raise ConfigError(f"config {path}: {exc}") from None


def cmd_simulate(args) -> dict:
    if args.reps < 1:
        raise ConfigError("--reps must be >= 1")
    dgp, L_grid = load_dgp_config(args.config)
    workers = args.workers if args.workers is not None else default_workers()
    study = run_study(args.seed, args.reps, L_grid, dgp, workers=workers)
    paths = write_study(study, args.out_dir)
    return {"written": [str(p) for p in paths], "config": study.config,
            "seed": args.seed, "reps": args.reps}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="donutrd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="donut/conventional RD estimate with bias-aware CI")
    _common(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("test", help="donut specification test")
    _common(p)
    p.add_argument("--method", choices=("delta", "gamma"), default="delta")
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("constants", help="kernel constants over a grid of donut ratios (CSV)")
    p.add_argument("--kernel", choices=sorted(KERNELS), default="triangular")
    p.add_argument("--c-from", type=float, default=0.0, dest="c_from")
    p.add_argument("--c-to", type=float, default=0.2, dest="c_to")
    p.add_argument("--c-steps", type=int, default=21, dest="c_steps")
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=cmd_constants)

    p = sub.add_parser("simulate", help="Monte Carlo study; writes tables and a manifest")
    p.add_argument("--config", default=None, help="JSON file overriding the design")
    p.add_argument("--reps", type=int, default=10000)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--workers", type=int, default=None,
                   help="worker processes (default: RD_THREADS or all CPUs)")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(name)s: %(levelname)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        result = args.func(args)
    except ConfigError as exc:
        print(f"donutrd: {exc.name}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EstimationError as exc:
        print(f"donutrd: {exc.name}: {exc}", file=sys.stderr)
        return EXIT_STAT
    except DonutRDError as exc:
        print(f"donutrd: {exc.name}: {exc}", file=sys.stderr)
        return EXIT_STAT
    except OSError as exc:
        print(f"donutrd: io-error: {exc}", file=sys.stderr)
        return EXIT_IO
    if result is not None:
        json.dump(result, sys.stdout, indent=2)
        sys.stdout.write("\n")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
