"""Command-line front-end: fit, simulate, mc-table, bootstrap-band, power.

Exit codes: 0 success, 1 usage error, 2 numerical failure (one-line
``error:`` message on stderr).  All randomized commands require --seed.
"""

import argparse
import os
import sys

import numpy as np

from . import inference, linkfam, nested, simlab
from .dataio import parse_dataset, serialize_dataset
from .errors import TransfitError

__all__ = ["main"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on usage errors; the contract here is 1
    def error(self, message):
        raise _UsageError(message)


def _parse_link(value: str) -> linkfam.LinkSpec:
    value = value.strip().lower()
    if value == "ph":
        return linkfam.PH
    if value == "po":
        return linkfam.PO
    if value.startswith("alpha="):
        return linkfam.LinkSpec(float(value.split("=", 1)[1]))
    raise _UsageError(f"--link must be ph, po, or alpha=<x>, got {value!r}")


def _default_threads() -> int:
    env = os.environ.get("TRANSFIT_THREADS", "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise _UsageError(f"TRANSFIT_THREADS must be an integer, got {env!r}")
    return 1


def _write_output(text: str, path: str | None):
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _build_parser() -> _Parser:
    parser = _Parser(prog="transfit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit a transformation model to a dataset CSV")
    p_fit.add_argument("--data", required=True, help="input dataset CSV path")
    p_fit.add_argument("--link", required=True, help="ph | po | alpha=<x>")
    p_fit.add_argument("--knots", type=int, default=None, help="override interior knot count")
    p_fit.add_argument("--lambda-init", type=float, default=1.0, dest="lambda_init")
    p_fit.add_argument("--max-outer", type=int, default=50)
    p_fit.add_argument("--out", default=None, help="FitResult JSON path (default stdout)")
    p_fit.add_argument("--summary", default=None, help="also write a flat CSV summary row")

    p_sim = sub.add_parser("simulate", help="write a simulated dataset CSV")
    p_sim.add_argument("--config", required=True, choices=["C1", "C2", "C3"])
    p_sim.add_argument("--alpha", type=float, required=True)
    p_sim.add_argument("--n", type=int, required=True)
    p_sim.add_argument("--seed", type=int, required=True)
    p_sim.add_argument("--beta", default=None, help="true coefficients 'b1,b2' (default per config)")
    p_sim.add_argument("--out", default=None)

    p_mc = sub.add_parser("mc-table", help="Monte Carlo replication summary CSV")
    p_mc.add_argument("--config", required=True, choices=["C1", "C2", "C3"])
    p_mc.add_argument("--alpha", type=float, required=True, help="generating link index")
    p_mc.add_argument("--fit-link", default=None, help="fitting link (default: generating alpha)")
    p_mc.add_argument("--n", type=int, required=True)
    p_mc.add_argument("--reps", type=int, required=True)
    p_mc.add_argument("--knots", type=int, default=None)
    p_mc.add_argument("--seed", type=int, required=True)
    p_mc.add_argument("--threads", type=int, default=None)
    p_mc.add_argument("--out", default=None)

    p_band = sub.add_parser("bootstrap-band", help="pointwise bootstrap band CSV")
    p_band.add_argument("--data", required=True)
    p_band.add_argument("--link", required=True)
    p_band.add_argument("--reps", type=int, required=True)
    p_band.add_argument("--seed", type=int, required=True)
    p_band.add_argument("--grid-points", type=int, default=100)
    p_band.add_argument("--threads", type=int, default=None)
    p_band.add_argument("--out", default=None)

    p_pow = sub.add_parser("power", help="Wald-test power curve CSV")
    p_pow.add_argument("--config", required=True, choices=["C1", "C2", "C3"])
    p_pow.add_argument("--alpha", type=float, required=True)
    p_pow.add_argument("--n", type=int, required=True)
    p_pow.add_argument("--beta1-grid", required=True,
                       help="comma-separated true beta1 values, e.g. '-1,-0.5,0,0.5,1'")
    p_pow.add_argument("--reps", type=int, required=True)
    p_pow.add_argument("--seed", type=int, required=True)
    p_pow.add_argument("--threads", type=int, default=None)
    p_pow.add_argument("--out", default=None)

    return parser


def _cmd_fit(args) -> int:
    link = _parse_link(args.link)
    ds = parse_dataset(args.data)
    options = nested.FitOptions(lambda_init=args.lambda_init, max_outer=args.max_outer,
                                n_interior=args.knots)
    result = nested.fit(ds, link, options)
    _write_output(nested.fit_result_to_json(result) + "\n", args.out)
    if args.summary is not None:
        _write_output(nested.fit_result_summary_csv(result), args.summary)
    return 0


def _cmd_simulate(args) -> int:
    beta = None
    if args.beta is not None:
        parts = args.beta.split(",")
        if len(parts) != 2:
            raise _UsageError("--beta must look like 'b1,b2'")
        beta = (float(parts[0]), float(parts[1]))
    sc = simlab.SimConfig(config=args.config, alpha=args.alpha, n=args.n,
                          seed=args.seed, beta_true=beta)
    ds = simlab.simulate_dataset(sc)
    _write_output(serialize_dataset(ds), args.out)
    return 0


def _cmd_mc_table(args) -> int:
    fit_alpha = None
    if args.fit_link is not None:
        fit_alpha = _parse_link(args.fit_link).alpha
    sc = simlab.SimConfig(config=args.config, alpha=args.alpha, n=args.n, seed=args.seed)
    threads = args.threads if args.threads is not None else _default_threads()
    summary = simlab.mc_replicate(sc, args.reps, knots_override=args.knots,
                                  fit_alpha=fit_alpha, threads=threads)
    _write_output(simlab.mc_summary_csv(summary), args.out)
    return 0


def _cmd_band(args) -> int:
    link = _parse_link(args.link)
    ds = parse_dataset(args.data)
    times = ds.finite_endpoints()
    grid = np.linspace(times.min(), times.max(), args.grid_points)
    threads = args.threads if args.threads is not None else _default_threads()
    band = inference.bootstrap_band(ds, link, grid, args.reps, args.seed, threads=threads)
    _write_output(band.to_csv(), args.out)
    if band.n_failed:
        print(f"note: {band.n_failed} of {args.reps} resamples failed and were dropped",
              file=sys.stderr)
    return 0


def _cmd_power(args) -> int:
    grid = [float(v) for v in args.beta1_grid.split(",") if v.strip() != ""]
    if not grid:
        raise _UsageError("--beta1-grid is empty")
    sc = simlab.SimConfig(config=args.config, alpha=args.alpha, n=args.n, seed=args.seed)
    threads = args.threads if args.threads is not None else _default_threads()
    points = simlab.power_curve(sc, grid, args.reps, threads=threads)
    _write_output(simlab.power_curve_csv(points), args.out)
    return 0


_COMMANDS = {
    "fit": _cmd_fit,
    "simulate": _cmd_simulate,
    "mc-table": _cmd_mc_table,
    "bootstrap-band": _cmd_band,
    "power": _cmd_power,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TransfitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
