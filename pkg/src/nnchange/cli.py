"""Command-line interface.

Exit codes: 0 success, 1 statistical-procedure failure, 2 usage or IO error.
Results are written only after the command has succeeded, so a failing run
leaves no partial output.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import tempfile
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from nnchange import __version__
from nnchange.changepoint import ChangePointEstimate, simulate_limit_argmax
from nnchange.covariance import A_RULES
from nnchange.errors import NNChangeError, ParseError
from nnchange.fitting import FitConfig, embed_series, fit_network
from nnchange.nn_model import NetworkShape
from nnchange.preprocessing import DEFAULT_RHO, SPLITS, prepare_series, read_series_csv, select_ar_order
from nnchange.procedure import compute_statistics, run_test
from nnchange.score_stats import WeightConfig, WeightMatrix
from nnchange.simulation import (
    FAMILIES,
    ScenarioSpec,
    estimator_errors,
    large_sample_fit,
    limit_spec_for,
    power_study,
    write_power_csv,
)

EXIT_OK, EXIT_STAT, EXIT_USAGE = 0, 1, 2
logger = logging.getLogger("nnchange")


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# argument parsing


def _add_shape(p):
    p.add_argument("--p", type=int, default=1, help="number of autoregressive lags")
    p.add_argument("--d", type=int, default=0, help="number of exogenous regressors")
    p.add_argument("--h", type=int, default=1, help="number of hidden units")


def _add_input(p):
    p.add_argument("--input", required=True, help="CSV: one value column (header optional) or date,value")
    p.add_argument("--exog", help="CSV with d numeric columns aligned with the responses")
    p.add_argument("--returns", action="store_true", help="convert prices to simple returns first")
    p.add_argument("--fuller", action="store_true", help="apply the Fuller log-square transform")
    p.add_argument("--fuller-rho", type=float, default=DEFAULT_RHO)


def _add_fit(p):
    p.add_argument("--restarts", type=int, default=20)
    p.add_argument("--max-iters", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)


def _add_weight(p, with_a=True):
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--gamma", type=float, default=0.0)
    if with_a:
        p.add_argument(
            "--a",
            default="omnibus",
            help="weight matrix: omnibus, residual, a (input weights) or a path to a q x q matrix file",
        )


def _add_cv(p):
    p.add_argument("--level", type=float, default=0.05, help="significance level")
    p.add_argument("--cache-dir", help="critical-value table cache (default $NNCHANGE_CACHE or ~/.cache/nnchange)")
    p.add_argument("--cv-reps", type=int, default=100_000)
    p.add_argument("--boot-reps", type=int, default=200, help="bootstrap replications at eta=0, gamma=1/2")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nnchange", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"nnchange {__version__}")
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit the network and write the estimate as JSON")
    _add_input(p), _add_shape(p), _add_fit(p)
    p.add_argument("--out", help="output JSON path (default stdout)")

    p = sub.add_parser("test", help="run the change-point test")
    _add_input(p), _add_shape(p), _add_fit(p), _add_weight(p), _add_cv(p)
    p.add_argument("--out")

    p = sub.add_parser("estimate", help="estimate the change point")
    _add_input(p), _add_shape(p), _add_fit(p), _add_weight(p)
    p.add_argument("--out")

    p = sub.add_parser("power", help="simulated rejection rates (CSV)")
    p.add_argument("--family", required=True, choices=sorted(FAMILIES))
    p.add_argument("--n", type=int, default=250)
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--h", type=int, help="hidden units (default per family)")
    p.add_argument("--tests", default="residual,a", help="comma-separated rules among omnibus,residual,a")
    p.add_argument("--reps", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--restarts", type=int, default=20)
    _add_weight(p, with_a=False), _add_cv(p)
    p.add_argument("--out", help="output CSV path (default stdout)")

    p = sub.add_parser("limit-dist", help="draws of the limit law of the estimator (CSV)")
    p.add_argument("--family", required=True, choices=sorted(FAMILIES))
    p.add_argument("--tau", type=float, default=0.5)
    p.add_argument("--h", type=int)
    p.add_argument("--a", default="residual", choices=A_RULES)
    p.add_argument("--gamma", type=float, default=0.0)
    p.add_argument("--fit-n", type=int, default=100_000, help="series length for the best approximating fit")
    p.add_argument("--mc-n", type=int, default=200_000, help="path length for the change magnitude")
    p.add_argument("--horizon", type=int, default=200)
    p.add_argument("--reps", type=int, default=10_000)
    p.add_argument("--finite-n", type=int, help="also simulate m_hat - m at this sample size")
    p.add_argument("--finite-reps", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out")

    p = sub.add_parser("analyze", help="prices -> returns -> Fuller -> AR order -> fit -> test -> estimate")
    p.add_argument("--input", required=True)
    p.add_argument("--no-returns", action="store_true", help="input already holds returns")
    p.add_argument("--fuller-rho", type=float, default=DEFAULT_RHO)
    p.add_argument("--max-p", type=int, default=10)
    p.add_argument("--split", default="both_min", choices=SPLITS)
    p.add_argument("--segment-len", type=int, default=600)
    p.add_argument("--h", type=int, default=1)
    _add_fit(p), _add_weight(p), _add_cv(p)
    p.add_argument("--out")
    return parser


# --------------------------------------------------------------------------
# helpers


def _load_series(args) -> np.ndarray:
    path = Path(args.input)
    if not path.is_file():
        raise FileNotFoundError(f"input file not found: {path}")
    values, _ = read_series_csv(path)
    return prepare_series(values, args.returns, args.fuller, args.fuller_rho)


def _load_exog(args, n_resp: int):
    if args.d == 0:
        if getattr(args, "exog", None):
            raise UsageError("--exog given but --d is 0")
        return None
    if not args.exog:
        raise UsageError("--d > 0 needs --exog")
    path = Path(args.exog)
    if not path.is_file():
        raise FileNotFoundError(f"exogenous file not found: {path}")
    try:
        exo = np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from None
    if exo.shape[1] != args.d:
        raise UsageError(f"--exog has {exo.shape[1]} columns, --d is {args.d}")
    return exo


def _dataset(args):
    raw = _load_series(args)
    shape = NetworkShape(args.p, args.d, args.h)
    exo = _load_exog(args, raw.size - args.p)
    return embed_series(raw, exo, shape)


def _fit_cfg(args) -> FitConfig:
    return FitConfig(restarts=args.restarts, max_iters=getattr(args, "max_iters", 500), seed=args.seed)


def _weight(args) -> WeightConfig:
    return WeightConfig(eta=args.eta, gamma=args.gamma)


def _a_rule(value: str, q: int):
    if value in A_RULES:
        return value
    path = Path(value)
    if not path.is_file():
        raise UsageError(f"--a must be one of {A_RULES} or an existing matrix file, got {value!r}")
    try:
        m = np.loadtxt(path, ndmin=2, delimiter="," if path.suffix == ".csv" else None)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}") from None
    if m.shape != (q, q):
        raise UsageError(f"weight matrix in {path} has shape {m.shape}, expected ({q}, {q})")
    return WeightMatrix(m)


def _echo(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}


def _envelope(args, result: dict, seeds: dict) -> dict:
    return {
        "command": args.command,
        "config": _echo(args),
        "version": __version__,
        "seeds": seeds,
        "timestamp": datetime.now(timezone.utc).isoformat(),
        "result": result,
    }


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def to_json(payload: dict) -> str:
    return json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n"


def _emit(text: str, out: str | None) -> None:
    """Write ``text`` atomically to ``out`` or to stdout."""
    if out is None:
        sys.stdout.write(text)
        return
    path = Path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# --------------------------------------------------------------------------
# commands


def cmd_fit(args) -> str:
    data = _dataset(args)
    fit = fit_network(data, _fit_cfg(args))
    result = fit.to_dict() | {"n": data.n}
    return to_json(_envelope(args, result, {"fit": args.seed}))


def cmd_test(args) -> str:
    data = _dataset(args)
    fit = fit_network(data, _fit_cfg(args))
    rule = _a_rule(args.a, fit.theta_hat.q)
    report, fit = run_test(
        data,
        rule,
        _weight(args),
        args.level,
        _fit_cfg(args),
        fit=fit,
        cache_dir=args.cache_dir,
        cv_reps=args.cv_reps,
        boot_reps=args.boot_reps,
        boot_seed=args.seed,
    )
    result = {"test": report.to_dict(), "fit": fit.to_dict()}
    return to_json(_envelope(args, result, {"fit": args.seed, "critical_values": 0, "bootstrap": args.seed}))


def cmd_estimate(args) -> str:
    data = _dataset(args)
    cfg = _fit_cfg(args)
    fit = fit_network(data, cfg)
    theta = fit.theta_hat
    rule = _a_rule(args.a, theta.q)
    res, fit, _ = compute_statistics(data, [rule], _weight(args), cfg, fit=fit, return_details=True)
    (r,) = res.values()
    est = ChangePointEstimate(r.k_argmax, r.statistic, _weight(args), r.a_used, data.n)
    result = {"estimate": est.to_dict(), "a_rule": args.a, "fit": fit.to_dict()}
    return to_json(_envelope(args, result, {"fit": args.seed}))


def cmd_power(args) -> str:
    rules = [r.strip() for r in args.tests.split(",") if r.strip()]
    bad = [r for r in rules if r not in A_RULES]
    if bad or not rules:
        raise UsageError(f"--tests must list rules among {A_RULES}")
    spec = ScenarioSpec(args.family, args.n, args.tau, seed=args.seed)
    rows = power_study(
        spec,
        args.reps,
        args.level,
        rules,
        args.h,
        _weight(args),
        FitConfig(restarts=args.restarts),
        args.cache_dir,
        args.threads,
        cv_reps=args.cv_reps,
    )
    buf = io.StringIO()
    write_power_csv(rows, buf)
    return buf.getvalue()


def cmd_limit_dist(args) -> str:
    if not 0.0 < args.tau < 1.0:
        raise UsageError("--tau must lie in (0, 1) for the limit law")
    spec = ScenarioSpec(args.family, max(args.finite_n or 1000, 2), args.tau, seed=args.seed)
    theta = large_sample_fit(spec, args.fit_n, args.h)
    lam = spec.m / spec.n if args.finite_n else args.tau
    limit, _ = limit_spec_for(args.family, theta, lam, args.a, args.gamma, args.horizon, args.mc_n, args.seed)
    draws = simulate_limit_argmax(limit, args.reps, args.seed).draws
    if args.finite_n:
        finite = estimator_errors(spec, args.finite_reps, args.h, WeightConfig(gamma=args.gamma), threads=args.threads)
        n_rows = max(draws.size, finite.size)
        rows = [
            (i, int(draws[i]) if i < draws.size else "", int(finite[i]) if i < finite.size else "")
            for i in range(n_rows)
        ]
        return _csv_text(["index", "limit_draw", "finite_draw"], rows)
    return _csv_text(["index", "limit_draw"], enumerate(draws.tolist()))


def cmd_analyze(args) -> str:
    path = Path(args.input)
    if not path.is_file():
        raise FileNotFoundError(f"input file not found: {path}")
    values, _ = read_series_csv(path)
    x = prepare_series(values, not args.no_returns, True, args.fuller_rho)
    order = select_ar_order(x, args.max_p, args.split, args.segment_len)
    p = max(order, 1)  # the network needs at least one input
    shape = NetworkShape(p, 0, args.h)
    data = embed_series(x, None, shape)
    fit_cfg = _fit_cfg(args)
    fit = fit_network(data, fit_cfg)
    rule = _a_rule(args.a, fit.theta_hat.q)
    report, fit = run_test(
        data,
        rule,
        _weight(args),
        args.level,
        fit_cfg,
        fit=fit,
        cache_dir=args.cache_dir,
        cv_reps=args.cv_reps,
        boot_reps=args.boot_reps,
        boot_seed=args.seed,
    )
    result = {
        "n_transformed": int(x.size),
        "selected_order": order,
        "p_used": p,
        "fit": fit.to_dict(),
        "test": report.to_dict(),
        "estimate": {
            "k_hat": report.k_argmax,
            "n": report.n,
            "fraction": report.k_argmax / report.n,
            # observation index in the transformed series
            "series_index": report.k_argmax + p - 1,
        },
    }
    return to_json(_envelope(args, result, {"fit": args.seed, "critical_values": 0, "bootstrap": args.seed}))


COMMANDS = {
    "fit": cmd_fit,
    "test": cmd_test,
    "estimate": cmd_estimate,
    "power": cmd_power,
    "limit-dist": cmd_limit_dist,
    "analyze": cmd_analyze,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        text = COMMANDS[args.command](args)
        _emit(text, args.out)
    except (UsageError, OSError, ParseError) as exc:
        print(f"nnchange: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NNChangeError, ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"nnchange: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_STAT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
