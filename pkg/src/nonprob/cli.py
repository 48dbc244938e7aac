"""Command-line front end: ``estimate``, ``cv-lambda`` and ``simulate``.

Exit codes: 0 on success, 1 for bad input (parse, validation, arguments),
2 for numerical failure (non-convergence, singular or degenerate fits) or a
simulation aggregate flagged invalid.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .errors import (
    ConvergenceError,
    DegenerateModelError,
    NonprobError,
    ParseError,
    SingularMatrixError,
    ValidationError,
)
from .methods import METHODS, MethodOptions, parse_methods, run_methods
from .propensity import PenaltyConfig, adaptive_factors, cv_lambda, fit_newton, outcome_coefficients
from .sample import Schema, load_csv, load_csv_pair

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2
_NUMERIC = (ConvergenceError, SingularMatrixError, DegenerateModelError)


class InputError(Exception):
    """Bad command-line input; maps to exit code 1."""


def _fail(msg: str, code: int) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def _schema(args) -> Schema:
    if args.schema is None:
        if not args.covariates:
            raise InputError("need --schema or --covariates")
        mapping = {"covariates": args.covariates}
    elif Path(args.schema).is_file():
        return Schema.from_file(args.schema)
    else:
        # inline form: "covariates=x1,x2;weight=d"
        mapping = {}
        for part in args.schema.split(";"):
            key, sep, value = part.partition("=")
            if not sep:
                raise InputError(f"bad schema entry {part!r}")
            mapping[key.strip()] = value.strip()
    return Schema.from_mapping(mapping)


def _load(args):
    schema = _schema(args)
    if args.input:
        if args.input_a or args.input_b:
            raise InputError("use either --input or --input-a/--input-b")
        return load_csv(args.input, schema)
    if not (args.input_a and args.input_b):
        raise InputError("need --input or both --input-a and --input-b")
    return load_csv_pair(args.input_a, args.input_b, schema)


def _penalty(args) -> PenaltyConfig:
    grid = None
    if getattr(args, "lambdas", None):
        grid = sorted((float(v) for v in args.lambdas.split(",")), reverse=True)
    return PenaltyConfig(lambda_grid=grid, gamma=args.gamma, v_folds=args.folds, n_lambda=args.n_lambda)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_estimate(args) -> int:
    sample = _load(args)
    names = parse_methods(args.methods)
    opts = MethodOptions(
        penalty=_penalty(args),
        outcome_family=args.outcome_family,
        mode=args.mode,
        refit=args.refit,
        mhat_zero=args.mhat_zero,
        benkeser_outcome=args.benkeser_outcome,
    )
    results = run_methods(sample, names, opts, np.random.default_rng(args.seed))
    out = _out_dir(args)
    code = EXIT_OK
    rows = []
    for name in names:
        rep = results[name]
        if isinstance(rep, Exception):
            numeric = isinstance(rep, _NUMERIC)
            code = max(code, EXIT_NUMERIC if numeric else EXIT_INPUT)
            print(f"error: {name}: {type(rep).__name__}: {rep}", file=sys.stderr)
            continue
        (out / f"{name}.json").write_text(rep.to_json(indent=2) + "\n")
        rows.append([name, rep.mu_hat, rep.se, rep.ci[0], rep.ci[1]])
        print(f"{name:<20} mu={rep.mu_hat:.6g} se={rep.se:.4g} ci=({rep.ci[0]:.6g}, {rep.ci[1]:.6g})")
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["estimator", "mu_hat", "se", "ci_lo", "ci_hi"])
        for name, *vals in rows:
            w.writerow([name] + [repr(float(v)) for v in vals])
    return code


def cmd_cv_lambda(args) -> int:
    sample = _load(args)
    penalty = _penalty(args)
    if args.method == "lasso":
        factors = np.ones(sample.p)
    else:
        factors = adaptive_factors(outcome_coefficients(sample, args.outcome_family), penalty.gamma)
    full = fit_newton(sample)
    cv = cv_lambda(sample, factors, penalty, np.random.default_rng(args.seed), full_fit=full, mode=args.mode)
    out = _out_dir(args)
    v = cv.fold_losses.shape[0]
    with open(out / "cv_curve.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["lambda", "mean_loss", "selected"] + [f"fold_{k + 1}" for k in range(v)])
        for i, lam in enumerate(cv.grid):
            w.writerow([repr(float(lam)), repr(float(cv.mean_loss[i])), int(lam == cv.lambda_)]
                       + [repr(float(x)) for x in cv.fold_losses[:, i]])
    (out / "selected_lambda.json").write_text(
        json.dumps({"method": args.method, "lambda": cv.lambda_, "folds": v}, indent=2) + "\n")
    print(f"selected lambda = {cv.lambda_:.6g}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    from .simulation import (
        ScenarioSpec,
        default_options,
        format_table,
        metrics_csv,
        run_monte_carlo,
        selection_csv,
    )

    spec = ScenarioSpec.from_id(args.scenario)
    methods = parse_methods(args.methods) if args.methods else None
    penalty = PenaltyConfig(gamma=args.gamma, v_folds=args.folds, n_lambda=args.n_lambda)
    opts = default_options(spec, penalty)
    opts.mode, opts.refit = args.mode, args.refit
    result = run_monte_carlo(spec, methods, args.reps, args.seed, jobs=args.jobs,
                             fixed_population=args.fixed_population, options=opts)
    out = _out_dir(args)
    (out / "metrics.csv").write_text(metrics_csv(result))
    (out / "selection.csv").write_text(selection_csv(result))
    print(format_table(result))
    if result.invalid:
        bad = [r.estimator for r in result.rows if r.invalid]
        return _fail(f"more than 10% of replicates failed for {', '.join(bad)}", EXIT_NUMERIC)
    return EXIT_OK


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--input", help="combined CSV holding both samples")
    p.add_argument("--input-a", help="CSV of the non-probability sample")
    p.add_argument("--input-b", help="CSV of the probability sample")
    p.add_argument("--schema", help="key=value schema file, or inline 'covariates=x1,x2;weight=d'")
    p.add_argument("--covariates", help="comma list of covariate columns (default column names otherwise)")
    p.add_argument("--outcome-family", choices=("linear", "logistic"), default="linear")


def _penalty_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--gamma", type=float, default=1.0, help="adaptive-penalty exponent")
    p.add_argument("--folds", type=int, default=5, help="cross-validation folds V")
    p.add_argument("--n-lambda", type=int, default=50, help="lambda grid size")
    p.add_argument("--mode", choices=("exact", "paper"), default="exact",
                   help="working response for the penalised propensity fit")
    p.add_argument("--refit", action="store_true", help="refit unpenalised on the selected covariates")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nonprob", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="estimate the population mean from data files")
    _data_flags(est)
    _penalty_flags(est)
    est.add_argument("--methods", default="ipw-logistic,aipw-logistic",
                     help=f"comma list from: {', '.join(METHODS)}")
    est.add_argument("--mhat-zero", action="store_true", help="use m(x)=0 in every AIPW estimator")
    est.add_argument("--benkeser-outcome", choices=("default", "flexible"), default="default")
    est.add_argument("--seed", type=int, default=0)
    est.add_argument("--out", default="nonprob_out")
    est.set_defaults(func=cmd_estimate)

    cv = sub.add_parser("cv-lambda", help="cross-validation curve for the propensity penalty")
    _data_flags(cv)
    _penalty_flags(cv)
    cv.add_argument("--method", choices=("lasso", "oalasso"), default="oalasso")
    cv.add_argument("--lambdas", help="explicit comma list of lambda values")
    cv.add_argument("--seed", type=int, default=0)
    cv.add_argument("--out", default="nonprob_out")
    cv.set_defaults(func=cmd_cv_lambda)

    sim = sub.add_parser("simulate", help="Monte-Carlo study for one scenario")
    _penalty_flags(sim)
    sim.add_argument("--scenario", type=int, choices=(1, 2, 3, 4), required=True)
    sim.add_argument("--reps", type=int, default=1000)
    sim.add_argument("--seed", type=int, required=True)
    sim.add_argument("--methods", help="comma list (default: the scenario's estimator set)")
    sim.add_argument("--jobs", type=int, default=1, help="worker processes")
    sim.add_argument("--fixed-population", action="store_true",
                     help="draw one population and redraw only the samples")
    sim.add_argument("--out", default="nonprob_out")
    sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ParseError as exc:
        return _fail(str(exc), EXIT_INPUT)
    except ValidationError as exc:
        return _fail("; ".join(exc.problems), EXIT_INPUT)
    except _NUMERIC as exc:
        return _fail(f"{type(exc).__name__}: {exc}", EXIT_NUMERIC)
    except (InputError, NonprobError, ValueError, OSError) as exc:
        return _fail(str(exc), EXIT_INPUT)


if __name__ == "__main__":
    sys.exit(main())
