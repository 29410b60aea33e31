"""Command-line front-end: fit / tune / simulate / verify.

CSV in, JSON + CSV out.  Every run also emits a manifest (config
snapshot, input digests, per-phase timings) next to its main output.
Exit codes: 0 success, 2 usage, 3 data problem, 4 numeric/convergence
failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__
from .blup import NumericError
from .ecm import EcmConfig, FitResult, ParameterState, SupportCapExceeded, fit, \
    neg2_penalized_marginal, refit
from .model import DegenerateColumnError, DimensionError, GroupingFactor, \
    MixedModelData, RandomEffectSpec, standardize
from .penalized_ls import NonConvergenceError, selector_names
from .simgen import METHODS, SCENARIOS, run_study
from .tuning import TuningError, lambda_grid, tune

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

DATA_ERRORS = (DimensionError, DegenerateColumnError, FileNotFoundError, KeyError)
NUMERIC_ERRORS = (NumericError, NonConvergenceError, SupportCapExceeded, TuningError)


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_csv_matrix(path: str):
    """CSV with a header row; returns (header, float ndarray)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise DimensionError(f"{path}: need a header row and at least one data row")
    header = rows[0]
    try:
        body = np.array([[float(v) for v in row] for row in rows[1:]])
    except ValueError as exc:
        raise DimensionError(f"{path}: non-numeric cell ({exc})") from None
    if body.shape[1] != len(header):
        raise DimensionError(f"{path}: ragged rows")
    return header, body


def _read_headerless_matrix(path: str) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    try:
        return np.array([[float(v) for v in row] for row in rows if row])
    except ValueError as exc:
        raise DimensionError(f"{path}: non-numeric cell ({exc})") from None


def _load_data(args) -> tuple[MixedModelData, list[str]]:
    inputs = [args.y, args.x]
    _, y = _read_csv_matrix(args.y)
    if y.shape[1] != 1:
        raise DimensionError(f"{args.y}: expected a single response column")
    y = y[:, 0]
    names, X = _read_csv_matrix(args.x)

    effects = []
    if args.groups:
        inputs.append(args.groups)
        factor_names, levels = _read_csv_matrix(args.groups)
        cov_cols = [None] * len(factor_names)
        if args.covariate_cols:
            entries = args.covariate_cols.split(",")
            if len(entries) != len(factor_names):
                raise DimensionError("--covariate-cols needs one entry per factor")
            for i, entry in enumerate(entries):
                entry = entry.strip()
                if entry and entry.lower() != "none":
                    if entry not in names:
                        raise DimensionError(f"unknown X column {entry!r}")
                    cov_cols[i] = names.index(entry)
        rel = {}
        for spec in args.relationship or []:
            if "=" not in spec:
                raise DimensionError("--relationship expects NAME=path")
            fname, path = spec.split("=", 1)
            if fname not in factor_names:
                raise DimensionError(f"unknown factor {fname!r} in --relationship")
            inputs.append(path)
            rel[fname] = _read_headerless_matrix(path)
        for i, fname in enumerate(factor_names):
            col = levels[:, i]
            if not np.allclose(col, np.round(col)):
                raise DimensionError(f"{args.groups}: factor {fname} has non-integer levels")
            ivals = col.astype(int)
            factor = GroupingFactor(ivals, int(ivals.max()))
            ci = cov_cols[i]
            effects.append(RandomEffectSpec(
                factor=factor, covariate=None if ci is None else X[:, ci],
                relationship=rel.get(fname), covariate_index=ci, name=fname))

    unpenalized = set()
    if not args.penalize_intercept and X.shape[1] and np.all(X[:, 0] == X[0, 0]) and X[0, 0] != 0:
        unpenalized.add(0)
    data = MixedModelData(y=y, X=X, effects=tuple(effects),
                          unpenalized=frozenset(unpenalized), column_names=tuple(names))
    return data, inputs


def _apply_standardize(data: MixedModelData):
    Xs, centers, scales = standardize(data.X, skip=data.unpenalized)
    out = MixedModelData(y=data.y, X=Xs, effects=data.effects,
                         unpenalized=data.unpenalized, column_names=data.column_names)
    return out, centers, scales


def _beta_original_scale(beta, centers, scales, unpenalized):
    """Map coefficients fitted on standardized columns back to raw units."""
    beta = np.asarray(beta, dtype=float)
    raw = beta / scales
    shift = float((centers * raw).sum())
    raw = raw.copy()
    for j in sorted(unpenalized):
        raw[j] -= shift  # absorbed by the (unscaled) intercept column
        break
    return raw


def _fit_payload(data: MixedModelData, res: FitResult, beta_report=None) -> dict:
    names = data.names()
    beta = res.state.beta if beta_report is None else beta_report
    sigma2 = res.sigma2_full(data.q)
    effect_names = [e.name or f"u{k + 1}" for k, e in enumerate(data.effects)]
    return {
        "beta": {names[j]: float(beta[j]) for j in range(data.p)},
        "support": [names[j] for j in res.support],
        "sigma2": {effect_names[k]: float(sigma2[k]) for k in range(data.q)},
        "sigma2_e": float(res.state.sigma2_e),
        "active_effects": [effect_names[k] for k in res.state.active],
        "deleted": {effect_names[k]: it for k, it in res.deleted.items()},
        "iterations": res.iterations,
        "converged": res.converged,
        "reason": res.reason,
        "objective": float(res.trajectory[-1]) if res.trajectory else None,
        "objective_trajectory": [float(v) for v in res.trajectory],
    }


def _write_manifest(out_path: str, command: str, config: dict, seed, inputs, timings):
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config,
        "inputs": {path: _sha256(path) for path in inputs},
        "timings": {k: round(v, 6) for k, v in timings.items()},
    }
    with open(out_path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _ecm_config(args) -> EcmConfig:
    kwargs = {}
    if getattr(args, "max_iter", None) is not None:
        kwargs["max_iter"] = args.max_iter
    if getattr(args, "delete_ratio", None) is not None:
        kwargs["delete_ratio"] = args.delete_ratio
    return EcmConfig(selector=args.selector, **kwargs)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_fit(args) -> int:
    timings = {}
    t0 = time.perf_counter()
    data, inputs = _load_data(args)
    if args.lam == 0 and data.p >= data.n:
        raise DimensionError("penalty required when p >= n")
    centers = scales = None
    if args.standardize:
        data, centers, scales = _apply_standardize(data)
    timings["load"] = time.perf_counter() - t0

    cfg = replace(_ecm_config(args), lam=args.lam)
    t0 = time.perf_counter()
    res = fit(data, cfg)
    timings["fit"] = time.perf_counter() - t0

    beta_report = None
    if centers is not None:
        beta_report = _beta_original_scale(res.state.beta, centers, scales, data.unpenalized)
    payload = {"schema_version": 1, "command": "fit", "lambda": args.lam,
               "selector": args.selector, **_fit_payload(data, res, beta_report)}
    if args.refit:
        t0 = time.perf_counter()
        rf = refit(data, res.support, res.state.active, cfg=cfg)
        timings["refit"] = time.perf_counter() - t0
        rf_beta = None
        if centers is not None:
            rf_beta = _beta_original_scale(rf.state.beta, centers, scales, data.unpenalized)
        payload["refit"] = _fit_payload(data, rf, rf_beta)
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(args.out + ".manifest.json", "fit",
                    {"lambda": args.lam, "selector": args.selector,
                     "refit": args.refit, "standardize": args.standardize},
                    None, inputs, timings)
    return 0


def cmd_tune(args) -> int:
    timings = {}
    t0 = time.perf_counter()
    data, inputs = _load_data(args)
    centers = scales = None
    if args.standardize:
        data, centers, scales = _apply_standardize(data)
    timings["load"] = time.perf_counter() - t0

    cfg = _ecm_config(args)
    t0 = time.perf_counter()
    grid = lambda_grid(data, args.grid_size, args.min_ratio)
    tres = tune(data, grid, cfg, criterion=args.criterion,
                warm_start=not args.cold_start, threads=args.threads)
    timings["tune"] = time.perf_counter() - t0

    with open(args.path_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["lambda", "bic", "ebic", "support_size", "sigma2_e", "degenerate"])
        for e in tres.entries:
            writer.writerow([_fmt(e.lam), _fmt(e.bic), _fmt(e.ebic),
                             e.support_size, _fmt(e.sigma2_e), int(e.degenerate)])

    best = tres.best_fit
    beta_report = None
    if centers is not None:
        beta_report = _beta_original_scale(best.state.beta, centers, scales, data.unpenalized)
    payload = {"schema_version": 1, "command": "tune", "lambda": tres.best_lambda,
               "criterion": args.criterion, "selector": args.selector,
               **_fit_payload(data, best, beta_report)}
    if args.refit:
        rf = refit(data, best.support, best.state.active, cfg=cfg)
        rf_beta = None
        if centers is not None:
            rf_beta = _beta_original_scale(rf.state.beta, centers, scales, data.unpenalized)
        payload["refit"] = _fit_payload(data, rf, rf_beta)
    with open(args.out, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(args.out + ".manifest.json", "tune",
                    {"grid_size": args.grid_size, "min_ratio": args.min_ratio,
                     "criterion": args.criterion, "selector": args.selector,
                     "cold_start": args.cold_start},
                    None, inputs, timings)
    return 0


def cmd_simulate(args) -> int:
    import os

    if args.reps < 1:
        raise DimensionError("--reps must be >= 1")
    os.makedirs(args.out_dir, exist_ok=True)
    t0 = time.perf_counter()
    study = run_study(args.model, args.reps, args.method, args.seed,
                      grid_size=args.grid_size, min_ratio=args.min_ratio,
                      criterion=args.criterion, with_refit=args.refit,
                      fixed_support=args.fixed_support, threads=args.threads)
    elapsed = time.perf_counter() - t0

    agg_path = os.path.join(args.out_dir, "aggregate.csv")
    rep_path = os.path.join(args.out_dir, "replicates.csv")
    _write_aggregate_csv(agg_path, study, args.refit)
    _write_replicates_csv(rep_path, study)
    _write_manifest(os.path.join(args.out_dir, "manifest.json"), "simulate",
                    {"model": args.model, "reps": args.reps, "method": args.method,
                     "grid_size": args.grid_size, "min_ratio": args.min_ratio,
                     "criterion": args.criterion, "refit": args.refit,
                     "fixed_support": args.fixed_support},
                    args.seed, [], {"simulate": elapsed})
    if study.failures:
        print(f"{len(study.failures)} replicate(s) failed", file=sys.stderr)
    return 0


def _write_aggregate_csv(path: str, study, with_refit: bool) -> None:
    rows = [("scenario", study.scenario), ("method", study.method),
            ("reps", study.reps), ("failures", len(study.failures))]
    for name, (mean, sd) in study.aggregate().items():
        rows.append((name + "_mean", _fmt(mean)))
        rows.append((name + "_sd", _fmt(sd)))
    if with_refit:
        for name, (mean, sd) in study.aggregate(refit=True).items():
            rows.append(("refit_" + name + "_mean", _fmt(mean)))
            rows.append(("refit_" + name + "_sd", _fmt(sd)))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["field", "value"])
        writer.writerows(rows)


def _write_replicates_csv(path: str, study) -> None:
    if not study.reports:
        header = ["replicate"]
    else:
        r0 = study.reports[0]
        header = (["replicate", "truth", "support_exact", "support_size", "tp",
                   "sigma2_e", "mse", "snr", "false_deletion"]
                  + [f"sigma2_{k + 1}" for k in range(len(r0.sigma2_k_hat))]
                  + [f"beta_{j + 1}" for j in range(len(r0.beta_hat_on_support))])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i, r in enumerate(study.reports):
            writer.writerow([i, int(r.truth), int(r.support_exact), r.support_size,
                             r.tp, _fmt(r.sigma2_e_hat), _fmt(r.mse), _fmt(r.snr),
                             int(r.false_deletion)]
                            + [_fmt(v) for v in r.sigma2_k_hat]
                            + [_fmt(v) for v in r.beta_hat_on_support])


def cmd_verify(args) -> int:
    data, _ = _load_data(args)
    with open(args.fit) as fh:
        payload = json.load(fh)
    names = list(data.names())
    beta = np.array([payload["beta"][name] for name in names])
    effect_names = [e.name or f"u{k + 1}" for k, e in enumerate(data.effects)]
    active, sigma2 = [], []
    for k, name in enumerate(effect_names):
        if name in payload["active_effects"]:
            active.append(k)
            sigma2.append(payload["sigma2"][name])
    state = ParameterState(beta, np.array(sigma2), payload["sigma2_e"], tuple(active))
    weights = None
    if payload.get("selector") == "adlasso":
        from .penalized_ls import adaptive_weights
        weights = adaptive_weights(data.X, data.y)
    from .ecm import effective_unpenalized
    value = neg2_penalized_marginal(data, state, payload["lambda"], weights=weights,
                                    exempt=effective_unpenalized(data, tuple(active)))
    stored = payload["objective"]
    diff = abs(value - stored)
    if diff > 1e-10 * max(1.0, abs(stored)):
        raise NumericError(f"objective mismatch: stored {stored!r}, recomputed {value!r}")
    print(f"ok: objective reproduced to {diff:.3e}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_data_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--y", required=True, help="response CSV (one column, header)")
    p.add_argument("--x", required=True, help="fixed-design CSV (header = names)")
    p.add_argument("--groups", help="grouping CSV: one 1-based integer column per factor")
    p.add_argument("--covariate-cols",
                   help="comma list, one X column name (or 'none') per factor")
    p.add_argument("--relationship", action="append", metavar="FACTOR=PATH",
                   help="per-factor relationship matrix CSV (repeatable)")
    p.add_argument("--penalize-intercept", action="store_true",
                   help="do not exempt a constant first column from the penalty")
    p.add_argument("--standardize", action="store_true",
                   help="standardize penalized columns before fitting")


def _add_fit_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--selector", default="lasso", choices=selector_names())
    p.add_argument("--max-iter", type=int, default=None)
    p.add_argument("--delete-ratio", type=float, default=None)
    p.add_argument("--refit", action="store_true",
                   help="append an unpenalized re-estimation on the selected model")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lmmsel", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit at a fixed penalty")
    _add_data_args(p)
    _add_fit_args(p)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--out", required=True, help="output JSON path")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("tune", help="fit a penalty path and pick by BIC/EBIC")
    _add_data_args(p)
    _add_fit_args(p)
    p.add_argument("--grid-size", type=int, default=50)
    p.add_argument("--min-ratio", type=float, default=0.01)
    p.add_argument("--criterion", default="bic", choices=["bic", "ebic"])
    p.add_argument("--cold-start", action="store_true")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--path-csv", required=True)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("simulate", help="Monte-Carlo benchmark study")
    p.add_argument("--model", required=True, choices=sorted(SCENARIOS))
    p.add_argument("--reps", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--method", default="lasso+", choices=METHODS)
    p.add_argument("--grid-size", type=int, default=50)
    p.add_argument("--min-ratio", type=float, default=0.01)
    p.add_argument("--criterion", default="bic", choices=["bic", "ebic"])
    p.add_argument("--refit", action="store_true")
    p.add_argument("--fixed-support", action="store_true",
                   help="M2: keep the random part of the true support fixed across reps")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("verify", help="re-check a stored fit's objective")
    _add_data_args(p)
    p.add_argument("--fit", required=True, help="fit JSON produced by fit/tune")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NUMERIC_ERRORS as exc:
        _emit_error(exc)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        _emit_error(exc)
        return EXIT_DATA
    except ValueError as exc:
        _emit_error(exc)
        return EXIT_DATA


def _emit_error(exc) -> None:
    json.dump({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
    sys.stderr.write("\n")


if __name__ == "__main__":
    sys.exit(main())
