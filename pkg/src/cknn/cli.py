"""Command-line front end: tune, estimate, fh, simulate, report.

Every writing command drops a manifest.json capturing the resolved
statistical configuration (seed, k, feature subset, resample counts, input
identity). Execution knobs such as --threads and --output-dir are left out
of the manifest and never influence results, so reruns of the same
command are byte-identical regardless of parallelism. All JSON is written
with sorted keys and no timestamps.

Exit codes: 0 success, 2 invalid input or configuration, 3 capacity or
degenerate-design failures, 4 convergence failures.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, fh as fh_mod
from .calibration import hybrid_estimate
from .errors import (
    AlignmentError,
    CapacityError,
    CknnError,
    CollinearityError,
    ConvergenceError,
    DegenerateDesignError,
    DomainError,
    SchemaError,
    SpecError,
    ValidationError,
)
from .frame import load_frame
from .hasd import FeatureMask
from .simlab import (
    Scenario,
    apply_undercoverage,
    parse_scenario,
    realize_scenario,
    run_monte_carlo,
)
from .tuning import grid_search, write_grid_csv
from .uncertainty import (
    NORMAL_CI_MULTIPLIER,
    assemble_report,
    bootstrap_size,
    estimate_bias,
    fixed_k_bootstrap,
    pilot_cv,
    pseudo_values,
)

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_CAPACITY = 3
EXIT_CONVERGENCE = 4

_INVALID = (
    SchemaError,
    ValidationError,
    DomainError,
    SpecError,
    AlignmentError,
    CollinearityError,
)
_CAPACITY = (CapacityError, DegenerateDesignError)

DEFAULT_K = 5
DEFAULT_B = 500


def _write_json(payload: dict, path: Path) -> None:
    with path.open("w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_config_file(path: str | None) -> dict:
    """key = value defaults; flags given on the command line win."""
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise SpecError(f"config file not found: {p}")
    out = {}
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise SpecError(f"{p}:{lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _resolve(args, config: dict, key: str, cast, default):
    """Precedence: explicit flag > config file > default."""
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if key in config:
        try:
            return cast(config[key])
        except ValueError as exc:
            raise SpecError(f"config key {key}: {exc}") from None
    return default


def _parse_features(text: str) -> tuple[int, ...]:
    try:
        feats = tuple(int(tok) for tok in text.split(",") if tok.strip())
    except ValueError:
        raise SpecError(f"features must be comma-separated integers, got {text!r}") from None
    if not feats:
        raise SpecError("features list is empty")
    return feats


def _cast_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _load_inputs(args) -> tuple:
    """Return (frame, truth, realized-or-None, input manifest entry)."""
    if getattr(args, "input", None) and getattr(args, "scenario", None):
        raise SpecError("give either --input or --scenario, not both")
    if getattr(args, "scenario", None):
        scenario = parse_scenario(args.scenario)
        if getattr(args, "seed", None) is not None:
            scenario = Scenario(
                spec=scenario.spec,
                config=scenario.config,
                replicates=scenario.replicates,
                seed=args.seed,
                reference_layout=scenario.reference_layout,
            )
        realized = realize_scenario(scenario)
        entry = {"scenario": str(args.scenario), "seed": scenario.seed}
        return realized.frame, realized.truth, realized, entry
    if getattr(args, "input", None):
        frame = load_frame(args.input)
        return frame, None, None, {"input": str(args.input)}
    raise SpecError("an --input CSV or a --scenario file is required")


def _outdir(args) -> Path:
    out = Path(args.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(command: str, options: dict, input_entry: dict, path: Path) -> None:
    _write_json(
        {
            "command": command,
            "input": input_entry,
            "options": options,
            "version": __version__,
        },
        path,
    )


def cmd_tune(args) -> int:
    config = _read_config_file(args.config)
    k_min = _resolve(args, config, "k_min", int, 1)
    k_max = _resolve(args, config, "k_max", int, 20)
    folds = _resolve(args, config, "folds", int, 5)
    seed = _resolve(args, config, "seed", int, 0)
    features_text = _resolve(args, config, "features", str, None)
    if k_min < 1 or k_max < k_min:
        raise SpecError(f"need 1 <= k_min <= k_max, got [{k_min}, {k_max}]")
    frame, _, realized, input_entry = _load_inputs(args)
    fold_seed = realized.fold_seed if realized is not None else seed
    subsets = (
        "all" if features_text is None else [FeatureMask(_parse_features(features_text))]
    )
    result = grid_search(
        frame,
        k_range=range(k_min, k_max + 1),
        feature_subsets=subsets,
        n_folds=folds,
        seed=fold_seed,
        n_threads=args.threads,
    )
    out = _outdir(args)
    write_grid_csv(result, out / "grid.csv")
    chosen = {
        "k": result.best.k,
        "features": list(result.best.mask.included),
        "test_error": result.best.test_error,
        "grid_points": len(result.table),
    }
    _write_json(chosen, out / "chosen.json")
    _manifest(
        "tune",
        {
            "features": features_text,
            "folds": folds,
            "k_max": k_max,
            "k_min": k_min,
            "seed": seed,
        },
        input_entry,
        out / "manifest.json",
    )
    print(
        f"chosen k={result.best.k} features={result.best.mask.label()} "
        f"cv_error={result.best.test_error!r}"
    )
    return EXIT_OK


def _fh_block(frame, truth, experiment, uc_seed):
    """FH columns for the estimate report (optionally degraded covariates)."""
    cov = None
    if experiment is not None:
        cov = apply_undercoverage(frame, experiment, seed=uc_seed)
    inputs = fh_mod.direct_estimates(frame, covariate_frame=cov)
    model = fh_mod.fit_fh(inputs)
    pred = fh_mod.fh_predict_mse(model, inputs)
    lo = pred.t_fh - NORMAL_CI_MULTIPLIER * pred.rtmse
    hi = pred.t_fh + NORMAL_CI_MULTIPLIER * pred.rtmse
    agg = {
        "experiment": experiment,
        "gamma_mean": float(model.gamma.mean()),
        "n_floored_variances": int(inputs.floored.sum()),
        "sigma2_u": model.sigma2_u,
        "t_fh_national": float(pred.t_fh.sum()),
        "used_fallback": model.fit.used_fallback,
    }
    if truth is not None:
        agg["aaee"] = float(np.abs(pred.t_fh - truth).mean())
        agg["coverage"] = float(((lo <= truth) & (truth <= hi)).mean())
        pos = pred.t_fh > 0
        agg["arrtmse"] = (
            float((pred.rtmse[pos] / pred.t_fh[pos]).mean()) if pos.any() else None
        )
    return inputs, pred, lo, hi, agg


def _write_estimate_csv(path: Path, report, fh_parts, truth) -> None:
    """Per-area CSV: hybrid block and/or FH block side by side."""
    cols: list[tuple[str, list]] = []
    if report is not None:
        m = report.n_areas
        cols.append(("area", [int(v) for v in report.area]))
        for name, arr in (
            ("t_hat", report.t_hat),
            ("var_hat", report.var_hat),
            ("e_boot", report.e_boot),
            ("bias_rel", report.bias_rel),
        ):
            cols.append((name, [repr(float(v)) for v in arr]))
        cols.append(("bias_method", list(report.bias_method)))
        for name, arr in (
            ("mse", report.mse),
            ("rtmse", report.rtmse),
            ("ci_lo", report.ci_lo),
            ("ci_hi", report.ci_hi),
        ):
            cols.append((name, [repr(float(v)) for v in arr]))
    if fh_parts is not None:
        inputs, pred, lo, hi, _ = fh_parts
        m = inputs.area.size
        if report is None:
            cols.append(("area", [int(v) for v in inputs.area]))
        for name, arr in (
            ("fh_direct", inputs.direct),
            ("fh_t", pred.t_fh),
            ("fh_rtmse", pred.rtmse),
            ("fh_ci_lo", lo),
            ("fh_ci_hi", hi),
        ):
            cols.append((name, [repr(float(v)) for v in arr]))
    if truth is not None:
        cols.append(("truth", [repr(float(v)) for v in truth]))
        if report is not None:
            cols.append(("covered", [int(v) for v in report.covered]))
        if fh_parts is not None:
            _, pred, lo, hi, _ = fh_parts
            fh_cov = (lo <= truth) & (truth <= hi)
            cols.append(("fh_covered", [int(v) for v in fh_cov]))
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([name for name, _ in cols])
        for i in range(m):
            writer.writerow([values[i] for _, values in cols])


def cmd_estimate(args) -> int:
    config = _read_config_file(args.config)
    seed = _resolve(args, config, "seed", int, 0)
    k = _resolve(args, config, "k", int, DEFAULT_K)
    tune = args.tune or (
        "tune" in config and _cast_bool(config["tune"]) and not args.no_tune
    )
    features_text = _resolve(args, config, "features", str, None)
    n_resamples = _resolve(args, config, "b", int, None)
    target_cv = _resolve(args, config, "target_cv", float, None)
    k_max = _resolve(args, config, "k_max", int, 20)
    folds = _resolve(args, config, "folds", int, 5)
    estimators = _resolve(args, config, "estimators", str, "hybrid")
    if estimators not in ("hybrid", "fh", "both"):
        raise SpecError(f"estimators must be hybrid, fh, or both, got {estimators!r}")
    experiment = _resolve(args, config, "experiment", int, None)

    frame, truth, realized, input_entry = _load_inputs(args)
    fold_seed = realized.fold_seed if realized is not None else seed
    boot_seed = realized.bootstrap_seed if realized is not None else seed

    report = None
    hybrid_payload = {}
    run_hybrid = estimators in ("hybrid", "both")
    if run_hybrid:
        if tune:
            grid = grid_search(
                frame,
                k_range=range(1, k_max + 1),
                feature_subsets="all",
                n_folds=folds,
                seed=fold_seed,
                n_threads=args.threads,
            )
            k, mask = grid.best.k, grid.best.mask
        else:
            included = (
                _parse_features(features_text)
                if features_text is not None
                else tuple(range(frame.p_max))
            )
            mask = FeatureMask(included)

        est = hybrid_estimate(frame, k, mask, n_threads=args.threads)
        if est.calibration.diagnostics.fallback:
            print(
                "warning: calibration fallback - rank totals were degenerate, "
                f"uniform weights kept, residual {est.calibration.diagnostics.residual!r}",
                file=sys.stderr,
            )
        psi = pseudo_values(frame, est.imputation.usage)
        pilot = None
        if target_cv is not None:
            pilot = pilot_cv(psi, boot_seed)
            n_resamples = bootstrap_size(target_cv)
        elif n_resamples is None:
            n_resamples = DEFAULT_B
        boot = fixed_k_bootstrap(psi, n_resamples, boot_seed, n_threads=args.threads)
        bias = estimate_bias(frame, k, mask, est.calibration.w, n_threads=args.threads)
        report = assemble_report(est.per_area, boot, bias, truth=truth)
        integ = est.calibration.integrator
        hybrid_payload = {
            "aggregates": report.aggregates(),
            "calibration": {
                "fallback": est.calibration.diagnostics.fallback,
                "residual": est.calibration.diagnostics.residual,
                "t_cknn": est.calibration.t_cknn,
                "t_knn": est.calibration.t_knn,
                "w": [float(v) for v in est.calibration.w],
                "weights_outside_unit_interval": (
                    est.calibration.diagnostics.weights_outside_unit_interval
                ),
            },
            "features": list(mask.included),
            "k": k,
            "n_resamples": n_resamples,
            "pilot_cv_at_100": pilot,
            "national": {
                "n_big": integ.n_b,
                "n_missed": integ.n_c,
                "t_b": integ.t_b,
                "t_d": integ.t_d,
                "t_p": integ.t_p,
            },
            "tuned": bool(tune),
        }

    fh_parts = None
    if estimators in ("fh", "both"):
        uc_seed = (
            realized.undercoverage_seeds[experiment - 1]
            if realized is not None and experiment is not None
            else seed
        )
        fh_parts = _fh_block(frame, truth, experiment, uc_seed)

    out = _outdir(args)
    _write_estimate_csv(out / "report.csv", report, fh_parts, truth)
    payload = dict(hybrid_payload)
    if fh_parts is not None:
        payload["fh"] = fh_parts[4]
    _write_json(payload, out / "estimate.json")
    aggregates: dict = {}
    if report is not None:
        aggregates["hybrid"] = report.aggregates()
    if fh_parts is not None:
        aggregates["fh"] = fh_parts[4]
    _write_json(aggregates, out / "aggregates.json")
    _manifest(
        "estimate",
        {
            "b": n_resamples,
            "estimators": estimators,
            "experiment": experiment,
            "features": list(mask.included) if run_hybrid else None,
            "folds": folds if tune else None,
            "k": k if run_hybrid else None,
            "k_max": k_max if tune else None,
            "seed": seed,
            "target_cv": target_cv,
            "tuned": bool(tune) if run_hybrid else None,
        },
        input_entry,
        out / "manifest.json",
    )
    if run_hybrid:
        print(
            f"national total t_p={integ.t_p!r} (big-data stratum {integ.t_b!r}, "
            f"k={k}, features={mask.label()})"
        )
    else:
        print(f"fh national total {fh_parts[4]['t_fh_national']!r}")
    return EXIT_OK


def _write_fh_csv(path: Path, inputs, pred, truth) -> None:
    lo = pred.t_fh - NORMAL_CI_MULTIPLIER * pred.rtmse
    hi = pred.t_fh + NORMAL_CI_MULTIPLIER * pred.rtmse
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        header = [
            "area",
            "direct",
            "var_direct",
            "var_floored",
            "n_sampled",
            "t_fh",
            "mse",
            "g1",
            "g2",
            "g3",
            "ci_lo",
            "ci_hi",
        ]
        if truth is not None:
            header += ["truth", "abs_err", "covered"]
        writer.writerow(header)
        for i in range(inputs.area.size):
            row = [
                int(inputs.area[i]),
                repr(float(inputs.direct[i])),
                repr(float(inputs.var_direct[i])),
                int(inputs.floored[i]),
                int(inputs.n_sampled[i]),
                repr(float(pred.t_fh[i])),
                repr(float(pred.mse[i])),
                repr(float(pred.g1[i])),
                repr(float(pred.g2[i])),
                repr(float(pred.g3[i])),
                repr(float(lo[i])),
                repr(float(hi[i])),
            ]
            if truth is not None:
                covered = bool(lo[i] <= truth[i] <= hi[i])
                row += [
                    repr(float(truth[i])),
                    repr(float(abs(pred.t_fh[i] - truth[i]))),
                    int(covered),
                ]
            writer.writerow(row)


def cmd_fh(args) -> int:
    config = _read_config_file(args.config)
    seed = _resolve(args, config, "seed", int, 0)
    experiment = _resolve(args, config, "experiment", int, None)
    frame, truth, realized, input_entry = _load_inputs(args)
    cov = None
    if experiment is not None:
        uc_seed = (
            realized.undercoverage_seeds[experiment - 1]
            if realized is not None
            else seed
        )
        cov = apply_undercoverage(frame, experiment, seed=uc_seed)
    inputs = fh_mod.direct_estimates(frame, covariate_frame=cov)
    model = fh_mod.fit_fh(inputs)
    pred = fh_mod.fh_predict_mse(model, inputs)

    out = _outdir(args)
    _write_fh_csv(out / "fh_report.csv", inputs, pred, truth)
    payload = {
        "beta": {name: float(b) for name, b in zip(model.columns, model.beta)},
        "experiment": experiment,
        "fit": {
            "converged": model.fit.converged,
            "iterations": model.fit.iterations,
            "method": model.fit.method,
            "used_fallback": model.fit.used_fallback,
        },
        "gamma_mean": float(model.gamma.mean()),
        "n_floored_variances": int(inputs.floored.sum()),
        "sigma2_u": model.sigma2_u,
        "t_fh_national": float(pred.t_fh.sum()),
    }
    if truth is not None:
        payload["aaee"] = float(np.abs(pred.t_fh - truth).mean())
        lo = pred.t_fh - NORMAL_CI_MULTIPLIER * pred.rtmse
        hi = pred.t_fh + NORMAL_CI_MULTIPLIER * pred.rtmse
        payload["coverage"] = float(((lo <= truth) & (truth <= hi)).mean())
    _write_json(payload, out / "fh.json")
    _manifest(
        "fh",
        {"experiment": experiment, "seed": seed},
        input_entry,
        out / "manifest.json",
    )
    print(
        f"fh fitted: sigma2_u={model.sigma2_u!r} method={model.fit.method} "
        f"national={float(pred.t_fh.sum())!r}"
    )
    return EXIT_OK


def cmd_simulate(args) -> int:
    config = _read_config_file(args.config)
    scenario = parse_scenario(args.scenario)
    replicates = _resolve(args, config, "replicates", int, scenario.replicates)
    seed = _resolve(args, config, "seed", int, scenario.seed)
    sim_config = scenario.config
    if args.threads != 1:
        import dataclasses

        sim_config = dataclasses.replace(sim_config, n_threads=args.threads)
    report = run_monte_carlo(scenario.spec, replicates, sim_config, seed)

    out = _outdir(args)
    keys = sorted({k for row in report.rows for k in row})
    with (out / "replicates.csv").open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(keys)
        for row in report.rows:
            line = []
            for key in keys:
                v = row.get(key)
                if v is None:
                    line.append("")
                elif isinstance(v, bool):
                    line.append(int(v))
                elif isinstance(v, float):
                    line.append(repr(v))
                else:
                    line.append(v)
            writer.writerow(line)
    payload = {"aggregates": report.aggregates, "n_replicates": report.n_replicates}
    if report.efficiency is not None:
        eff = report.efficiency
        payload["efficiency"] = {
            "mean_t_a": eff.mean_t_a,
            "mean_t_p": eff.mean_t_p,
            "ratio_empirical": eff.ratio_empirical,
            "ratio_theory": eff.ratio_theory,
            "s2": eff.s2,
            "s2_c": eff.s2_c,
            "t_true": eff.t_true,
            "var_t_a": eff.var_t_a,
            "var_t_p": eff.var_t_p,
            "w_b": eff.w_b,
            "ybar_c": eff.ybar_c,
        }
    if report.truth is not None:
        payload["truth_national"] = float(report.truth.sum())
    _write_json(payload, out / "mc.json")
    _manifest(
        "simulate",
        {"replicates": replicates, "seed": seed},
        {"scenario": str(args.scenario)},
        out / "manifest.json",
    )
    shown = {
        k: v
        for k, v in report.aggregates.items()
        if k.startswith(("mean_hybrid_aaee", "mean_fh_aaee", "median_"))
    }
    print(f"simulated {replicates} replicate(s); aggregates: {json.dumps(shown, sort_keys=True)}")
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.output_dir)
    if not out.exists():
        raise SpecError(f"output directory not found: {out}")
    found = False
    for name in ("manifest.json", "chosen.json", "estimate.json", "fh.json", "mc.json"):
        path = out / name
        if path.exists():
            found = True
            print(f"== {name} ==")
            print(path.read_text().rstrip())
    if not found:
        raise SpecError(f"no result files in {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cknn",
        description="Calibrated kNN hybrid small-area estimation",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_output=True):
        p.add_argument("--input", help="unit-level CSV frame")
        p.add_argument("--scenario", help="scenario file (synthetic data)")
        p.add_argument("--config", help="key = value defaults file")
        if needs_output:
            p.add_argument("--output-dir", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--threads", type=int, default=1)

    p_tune = sub.add_parser("tune", help="cross-validated choice of k and features")
    common(p_tune)
    p_tune.add_argument("--k-min", dest="k_min", type=int, default=None)
    p_tune.add_argument("--k-max", dest="k_max", type=int, default=None)
    p_tune.add_argument("--folds", type=int, default=None)
    p_tune.add_argument(
        "--features",
        default=None,
        help="restrict the grid to this one feature subset (0-based, comma-separated)",
    )
    p_tune.set_defaults(func=cmd_tune)

    p_est = sub.add_parser("estimate", help="calibrated kNN small-area estimates")
    common(p_est)
    p_est.add_argument("--k", type=int, default=None)
    p_est.add_argument(
        "--features", default=None, help="comma-separated feature indices (0-based)"
    )
    p_est.add_argument("--tune", action="store_true", help="grid-search k and features first")
    p_est.add_argument(
        "--no-tune", action="store_true", help="override tune=true from a config file"
    )
    p_est.add_argument("--k-max", dest="k_max", type=int, default=None)
    p_est.add_argument("--folds", type=int, default=None)
    p_est.add_argument("--b", type=int, default=None, help="bootstrap resamples")
    p_est.add_argument(
        "--target-cv",
        dest="target_cv",
        type=float,
        default=None,
        help="pick the resample count from a target CV of the variance",
    )
    p_est.add_argument(
        "--estimators", choices=("hybrid", "fh", "both"), default=None
    )
    p_est.add_argument("--experiment", type=int, choices=(1, 2), default=None)
    p_est.set_defaults(func=cmd_estimate)

    p_fh = sub.add_parser("fh", help="Fay-Herriot EBLUP baseline")
    common(p_fh)
    p_fh.add_argument("--experiment", type=int, choices=(1, 2), default=None)
    p_fh.set_defaults(func=cmd_fh)

    p_sim = sub.add_parser("simulate", help="Monte Carlo over a scenario")
    p_sim.add_argument("--scenario", required=True)
    p_sim.add_argument("--config", help="key = value defaults file")
    p_sim.add_argument("--output-dir", required=True)
    p_sim.add_argument("--replicates", type=int, default=None)
    p_sim.add_argument("--seed", type=int, default=None)
    p_sim.add_argument("--threads", type=int, default=1)
    p_sim.set_defaults(func=cmd_simulate)

    p_rep = sub.add_parser("report", help="print results from an output directory")
    p_rep.add_argument("--output-dir", required=True)
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _CAPACITY as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except ConvergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except _INVALID as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except CknnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
