"""The ``enkf-lab`` command: config parsing, seeding, output wiring.

Subcommands map one-to-one onto the experiment drivers:

* ``simulate``       filter vs truth with full per-step diagnostics
* ``verify-dim``     effective-dimension report for a turbulence model
* ``rmt-experiment`` sample-covariance concentration Monte Carlo
* ``stability``      paired shifted-initialization decay rates
* ``accuracy``       small-noise error scaling

Config files are strict JSON: unknown keys are rejected so that every
parameter in a file is one the run actually consumed. Exit codes:
0 success, 2 config/validation problem (message names the offending
field or path), 1 runtime failure.

Reruns with the same config and seeds write byte-identical files; the
output directory always contains ``manifest.json`` echoing the resolved
config (defaults filled in) and the tool version.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field, fields as dc_fields
from typing import Optional, Sequence

from . import __version__

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _apply_thread_cap():
    """Honor ENKF_LAB_THREADS by capping the usual BLAS pool env vars.

    Best effort: pools already initialized by an earlier numpy import in
    the same process keep their size.
    """
    cap = os.environ.get("ENKF_LAB_THREADS")
    if cap:
        for var in _THREAD_VARS:
            os.environ.setdefault(var, cap)


_apply_thread_cap()

import numpy as np

from .diagnostics import (
    run_accuracy_experiment,
    run_concentration_experiment,
    run_filter_experiment,
    run_stability_experiment,
    write_csv,
    write_json,
)
from .effective_dim import minimal_p_search, verify_dim_observed, verify_dim_unfiltered
from .enkf import EnkfConfig
from .models import InvalidParams, TurbulenceParams, build_turbulence
from .reference import stationary_riccati_ambient

EXPERIMENTS = ("simulate", "verify-dim", "rmt", "stability", "accuracy")

# preset name -> constructor kwargs
MODEL_PRESETS = {
    "kolmogorov-unfiltered": dict(J=50, r=1.1, tau=0.6, rho=0.04),
    "kolmogorov-observed": dict(J=50, r=1.1, tau=0.6, rho=0.04, sigma_obs=10.0),
    "kolmogorov-reduced": dict(J=10, r=1.1, tau=0.6, rho=0.04, sigma_obs=10.0),
}

_MODEL_KEYS = {
    "J", "alpha", "beta", "gamma0", "nu_visc", "E0", "h",
    "omega_spec", "r", "tau", "rho", "sigma_obs",
}
_RMT_KEYS = {
    "d", "p", "K_list", "rho", "delta", "trials", "cond_targets",
    "tail_K", "tail_trials", "tail_t_grid", "tail_min_count",
}
_RMT_DEFAULTS = dict(
    d=200, p=5, K_list=(10, 20, 40, 80), rho=0.1, delta=0.1, trials=2000
)

_COMMON_KEYS = {"experiment", "model", "seeds", "seed", "output_dir"}
_ALLOWED_KEYS = {
    "simulate": _COMMON_KEYS | {"enkf", "T"},
    "verify-dim": _COMMON_KEYS | {"rho_grid"},
    "rmt": _COMMON_KEYS | {"rmt"},
    "stability": _COMMON_KEYS | {"enkf", "T", "shifts"},
    "accuracy": _COMMON_KEYS | {"enkf", "T", "eps_list"},
}


class ParseError(ValueError):
    """Config rejection; ``field`` is the dotted path of the bad entry."""

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        super().__init__(message if field is None else f"{field}: {message}")


@dataclass
class ExperimentConfig:
    """A fully resolved experiment description (defaults filled in)."""

    experiment: str
    model: Optional[TurbulenceParams] = None
    enkf: Optional[EnkfConfig] = None
    T: Optional[int] = None
    seeds: tuple = (0,)
    shifts: tuple = (10.0,)
    eps_list: tuple = (1.0, 0.3, 0.1)
    rmt: Optional[dict] = None
    rho_grid: Optional[tuple] = None
    output_dir: Optional[str] = None
    model_name: Optional[str] = field(default=None, compare=False)


def _require(cond, message, field_name):
    if not cond:
        raise ParseError(message, field=field_name)


def _parse_model(raw) -> tuple:
    if isinstance(raw, str):
        _require(raw in MODEL_PRESETS, f"unknown model preset {raw!r} "
                 f"(known: {', '.join(sorted(MODEL_PRESETS))})", "model")
        return TurbulenceParams(**MODEL_PRESETS[raw]), raw
    _require(isinstance(raw, dict), "model must be a preset name or an object", "model")
    unknown = set(raw) - _MODEL_KEYS
    if unknown:
        key = sorted(unknown)[0]
        raise ParseError(f"unknown key {key!r}", field=f"model.{key}")
    kwargs = dict(raw)
    if "omega_spec" in kwargs and kwargs["omega_spec"] is not None:
        kwargs["omega_spec"] = tuple(float(v) for v in kwargs["omega_spec"])
    kwargs.setdefault("tau", 1.0)  # single-timescale default
    try:
        params = TurbulenceParams(**kwargs)
        params.validate()
    except (InvalidParams, TypeError, ValueError) as exc:
        raise ParseError(str(exc), field="model") from exc
    return params, None


def _parse_seeds(raw) -> tuple:
    if raw is None:
        return (0,)
    if isinstance(raw, dict):
        unknown = set(raw) - {"base", "count"}
        if unknown:
            key = sorted(unknown)[0]
            raise ParseError(f"unknown key {key!r}", field=f"seeds.{key}")
        _require("base" in raw and "count" in raw,
                 "seeds object needs both 'base' and 'count'", "seeds")
        base, count = int(raw["base"]), int(raw["count"])
        _require(count >= 1, "count must be >= 1", "seeds.count")
        return tuple(range(base, base + count))
    _require(isinstance(raw, list) and raw, "seeds must be a nonempty list or {base, count}", "seeds")
    return tuple(int(s) for s in raw)


def load_config(path: str, experiment: Optional[str] = None) -> ExperimentConfig:
    """Parse and validate a JSON experiment config, strictly.

    ``experiment`` (from the subcommand) must agree with the config's
    own "experiment" entry when both are present. Unknown keys anywhere
    are errors naming the key; omitted optional fields take the
    documented defaults (tau defaults to 1).
    """
    if not os.path.exists(path):
        raise ParseError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON in {path} (line {exc.lineno}, column {exc.colno}): {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ParseError(f"config root must be an object: {path}")

    exp = raw.get("experiment", experiment)
    _require(exp is not None, "missing 'experiment' (and no subcommand default)", "experiment")
    _require(exp in EXPERIMENTS, f"must be one of {', '.join(EXPERIMENTS)}", "experiment")
    if experiment is not None and exp != experiment:
        raise ParseError(f"config says {exp!r} but the subcommand is {experiment!r}", field="experiment")

    allowed = _ALLOWED_KEYS[exp]
    unknown = set(raw) - allowed
    if unknown:
        key = sorted(unknown)[0]
        raise ParseError(f"unknown key {key!r} for experiment {exp!r}", field=key)

    cfg = ExperimentConfig(experiment=exp)
    cfg.seeds = _parse_seeds(raw.get("seeds", raw.get("seed")))
    if "output_dir" in raw and raw["output_dir"] is not None:
        _require(isinstance(raw["output_dir"], str), "must be a string", "output_dir")
        cfg.output_dir = raw["output_dir"]

    if exp == "rmt":
        sub = raw.get("rmt", {})
        _require(isinstance(sub, dict), "must be an object", "rmt")
        unknown = set(sub) - _RMT_KEYS
        if unknown:
            key = sorted(unknown)[0]
            raise ParseError(f"unknown key {key!r}", field=f"rmt.{key}")
        merged = dict(_RMT_DEFAULTS)
        merged.update(sub)
        merged["K_list"] = tuple(int(k) for k in merged["K_list"])
        if "cond_targets" in merged:
            merged["cond_targets"] = tuple(float(c) for c in merged["cond_targets"])
        if "tail_t_grid" in merged:
            merged["tail_t_grid"] = tuple(float(t) for t in merged["tail_t_grid"])
        _require(merged["trials"] >= 1, "trials must be >= 1", "rmt.trials")
        cfg.rmt = merged
        return cfg

    model_raw = raw.get("model")
    _require(model_raw is not None, "experiment needs a 'model' section", "model")
    cfg.model, cfg.model_name = _parse_model(model_raw)

    if exp == "verify-dim":
        if raw.get("rho_grid") is not None:
            grid = raw["rho_grid"]
            _require(isinstance(grid, list) and grid, "must be a nonempty list", "rho_grid")
            cfg.rho_grid = tuple(float(v) for v in grid)
        return cfg

    # simulate / stability / accuracy: ensemble + horizon
    enkf_raw = raw.get("enkf")
    _require(enkf_raw is not None, "experiment needs an 'enkf' section", "enkf")
    _require(isinstance(enkf_raw, dict), "must be an object", "enkf")
    unknown = set(enkf_raw) - {"K", "p"}
    if unknown:
        key = sorted(unknown)[0]
        raise ParseError(
            f"unknown key {key!r} (r, tau, rho live in the model section)",
            field=f"enkf.{key}",
        )
    _require("K" in enkf_raw and "p" in enkf_raw, "needs both 'K' and 'p'", "enkf")
    try:
        cfg.enkf = EnkfConfig(
            K=int(enkf_raw["K"]), p=int(enkf_raw["p"]),
            r=cfg.model.r, rho=cfg.model.rho, tau=cfg.model.tau,
        )
    except ValueError as exc:
        raise ParseError(str(exc), field="enkf") from exc
    _require(cfg.enkf.p <= cfg.model.d, f"p={cfg.enkf.p} exceeds model dimension d={cfg.model.d}", "enkf.p")

    T = raw.get("T")
    _require(T is not None, "experiment needs T", "T")
    _require(isinstance(T, int) and not isinstance(T, bool), "must be an integer", "T")
    _require(T >= 1, "T must be >= 1", "T")
    cfg.T = T

    if exp == "stability" and raw.get("shifts") is not None:
        shifts = raw["shifts"]
        _require(isinstance(shifts, list) and shifts, "must be a nonempty list", "shifts")
        cfg.shifts = tuple(float(s) for s in shifts)
    if exp == "accuracy" and raw.get("eps_list") is not None:
        eps = raw["eps_list"]
        _require(isinstance(eps, list) and eps, "must be a nonempty list", "eps_list")
        _require(all(float(e) > 0 for e in eps), "entries must be positive", "eps_list")
        cfg.eps_list = tuple(float(e) for e in eps)
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Resolved, JSON-ready form; load_config of it compares equal."""
    out = {"experiment": cfg.experiment, "seeds": list(cfg.seeds)}
    if cfg.model is not None:
        model = {}
        for f in dc_fields(TurbulenceParams):
            if f.name == "jump_spec":
                continue
            val = getattr(cfg.model, f.name)
            if f.name == "omega_spec" and val is not None:
                val = list(val)
            model[f.name] = val
        out["model"] = model
    if cfg.enkf is not None:
        out["enkf"] = {"K": cfg.enkf.K, "p": cfg.enkf.p}
    if cfg.T is not None:
        out["T"] = cfg.T
    if cfg.experiment == "stability":
        out["shifts"] = list(cfg.shifts)
    if cfg.experiment == "accuracy":
        out["eps_list"] = list(cfg.eps_list)
    if cfg.rmt is not None:
        rmt = {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.rmt.items()}
        out["rmt"] = rmt
    if cfg.rho_grid is not None:
        out["rho_grid"] = list(cfg.rho_grid)
    if cfg.output_dir is not None:
        out["output_dir"] = cfg.output_dir
    return out


def _write_manifest(cfg: ExperimentConfig, out_dir: str):
    manifest = {
        "tool": "enkf-lab",
        "version": __version__,
        "experiment": cfg.experiment,
        "config": config_to_dict(cfg),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_table(path, columns, rows, comments=()):
    with open(path, "w", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            cells = []
            for c in columns:
                v = row[c]
                if isinstance(v, bool):
                    cells.append(str(int(v)))
                elif isinstance(v, (int, np.integer)):
                    cells.append(str(int(v)))
                else:
                    cells.append("%.17g" % float(v))
            fh.write(",".join(cells) + "\n")


def _config_comment(cfg: ExperimentConfig) -> str:
    return "config: " + json.dumps(config_to_dict(cfg), sort_keys=True)


def _reference_for(model: TurbulenceParams):
    if model.sigma_obs is None:
        return None
    return np.diag(stationary_riccati_ambient(model, r=model.r, tau=model.tau, rho=model.rho))


def _run_simulate(cfg: ExperimentConfig, out_dir: str) -> int:
    stream = build_turbulence(cfg.model)
    r_ref = _reference_for(cfg.model)
    per_seed, aggregate = run_filter_experiment(
        stream, cfg.enkf, cfg.T, cfg.seeds, r_ref=r_ref
    )
    for seed, series in per_seed.items():
        write_csv(
            series,
            os.path.join(out_dir, f"diagnostics_seed{seed}.csv"),
            comments=[_config_comment(cfg), f"seed: {seed}"],
        )
    write_json({"aggregate": aggregate}, os.path.join(out_dir, "aggregate.json"))
    last = aggregate[-1]
    print(
        f"simulate: {len(cfg.seeds)} seeds x {cfg.T} steps, final mean l2 error "
        f"{last['l2_error_mean']:.6g}, final mean fidelity {last['cov_fidelity_mean']:.6g}"
    )
    return 0


def _run_verify_dim(cfg: ExperimentConfig, out_dir: str) -> int:
    observed = cfg.model.sigma_obs is not None
    if observed:
        report = verify_dim_observed(cfg.model)
    else:
        report = verify_dim_unfiltered(cfg.model)
    payload = {
        "convention": report.convention,
        "observed": observed,
        "p": report.p,
        "p_instability": report.p_instability,
        "p_covariance": report.p_covariance,
        "p_effective": report.p_effective,
        "pm_instability": report.pm_instability,
        "pm_covariance": report.pm_covariance,
        "pm_effective": report.pm_effective,
        "rho": report.rho,
        "r": report.r,
        "tau": report.tau,
        "failing_modes": list(report.failing_modes),
        "instability_mode_list": list(report.instability_mode_list),
        "table": report.table,
    }
    if cfg.rho_grid is not None:
        payload["minimal_p"] = [
            {"rho": float(rho), "p_effective": int(p)}
            for rho, p in minimal_p_search(cfg.model, cfg.rho_grid)
        ]
    write_json(payload, os.path.join(out_dir, "report.json"))
    print(
        f"verify-dim: p = {report.p} (ambient {report.pm_effective}), "
        f"rho = {report.rho:g}, instability modes = {report.p_instability}"
    )
    return 0


def _run_rmt(cfg: ExperimentConfig, out_dir: str) -> int:
    result = run_concentration_experiment(seed=cfg.seeds[0], **cfg.rmt)
    comments = [_config_comment(cfg), f"seed: {cfg.seeds[0]}"]
    _write_table(
        os.path.join(out_dir, "rare_event.csv"),
        ("K", "cond_target", "trials", "hits", "prob"),
        result["rare_event"],
        comments,
    )
    _write_table(
        os.path.join(out_dir, "tail.csv"),
        ("t", "count", "prob"),
        result["tail"],
        comments,
    )
    write_json(result, os.path.join(out_dir, "report.json"))
    fit = result["tail_fit"]
    print(
        f"rmt-experiment: {len(result['rare_event'])} rare-event rows, "
        f"tail slope {fit['slope']:.4g} (R^2 {fit['r_squared']:.4g})"
    )
    return 0


def _run_stability(cfg: ExperimentConfig, out_dir: str) -> int:
    stream = build_turbulence(cfg.model)
    rows = run_stability_experiment(stream, cfg.enkf, cfg.T, cfg.shifts, cfg.seeds)
    _write_table(
        os.path.join(out_dir, "slopes.csv"),
        ("shift", "seed", "slope", "n_points", "spreads_identical", "final_gap"),
        rows,
        [_config_comment(cfg)],
    )
    slopes = [r["slope"] for r in rows if not np.isnan(r["slope"])]
    frac_neg = float(np.mean([s < 0 for s in slopes])) if slopes else float("nan")
    summary = {
        "rows": rows,
        "fraction_negative_slope": frac_neg,
        "all_spreads_identical": bool(all(r["spreads_identical"] for r in rows)),
    }
    write_json(summary, os.path.join(out_dir, "report.json"))
    print(
        f"stability: {len(rows)} paired runs, "
        f"{100 * frac_neg:.1f}% negative slopes, spreads identical: "
        f"{summary['all_spreads_identical']}"
    )
    return 0


def _run_accuracy(cfg: ExperimentConfig, out_dir: str) -> int:
    stream = build_turbulence(cfg.model)
    rows = run_accuracy_experiment(stream, cfg.enkf, cfg.T, cfg.eps_list, cfg.seeds)
    _write_table(
        os.path.join(out_dir, "accuracy.csv"),
        ("eps", "mean_error", "std_error", "error_over_eps", "seeds"),
        rows,
        [_config_comment(cfg)],
    )
    ratios = [r["error_over_eps"] for r in rows]
    summary = {
        "rows": rows,
        "max_over_min_error_per_eps": float(max(ratios) / min(ratios)),
    }
    write_json(summary, os.path.join(out_dir, "report.json"))
    print(
        f"accuracy: {len(rows)} eps values, error/eps spread factor "
        f"{summary['max_over_min_error_per_eps']:.4g}"
    )
    return 0


_DISPATCH = {
    "simulate": _run_simulate,
    "verify-dim": _run_verify_dim,
    "rmt": _run_rmt,
    "stability": _run_stability,
    "accuracy": _run_accuracy,
}

_SUBCOMMANDS = {
    "simulate": "simulate",
    "verify-dim": "verify-dim",
    "rmt-experiment": "rmt",
    "stability": "stability",
    "accuracy": "accuracy",
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="enkf-lab",
        description="Ensemble Kalman filtering experiments with inflation and spectral projection.",
    )
    parser.add_argument("--version", action="version", version=f"enkf-lab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _SUBCOMMANDS:
        sp = sub.add_parser(name, help=f"run the {name} experiment")
        sp.add_argument("--config", required=True, help="path to a JSON experiment config")
        sp.add_argument("--seed", type=int, default=None, help="override the config's seed list with this single seed")
        sp.add_argument("--out", default=None, help="output directory (default: config output_dir, else ./out/<timestamp>)")
    return parser


def cli_main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    experiment = _SUBCOMMANDS[args.command]
    try:
        cfg = load_config(args.config, experiment=experiment)
        if args.seed is not None:
            cfg.seeds = (args.seed,)
    except ParseError as exc:
        print(f"enkf-lab: config error: {exc}", file=sys.stderr)
        return 2
    out_dir = args.out or cfg.output_dir
    if out_dir is None:
        out_dir = os.path.join("out", time.strftime("%Y%m%d-%H%M%S"))
    try:
        os.makedirs(out_dir, exist_ok=True)
        _write_manifest(cfg, out_dir)
        return _DISPATCH[cfg.experiment](cfg, out_dir)
    except Exception as exc:  # runtime failure, not a config problem
        print(f"enkf-lab: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(cli_main(sys.argv[1:]))


if __name__ == "__main__":
    main()
