"""Monitored sequences and the Monte Carlo experiments built on them.

Per-step quantities for a filter run against a reference covariance
R_ref:

* ``maha_sq_per_d``: nondimensionalized Mahalanobis error
  ``(1/d) e.T (C + rho I)^{-1} e`` of the posterior mean,
* ``lam`` / ``mu``: two-sided concentration ratios of the forecast
  sample covariance around its conditional mean (the mu base carries
  ``tau rho I``, the lam base ``r tau rho I``),
* ``nu``: Loewner ratio of the posterior covariance to R_ref, floored
  at 1,
* ``chi``: excess of the first discarded eigenvalue over rho,
* ``cov_fidelity``: the raw (unfloored) ratio ``||C R_ref^{-1}||``.

Experiments: filter diagnostics over seeds, sample-covariance
concentration (rare-event sweep over K and a tail-shape check),
paired-run exponential stability, and small-noise accuracy scaling.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.linalg

from .enkf import EnkfConfig, EnkfFilter
from .linalg import factor_matrix, loewner_ratio, mahalanobis_sq, symmetrize
from .models import (
    DOMAIN_TRIAL,
    CoefficientStream,
    StepCoefficients,
    simulate_truth,
    substream,
)
from .reference import AugmentedRiccatiState, _dense, augmented_riccati_step

__all__ = [
    "FilterDiagnostics",
    "ConcentrationTrial",
    "compute_lambda_mu",
    "compute_nu",
    "run_filter_experiment",
    "run_concentration_experiment",
    "run_stability_experiment",
    "run_accuracy_experiment",
    "write_csv",
    "write_json",
]

CSV_COLUMNS = (
    "step",
    "maha_sq_per_d",
    "l2_error",
    "nu",
    "lambda",
    "mu",
    "chi",
    "cov_fidelity",
)


@dataclass
class FilterDiagnostics:
    """One step of monitored quantities (lam/mu/nu/chi are floored at 1)."""

    step: int
    maha_sq_per_d: float
    l2_error: float
    lam: float
    mu: float
    nu: float
    chi: float
    cov_fidelity: float


@dataclass
class ConcentrationTrial:
    """One concentration draw: realized ratios and the rare-event flag."""

    d: int
    p: int
    K: int
    rho: float
    delta: float
    lam: float
    mu: float
    in_rare_event: bool


def compute_lambda_mu(C_hat_taurho, A, C_prev, Sigma_plus, r, tau, rho):
    """Concentration ratios of the forecast covariance around its mean.

    ``lam = max(1, ratio(C_hat^{tau rho}, r A C A.T + r Sigma+ + r tau rho I))``
    and ``mu`` bounds the inverse side against the base with ``tau rho I``
    (not ``r tau rho I``); it is computed as a generalized eigenvalue of
    the un-inverted pencil, since ``X^{-1} <= m Y^{-1}`` iff ``Y <= m X``
    for positive definite X, Y.
    """
    A = _dense(A)
    base = r * (A @ _dense(C_prev) @ A.T) + r * _dense(Sigma_plus)
    d = base.shape[0]
    lam = max(1.0, loewner_ratio(C_hat_taurho, symmetrize(base + r * tau * rho * np.eye(d))))
    mu = max(1.0, loewner_ratio(symmetrize(base + tau * rho * np.eye(d)), C_hat_taurho))
    return lam, mu


def compute_nu(C, R_ref) -> float:
    """Floored Loewner ratio ``max(1, inf{nu: C <= nu R_ref})``."""
    return max(1.0, loewner_ratio(C, R_ref))


def _long_run_reference(stream, cfg, burn_in: int = 200) -> np.ndarray:
    """Long-run augmented Riccati iterate (stationary-benchmark noise)."""
    d = stream.d
    state = AugmentedRiccatiState(cov=np.zeros((d, d)), r=cfg.r, tau=cfg.tau, rho=cfg.rho)
    eye = np.eye(d)
    for n in range(burn_in):
        coeffs = stream.at(n)
        sp = cfg.r**2 * _dense(coeffs.Sigma) + cfg.tau * cfg.rho * eye
        state = augmented_riccati_step(state, coeffs, sigma_prime=sp)
    return state.cov


def run_filter_experiment(
    stream: CoefficientStream,
    cfg: EnkfConfig,
    T: int,
    seeds: Sequence[int],
    r_ref=None,
    x0=None,
    init_mean=None,
):
    """Run truth + filter per seed and collect full diagnostics.

    ``r_ref`` is the reference covariance for nu / cov_fidelity; when
    omitted it is the 200-step augmented Riccati iterate. Returns
    ``(per_seed, aggregate)`` where ``per_seed`` maps seed to a list of
    :class:`FilterDiagnostics` and ``aggregate`` holds per-step mean and
    (0.1, 0.5, 0.9) quantiles of the error quantities across seeds.
    """
    d = stream.d
    if r_ref is None:
        r_ref = _long_run_reference(stream, cfg)
    r_ref = _dense(r_ref)
    x0 = np.zeros(d) if x0 is None else np.asarray(x0, dtype=float)
    per_seed = {}
    for seed in seeds:
        truth = simulate_truth(stream, x0, T, seed)
        filt = EnkfFilter(stream, cfg, seed, init_mean=init_mean)
        series = []
        for n in range(T):
            coeffs = stream.at(n)
            C_prev = filt.ensemble.covariance()
            Sigma_plus = factor_matrix(filt._factor_for(coeffs))
            y = truth.observations[n] if truth.observations is not None else None
            rec = filt.step(y)
            S_hat = rec.forecast_spread
            K = S_hat.shape[1]
            C_hat_taurho = symmetrize(
                S_hat @ S_hat.T / (K - 1) + cfg.tau * cfg.rho * np.eye(d)
            )
            lam, mu = compute_lambda_mu(
                C_hat_taurho, coeffs.A, C_prev, Sigma_plus, cfg.r, cfg.tau, cfg.rho
            )
            C_post = rec.posterior.covariance()
            e = filt.ensemble.mean - truth.states[n + 1]
            maha = mahalanobis_sq(e, C_post + cfg.rho * np.eye(d)) / d
            series.append(
                FilterDiagnostics(
                    step=n + 1,
                    maha_sq_per_d=float(maha),
                    l2_error=float(np.linalg.norm(e)),
                    lam=float(lam),
                    mu=float(mu),
                    nu=float(compute_nu(C_post, r_ref)),
                    chi=float(rec.chi),
                    cov_fidelity=float(loewner_ratio(C_post, r_ref)),
                )
            )
        per_seed[seed] = series
    aggregate = []
    for n in range(T):
        rows = [per_seed[s][n] for s in seeds]
        agg = {"step": n + 1}
        for name in ("maha_sq_per_d", "l2_error", "nu", "cov_fidelity"):
            vals = np.array([getattr(x, name) for x in rows])
            agg[f"{name}_mean"] = float(vals.mean())
            q = np.quantile(vals, (0.1, 0.5, 0.9))
            agg[f"{name}_q10"], agg[f"{name}_q50"], agg[f"{name}_q90"] = map(float, q)
        aggregate.append(agg)
    return per_seed, aggregate


def _concentration_trial(
    p: int,
    K: int,
    rho: float,
    delta: float,
    sig_vals: np.ndarray,
    rng,
    cond_target: Optional[float],
    d: int,
) -> ConcentrationTrial:
    """One draw of the whitened sample-covariance ratios.

    Signal vectors and noise live in the same rank-p subspace, so the
    d-dimensional Loewner ratios reduce exactly to the p-dimensional
    block: the orthocomplement contributes 0 to the lam side and ratio 1
    to the mu side.
    """
    if cond_target is not None:
        a = rng.standard_normal((p, K))
        C_raw = a @ a.T / (K - 1)
        lmax = float(np.linalg.eigvalsh(C_raw)[-1])
        a *= np.sqrt((cond_target - 1.0) * rho / lmax)
    else:
        a = np.zeros((p, K))
    xi = np.sqrt(sig_vals)[:, None] * rng.standard_normal((p, K))
    xi -= xi.mean(axis=1, keepdims=True)
    zv = a + xi
    Z = zv @ zv.T / (K - 1)
    D = a @ a.T / (K - 1) + np.diag(sig_vals)
    eyep = np.eye(p)
    lam = float(
        scipy.linalg.eigh(
            symmetrize(Z), symmetrize(D + rho * eyep), eigvals_only=True
        )[-1]
    )
    lam = max(lam, 0.0)
    mu = float(
        scipy.linalg.eigh(
            symmetrize(D + rho * eyep), symmetrize(Z + rho * eyep), eigvals_only=True
        )[-1]
    )
    mu = max(mu, 1.0)  # orthocomplement block of the pencil sits at 1
    thr = 1.0 + 5.0 * delta
    return ConcentrationTrial(
        d=d, p=p, K=K, rho=rho, delta=delta, lam=lam, mu=mu,
        in_rare_event=bool(lam > thr or mu > thr),
    )


def run_concentration_experiment(
    d: int,
    p: int,
    K_list: Sequence[int],
    rho: float,
    delta: float,
    trials: int,
    seed: int,
    cond_targets: Sequence[float] = (10.0, 1e3),
    tail_K: int = 3,
    tail_trials: int = 20000,
    tail_t_grid: Sequence[float] = (0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0),
    tail_min_count: int = 20,
):
    """Empirical concentration of sample covariances, two sub-experiments.

    Rare-event sweep: for each K in ``K_list`` and each condition-number
    target, estimate ``P(lam > 1+5 delta or mu > 1+5 delta)`` over
    ``trials`` draws with signal vectors scaled so
    ``cond(C + rho I) = cond_target``.

    Tail: with zero signal and a small ensemble (``tail_K``, where large
    deviations of ``lam`` are observable at all), estimate
    ``P(lam > 8 + t)`` over the t grid; grid points with fewer than
    ``tail_min_count`` hits are dropped from the returned fit points.

    Returns a dict with "rare_event" rows, "tail" rows, and the
    log-linear tail fit (slope, intercept, r_squared).
    """
    sig_vals = np.linspace(1.0, 2.0, p)
    rare_rows = []
    for ci, cond in enumerate(cond_targets):
        for ki, K in enumerate(K_list):
            hits = 0
            for t in range(trials):
                rng = substream(seed, DOMAIN_TRIAL, ci, ki, t)
                trial = _concentration_trial(
                    p, K, rho, delta, sig_vals, rng, cond, d
                )
                hits += trial.in_rare_event
            rare_rows.append(
                {
                    "K": int(K),
                    "cond_target": float(cond),
                    "trials": int(trials),
                    "hits": int(hits),
                    "prob": hits / trials,
                }
            )
    lam_samples = np.empty(tail_trials)
    for t in range(tail_trials):
        rng = substream(seed, DOMAIN_TRIAL, 999, t)
        trial = _concentration_trial(p, tail_K, rho, delta, sig_vals, rng, None, d)
        lam_samples[t] = trial.lam
    tail_rows = []
    for tv in tail_t_grid:
        count = int(np.count_nonzero(lam_samples > 8.0 + tv))
        tail_rows.append(
            {"t": float(tv), "count": count, "prob": count / tail_trials}
        )
    fit_pts = [(row["t"], row["prob"]) for row in tail_rows if row["count"] >= tail_min_count]
    fit = {"slope": float("nan"), "intercept": float("nan"), "r_squared": float("nan")}
    if len(fit_pts) >= 3:
        ts = np.array([x[0] for x in fit_pts])
        logs = np.log(np.array([x[1] for x in fit_pts]))
        slope, intercept = np.polyfit(ts, logs, 1)
        pred = slope * ts + intercept
        ss_res = float(np.sum((logs - pred) ** 2))
        ss_tot = float(np.sum((logs - logs.mean()) ** 2))
        fit = {
            "slope": float(slope),
            "intercept": float(intercept),
            "r_squared": 1.0 - ss_res / ss_tot if ss_tot > 0 else float("nan"),
        }
    return {
        "rare_event": rare_rows,
        "tail": tail_rows,
        "tail_fit": fit,
        "tail_K": int(tail_K),
        "tail_trials": int(tail_trials),
        "params": {
            "d": int(d), "p": int(p), "rho": float(rho), "delta": float(delta),
            "K_list": [int(k) for k in K_list],
            "cond_targets": [float(c) for c in cond_targets],
            "trials": int(trials), "seed": int(seed),
        },
    }


GAP_FLOOR = 1e3 * np.finfo(float).eps


def run_stability_experiment(
    stream: CoefficientStream,
    cfg: EnkfConfig,
    T: int,
    shift_magnitudes: Sequence[float],
    seeds: Sequence[int],
):
    """Paired shifted-initialization runs and their gap decay rates.

    For each (shift, seed): two filters share every noise substream and
    the same observations; the second starts with its initial mean
    shifted by ``shift * e_1``. Reports the log-linear slope of the mean
    gap over steps where the gap exceeds ``1e3 * machine epsilon``, and
    whether the spread matrices stayed bitwise identical (they must, as
    spreads never see the mean).
    """
    d = stream.d
    rows = []
    for shift in shift_magnitudes:
        delta0 = np.zeros(d)
        delta0[0] = shift
        for seed in seeds:
            truth = simulate_truth(stream, np.zeros(d), T, seed)
            f1 = EnkfFilter(stream, cfg, seed, init_mean=np.zeros(d))
            f2 = EnkfFilter(stream, cfg, seed, init_mean=delta0)
            gaps = np.empty(T)
            spreads_identical = True
            for n in range(T):
                y = truth.observations[n] if truth.observations is not None else None
                f1.step(y)
                f2.step(y)
                gaps[n] = np.linalg.norm(f1.ensemble.mean - f2.ensemble.mean)
                if not np.array_equal(f1.ensemble.spread, f2.ensemble.spread):
                    spreads_identical = False
            mask = gaps > GAP_FLOOR
            if shift == 0 or int(mask.sum()) < 2:
                slope = float("nan")
            else:
                steps = np.arange(1, T + 1)[mask]
                slope = float(np.polyfit(steps, np.log(gaps[mask]), 1)[0])
            rows.append(
                {
                    "shift": float(shift),
                    "seed": int(seed),
                    "slope": slope,
                    "n_points": int(mask.sum()),
                    "spreads_identical": bool(spreads_identical),
                    "final_gap": float(gaps[-1]),
                }
            )
    return rows


def _scaled_stream(stream: CoefficientStream, eps: float) -> CoefficientStream:
    """Noise-rescaled system: Sigma -> eps^2 Sigma, obs noise -> eps^2 I.

    The observation rescaling is expressed with unit noise as
    ``H -> H / eps`` (and observations divided by eps, which
    simulate_truth then produces directly).
    """
    base0 = stream.at(0)
    homogeneous = base0 is stream.at(1)

    def scale(c: StepCoefficients) -> StepCoefficients:
        H = None if c.H is None else c.H / eps
        return StepCoefficients(A=c.A, B=c.B, Sigma=c.Sigma * (eps * eps), H=H)

    if homogeneous:
        scaled0 = scale(base0)

        def generator(n, rng):
            return scaled0

    else:

        def generator(n, rng):
            return scale(stream.at(n))

    return CoefficientStream(d=stream.d, q=stream.q, generator=generator, seed=stream.seed)


def run_accuracy_experiment(
    stream: CoefficientStream,
    cfg: EnkfConfig,
    T: int,
    eps_list: Sequence[float],
    seeds: Sequence[int],
):
    """Small-noise scaling: error should shrink linearly with eps.

    For each eps the system noise, observation noise, and threshold are
    scaled (Sigma -> eps^2 Sigma, obs noise -> eps^2 I, rho -> eps^2 rho)
    and the filter reruns; the row reports the time-averaged l2 error
    over the last half of the run, averaged across seeds.
    """
    rows = []
    for eps in eps_list:
        if eps <= 0:
            raise ValueError("eps values must be positive")
        s_stream = _scaled_stream(stream, eps)
        s_cfg = EnkfConfig(
            K=cfg.K, p=cfg.p, r=cfg.r, rho=eps * eps * cfg.rho, tau=cfg.tau
        )
        errs = []
        for seed in seeds:
            truth = simulate_truth(s_stream, np.zeros(stream.d), T, seed)
            filt = EnkfFilter(s_stream, s_cfg, seed)
            run_err = np.empty(T)
            for n in range(T):
                y = truth.observations[n] if truth.observations is not None else None
                filt.step(y)
                run_err[n] = np.linalg.norm(filt.ensemble.mean - truth.states[n + 1])
            errs.append(run_err[T // 2 :].mean())
        errs = np.array(errs)
        rows.append(
            {
                "eps": float(eps),
                "mean_error": float(errs.mean()),
                "std_error": float(errs.std(ddof=1)) if len(errs) > 1 else 0.0,
                "error_over_eps": float(errs.mean() / eps),
                "seeds": len(errs),
            }
        )
    return rows


def write_csv(series, path, comments: Sequence[str] = ()):
    """Write diagnostics rows with the fixed 8-column layout.

    ``series`` holds :class:`FilterDiagnostics` (or dicts with the same
    keys, where the lam field may be named "lambda"). Floats are
    formatted %.17g so values round-trip exactly; comment lines are
    '#'-prefixed above the header.
    """
    with open(path, "w", newline="") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for row in series:
            if isinstance(row, FilterDiagnostics):
                vals = [
                    row.step, row.maha_sq_per_d, row.l2_error, row.nu,
                    row.lam, row.mu, row.chi, row.cov_fidelity,
                ]
            else:
                vals = [row.get("lambda", row.get("lam")) if c == "lambda" else row[c] for c in CSV_COLUMNS]
            out = [str(int(vals[0]))] + ["%.17g" % float(v) for v in vals[1:]]
            fh.write(",".join(out) + "\n")


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, (bool, int, float, str)) or obj is None:
        return obj
    if hasattr(obj, "__dataclass_fields__"):
        return _jsonable(asdict(obj))
    return str(obj)


def write_json(report, path):
    """Serialize a report (dataclass or dict tree) as indented JSON."""
    with open(path, "w") as fh:
        json.dump(_jsonable(report), fh, indent=2)
        fh.write("\n")
