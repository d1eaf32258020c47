"""Tests for the monitored ratios, experiments, and writers."""

import csv
import json
import math

import numpy as np
import pytest

from enkf_lab.diagnostics import (
    CSV_COLUMNS,
    ConcentrationTrial,
    FilterDiagnostics,
    compute_lambda_mu,
    compute_nu,
    run_accuracy_experiment,
    run_concentration_experiment,
    run_filter_experiment,
    run_stability_experiment,
    write_csv,
    write_json,
)
from enkf_lab.enkf import EnkfConfig
from enkf_lab.linalg import factor_matrix
from enkf_lab.models import TurbulenceParams, build_turbulence
from enkf_lab.reference import stationary_riccati_ambient


def scalar_bases(a, c, sp, r, tau, rho):
    core = r * (a * a * c + sp)
    return core + r * tau * rho, core + tau * rho


def test_compute_lambda_mu_scalar_floors():
    a, c, sp, r, tau, rho = 0.8, 2.0, 0.3, 1.1, 0.6, 0.04
    b_lam, b_mu = scalar_bases(a, c, sp, r, tau, rho)
    args = ([[a]], [[c]], [[sp]], r, tau, rho)
    lam, mu = compute_lambda_mu(np.array([[b_lam]]), *args)
    assert lam == pytest.approx(1.0) and mu == pytest.approx(1.0)
    lam, mu = compute_lambda_mu(np.array([[2 * b_lam]]), *args)
    assert lam == pytest.approx(2.0, rel=1e-12) and mu == pytest.approx(1.0)
    lam, mu = compute_lambda_mu(np.array([[0.5 * b_lam]]), *args)
    assert lam == pytest.approx(1.0)
    assert mu == pytest.approx(b_mu / (0.5 * b_lam), rel=1e-12)


def test_compute_lambda_mu_matrix_oracle():
    rng = np.random.default_rng(0)
    d = 6
    A = rng.standard_normal((d, d)) * 0.5
    F = rng.standard_normal((d, d))
    C_prev = F @ F.T / d
    G = rng.standard_normal((d, d))
    Sigma_plus = G @ G.T / d
    r, tau, rho = 1.1, 0.6, 0.04
    W = rng.standard_normal((d, d))
    C_hat = W @ W.T / d + 0.1 * np.eye(d)
    lam, mu = compute_lambda_mu(C_hat, A, C_prev, Sigma_plus, r, tau, rho)
    core = r * (A @ C_prev @ A.T + Sigma_plus)
    b_lam = core + r * tau * rho * np.eye(d)
    b_mu = core + tau * rho * np.eye(d)
    # lam: C_hat <= lam * b_lam with equality in one direction
    inv_sqrt = np.linalg.inv(np.linalg.cholesky(b_lam))
    want_lam = max(1.0, np.linalg.eigvalsh(inv_sqrt @ C_hat @ inv_sqrt.T)[-1])
    assert lam == pytest.approx(want_lam, rel=1e-10)
    # mu: inverse-side bound, C_hat^{-1} <= mu * b_mu^{-1}
    w = np.linalg.eigvalsh(mu * np.linalg.inv(b_mu) - np.linalg.inv(C_hat))
    assert w[0] >= -1e-10
    assert lam >= 1.0 and mu >= 1.0


def test_compute_lambda_mu_at_the_mean_realization():
    rng = np.random.default_rng(1)
    d = 4
    A = rng.standard_normal((d, d)) * 0.5
    C_prev = np.eye(d)
    Sigma_plus = 0.2 * np.eye(d)
    r, tau, rho = 1.2, 0.8, 0.05
    base = r * (A @ C_prev @ A.T + Sigma_plus) + r * tau * rho * np.eye(d)
    lam, mu = compute_lambda_mu(base, A, C_prev, Sigma_plus, r, tau, rho)
    assert lam == pytest.approx(1.0)
    assert mu == pytest.approx(1.0)


def test_compute_nu():
    rng = np.random.default_rng(2)
    F = rng.standard_normal((5, 5))
    R = F @ F.T + np.eye(5)
    assert compute_nu(R, R) == pytest.approx(1.0)
    assert compute_nu(3.0 * R, R) == pytest.approx(3.0, rel=1e-10)
    assert compute_nu(0.1 * R, R) == 1.0


def test_run_filter_experiment_shapes_and_floors():
    p = TurbulenceParams(J=3, sigma_obs=10.0, tau=0.6)
    stream = build_turbulence(p)
    cfg = EnkfConfig(K=8, p=4, r=p.r, rho=p.rho, tau=p.tau)
    seeds = (0, 1)
    per_seed, agg = run_filter_experiment(stream, cfg, T=6, seeds=seeds)
    assert set(per_seed) == set(seeds)
    for series in per_seed.values():
        assert len(series) == 6
        assert [x.step for x in series] == list(range(1, 7))
        for x in series:
            assert x.lam >= 1.0 and x.mu >= 1.0
            assert x.nu >= 1.0 and x.chi >= 1.0
            assert x.cov_fidelity > 0
            assert math.isfinite(x.maha_sq_per_d) and x.maha_sq_per_d > 0
            assert math.isfinite(x.l2_error)
    assert len(agg) == 6
    row = agg[3]
    assert row["step"] == 4
    for name in ("maha_sq_per_d", "l2_error", "nu", "cov_fidelity"):
        assert row[f"{name}_q10"] <= row[f"{name}_q50"] <= row[f"{name}_q90"]
        assert math.isfinite(row[f"{name}_mean"])


def test_run_filter_experiment_reference_override():
    p = TurbulenceParams(J=2, sigma_obs=10.0, tau=0.6)
    stream = build_turbulence(p)
    cfg = EnkfConfig(K=6, p=3, r=p.r, rho=p.rho, tau=p.tau)
    r_ref = np.diag(stationary_riccati_ambient(p))
    per_seed, _ = run_filter_experiment(stream, cfg, T=4, seeds=(0,), r_ref=r_ref)
    assert all(math.isfinite(x.nu) for x in per_seed[0])


def test_lambda_mu_concentrate_for_large_ensembles():
    p = TurbulenceParams(J=2, sigma_obs=10.0, tau=0.6)
    stream = build_turbulence(p)
    cfg = EnkfConfig(K=2000, p=5, r=p.r, rho=p.rho, tau=p.tau)
    per_seed, _ = run_filter_experiment(stream, cfg, T=3, seeds=(0,))
    for x in per_seed[0]:
        assert x.lam < 1.5
        assert x.mu < 1.5


def test_lambda_mu_certify_recorded_steps():
    # post-hoc certificates: mu^{-1} (rACA' + rS+ + tau rho I) <= C_hat
    # and C_hat <= lambda (rACA' + rS+ + r tau rho I), with 1e-8 slack
    from enkf_lab.enkf import EnkfFilter
    from enkf_lab.models import simulate_truth

    p = TurbulenceParams(J=3, sigma_obs=10.0, tau=0.6)
    stream = build_turbulence(p)
    d = stream.d
    cfg = EnkfConfig(K=8, p=4, r=p.r, rho=p.rho, tau=p.tau)
    truth = simulate_truth(stream, np.zeros(d), 10, seed=0)
    filt = EnkfFilter(stream, cfg, seed=0)
    eye = np.eye(d)
    for n in range(10):
        coeffs = stream.at(n)
        C_prev = filt.ensemble.covariance()
        Sigma_plus = factor_matrix(filt._factor_for(coeffs))
        rec = filt.step(truth.observations[n])
        S_hat = rec.forecast_spread
        C_hat = S_hat @ S_hat.T / (cfg.K - 1) + cfg.tau * cfg.rho * eye
        lam, mu = compute_lambda_mu(
            C_hat, coeffs.A, C_prev, Sigma_plus, cfg.r, cfg.tau, cfg.rho
        )
        A = np.asarray(coeffs.A.todense())
        core = cfg.r * (A @ C_prev @ A.T + Sigma_plus)
        upper = lam * (core + cfg.r * cfg.tau * cfg.rho * eye) - C_hat
        assert np.linalg.eigvalsh(upper)[0] >= -1e-8
        lower = C_hat - (core + cfg.tau * cfg.rho * eye) / mu
        assert np.linalg.eigvalsh(lower)[0] >= -1e-8


def test_chi_stays_at_floor_under_certified_rank():
    # with p at the verifier's effective ambient dimension, the spectral
    # projection discards nothing above rho, so chi == 1 <= nu throughout
    from enkf_lab.effective_dim import verify_dim_observed

    p = TurbulenceParams(J=10, sigma_obs=10.0, tau=0.6)
    rep = verify_dim_observed(p)
    stream = build_turbulence(p)
    cfg = EnkfConfig(K=40, p=rep.pm_effective, r=p.r, rho=p.rho, tau=p.tau)
    per_seed, _ = run_filter_experiment(stream, cfg, T=40, seeds=(0,))
    for x in per_seed[0]:
        assert x.chi == 1.0
        assert x.chi <= x.nu


def test_concentration_trial_flag():
    rng = np.random.default_rng(3)
    trial = _trial = None
    from enkf_lab.diagnostics import _concentration_trial

    trial = _concentration_trial(
        3, 8, 0.1, 0.1, np.linspace(1, 2, 3), rng, 10.0, 50
    )
    thr = 1.0 + 5 * 0.1
    assert trial.in_rare_event == (trial.lam > thr or trial.mu > thr)
    assert trial.lam >= 0.0 and trial.mu >= 1.0
    assert trial.d == 50 and trial.p == 3 and trial.K == 8


def test_concentration_large_ensemble_rare():
    report = run_concentration_experiment(
        d=50, p=2, K_list=(10000,), rho=0.1, delta=0.1, trials=200, seed=0,
        cond_targets=(10.0,), tail_trials=50, tail_min_count=5,
    )
    row = report["rare_event"][0]
    assert row["K"] == 10000
    assert row["prob"] <= 0.01


def test_concentration_probability_decays_in_K():
    report = run_concentration_experiment(
        d=50, p=3, K_list=(5, 20, 80), rho=0.1, delta=0.1, trials=400, seed=0,
        cond_targets=(10.0,), tail_trials=50, tail_min_count=5,
    )
    probs = [row["prob"] for row in report["rare_event"]]
    assert all(0.0 <= q <= 1.0 for q in probs)
    assert probs[-1] <= probs[0]


def test_concentration_tail_fit():
    report = run_concentration_experiment(
        d=50, p=5, K_list=(), rho=0.1, delta=0.1, trials=0, seed=0,
        cond_targets=(), tail_K=3, tail_trials=4000,
        tail_t_grid=(0.0, 0.5, 1.0, 1.5), tail_min_count=10,
    )
    assert report["rare_event"] == []
    counts = [row["count"] for row in report["tail"]]
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    fit = report["tail_fit"]
    assert fit["slope"] < 0
    assert fit["r_squared"] > 0.5


def test_concentration_reproducible():
    kw = dict(
        d=20, p=2, K_list=(10,), rho=0.1, delta=0.1, trials=50, seed=4,
        cond_targets=(10.0,), tail_trials=20, tail_min_count=5,
    )
    a = run_concentration_experiment(**kw)
    b = run_concentration_experiment(**kw)
    assert a["rare_event"] == b["rare_event"]
    assert a["tail"] == b["tail"]


def test_stability_experiment():
    p = TurbulenceParams(J=3, sigma_obs=10.0, tau=0.6)
    stream = build_turbulence(p)
    cfg = EnkfConfig(K=6, p=4, r=p.r, rho=p.rho, tau=p.tau)
    rows = run_stability_experiment(
        stream, cfg, T=40, shift_magnitudes=(10.0, 0.0), seeds=(0, 1)
    )
    assert len(rows) == 4
    shifted = [r for r in rows if r["shift"] == 10.0]
    null = [r for r in rows if r["shift"] == 0.0]
    for row in shifted:
        assert row["spreads_identical"] is True
        assert row["slope"] < 0
        assert row["final_gap"] < 10.0
    for row in null:
        assert math.isnan(row["slope"])
        assert row["final_gap"] < 1e-10


def test_accuracy_experiment_linear_scaling():
    p = TurbulenceParams(J=2, sigma_obs=10.0, tau=0.6)
    stream = build_turbulence(p)
    cfg = EnkfConfig(K=8, p=3, r=p.r, rho=p.rho, tau=p.tau)
    rows = run_accuracy_experiment(
        stream, cfg, T=40, eps_list=(1.0, 0.5), seeds=(0, 1)
    )
    assert [r["eps"] for r in rows] == [1.0, 0.5]
    # the filter map is exactly homogeneous in eps
    assert rows[0]["error_over_eps"] == pytest.approx(
        rows[1]["error_over_eps"], rel=1e-6
    )


def test_accuracy_experiment_tiny_eps():
    p = TurbulenceParams(J=2, sigma_obs=10.0, tau=0.6)
    stream = build_turbulence(p)
    cfg = EnkfConfig(K=8, p=3, r=p.r, rho=p.rho, tau=p.tau)
    rows = run_accuracy_experiment(stream, cfg, T=30, eps_list=(1e-8,), seeds=(0,))
    assert rows[0]["mean_error"] < 1e-6
    with pytest.raises(ValueError):
        run_accuracy_experiment(stream, cfg, T=5, eps_list=(0.0,), seeds=(0,))


def test_write_csv_roundtrip(tmp_path):
    series = [
        FilterDiagnostics(
            step=1, maha_sq_per_d=1.0 / 3.0, l2_error=0.1234567890123456789,
            lam=1.0, mu=2.0, nu=1.5, chi=1.0, cov_fidelity=0.9,
        ),
        FilterDiagnostics(
            step=2, maha_sq_per_d=np.pi, l2_error=1e-17,
            lam=1.1, mu=1.0, nu=2.5, chi=3.0, cov_fidelity=1.2,
        ),
    ]
    path = tmp_path / "diag.csv"
    write_csv(series, path, comments=("config: {}",))
    lines = path.read_text().splitlines()
    assert lines[0] == "# config: {}"
    assert lines[1] == ",".join(CSV_COLUMNS)
    assert CSV_COLUMNS.index("nu") == 3 and CSV_COLUMNS.index("lambda") == 4
    with open(path) as fh:
        rows = list(csv.DictReader(x for x in fh if not x.startswith("#")))
    assert int(rows[0]["step"]) == 1
    # %.17g round-trips doubles exactly
    assert float(rows[0]["maha_sq_per_d"]) == 1.0 / 3.0
    assert float(rows[1]["maha_sq_per_d"]) == np.pi
    assert float(rows[1]["l2_error"]) == 1e-17


def test_write_csv_accepts_dict_rows(tmp_path):
    row = {
        "step": 1, "maha_sq_per_d": 0.5, "l2_error": 0.25, "nu": 1.0,
        "lambda": 2.5, "mu": 1.0, "chi": 1.0, "cov_fidelity": 1.0,
    }
    p1 = tmp_path / "a.csv"
    write_csv([row], p1)
    row2 = dict(row)
    row2["lam"] = row2.pop("lambda")
    p2 = tmp_path / "b.csv"
    write_csv([row2], p2)
    assert p1.read_text() == p2.read_text()


def test_write_json(tmp_path):
    trial = ConcentrationTrial(
        d=10, p=2, K=5, rho=0.1, delta=0.1, lam=1.2, mu=np.float64(1.0),
        in_rare_event=False,
    )
    report = {"trials": [trial], "count": np.int64(1), "arr": np.arange(3)}
    path = tmp_path / "report.json"
    write_json(report, path)
    back = json.loads(path.read_text())
    assert back["count"] == 1
    assert back["arr"] == [0, 1, 2]
    assert back["trials"][0]["in_rare_event"] is False
    assert back["trials"][0]["mu"] == 1.0
