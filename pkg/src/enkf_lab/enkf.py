"""Ensemble Kalman filter with covariance inflations and spectral projection.

One step, given ensemble mean/spread (X_bar, S), coefficients
(A, B, Sigma, H), and observation y:

1. forecast: draw xi^(k) ~ N(0, Sigma+) with Sigma+ the PSD part of
   ``rho A A.T + Sigma - (rho tau / r) I``; mean advances by
   ``A X_bar + B + mean(xi)``; spread becomes
   ``S_hat = sqrt(r) (A S + [xi - mean(xi)])``,
2. assimilate: gain of ``C_hat + tau rho I`` (Woodbury form, never a
   d x d matrix) moves the mean; the spread is rebuilt by a deterministic
   square-root transform so that ``S+ S+.T / (K-1)`` equals the rank-p
   projection ``P (K(C_hat + tau rho I) - rho I) P`` with negative
   directions clamped,
3. the state estimate is N(mean, S+ S+.T / (K-1) + rho I).

Two equivalent assimilation routes exist: a dense one (general H) and a
Gram-matrix one usable when ``H = eta I`` and K < d, which costs
O(K^2 d + K^3) per step and keeps the whole filter linear in d for
diagonal-structured coefficients.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse

from .linalg import (
    DimensionMismatch,
    _scaled_identity_coeff,
    eigh_desc,
    gain_apply_woodbury,
    kalman_update_operator,
    make_gain_context,
    positive_part_factor,
    symmetrize,
    top_p_projection,
)
from .models import (
    DOMAIN_FORECAST,
    DOMAIN_INIT,
    CoefficientStream,
    StepCoefficients,
    sample_noise,
    substream,
)

__all__ = [
    "RankDeficit",
    "Ensemble",
    "EnkfConfig",
    "StepRecord",
    "enkf_forecast",
    "enkf_assimilate",
    "enkf_step",
    "EnkfFilter",
    "sigma_plus_factor",
]

# Relative singular-value cutoff for the pseudoinverse of the spread SVD.
SVD_RTOL = 1e-12


class RankDeficit(UserWarning):
    """The projected target needs more directions than the spread spans."""


@dataclass
class Ensemble:
    """Ensemble mean and spread (deviation columns).

    The spread columns must sum to zero within 1e-10 per component and
    there must be at least two members.
    """

    mean: np.ndarray
    spread: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float).ravel()
        self.spread = np.asarray(self.spread, dtype=float)
        if self.spread.ndim != 2 or self.spread.shape[0] != self.mean.shape[0]:
            raise DimensionMismatch(
                f"spread shape {self.spread.shape} does not match mean length "
                f"{self.mean.shape[0]}"
            )
        if self.spread.shape[1] < 2:
            raise DimensionMismatch("need K >= 2 members")
        colsum = self.spread.sum(axis=1)
        if np.max(np.abs(colsum)) > 1e-10:
            raise ValueError("spread columns must sum to zero within 1e-10")

    @property
    def K(self) -> int:
        return self.spread.shape[1]

    def covariance(self) -> np.ndarray:
        return symmetrize(self.spread @ self.spread.T / (self.K - 1))


@dataclass
class EnkfConfig:
    """Filter parameters: ensemble size, projection rank, inflations."""

    K: int
    p: int
    r: float
    rho: float
    tau: float = 1.0

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if self.p < 1:
            raise ValueError("p must be >= 1")
        if not self.r > 1:
            raise ValueError("r must be > 1")
        if not self.rho > 0:
            raise ValueError("rho must be > 0")
        if not self.tau > 0:
            raise ValueError("tau must be > 0")


@dataclass
class StepRecord:
    """Per-step byproducts needed by the diagnostics.

    ``projection_discard`` is the (p+1)-th eigenvalue of the posterior
    covariance map before projection, and ``chi`` its excess over rho:
    ``chi = max(1, projection_discard / rho)``.
    """

    forecast_spread: np.ndarray
    posterior: Ensemble
    gain_residual: np.ndarray
    chi: float
    projection_discard: float


def sigma_plus_factor(coeffs: StepCoefficients, cfg: EnkfConfig):
    """Low-rank factor (U, s) of the additive inflation target Sigma+.

    Sparse diagonal-structured coefficients stay O(d); anything else
    falls back to a dense eigendecomposition.
    """
    r, tau, rho = cfg.r, cfg.tau, cfg.rho
    A, Sigma = coeffs.A, coeffs.Sigma
    d = A.shape[0]
    if scipy.sparse.issparse(A) and scipy.sparse.issparse(Sigma):
        M = rho * (A @ A.T) + Sigma - scipy.sparse.identity(d, format="csr") * (
            rho * tau / r
        )
        return positive_part_factor(M)
    A = np.asarray(A.todense()) if scipy.sparse.issparse(A) else np.asarray(A, dtype=float)
    S = (
        np.asarray(Sigma.todense())
        if scipy.sparse.issparse(Sigma)
        else np.asarray(Sigma, dtype=float)
    )
    M = rho * (A @ A.T) + S - (rho * tau / r) * np.eye(d)
    return positive_part_factor(M)


def enkf_forecast(
    ens: Ensemble,
    coeffs: StepCoefficients,
    cfg: EnkfConfig,
    rng: np.random.Generator,
    factor=None,
):
    """Forecast the ensemble one step.

    Draws one instability-noise vector per member from substreams
    spawned off ``rng`` (pass a freshly keyed per-step generator for
    reproducibility). Returns ``(forecast_mean, forecast_spread)``;
    the spread columns sum to zero.

    ``factor`` optionally supplies a precomputed Sigma+ factor from
    :func:`sigma_plus_factor` (worth caching on constant streams).
    """
    if factor is None:
        factor = sigma_plus_factor(coeffs, cfg)
    K = ens.K
    children = rng.spawn(K)
    xi = np.empty((ens.mean.shape[0], K))
    for k, child in enumerate(children):
        xi[:, k] = sample_noise(factor, child)
    xi_mean = xi.mean(axis=1)
    mean = np.asarray(coeffs.A @ ens.mean).ravel() + coeffs.B + xi_mean
    S_hat = np.sqrt(cfg.r) * (
        np.asarray(coeffs.A @ ens.spread) + (xi - xi_mean[:, None])
    )
    return mean, S_hat


def _recenter_zero_sum(S: np.ndarray) -> np.ndarray:
    # exact in theory; enforced numerically against roundoff drift
    return S - S.mean(axis=1, keepdims=True)


def _posterior_mean_and_residual(mean_hat, S_hat, H, y, cfg):
    if H is None:
        return mean_hat.copy(), np.zeros(0)
    y = np.asarray(y, dtype=float).ravel()
    resid = y - np.asarray(H @ mean_hat).ravel()
    ctx = make_gain_context(S_hat, H, cfg.tau * cfg.rho)
    return mean_hat + gain_apply_woodbury(ctx, resid), resid


def _kappa(s, eta: float, c: float):
    """Eigenvalue map of the update operator for H = eta I:
    s + c on the forecast side becomes (s + c) / (1 + eta^2 (s + c))."""
    sc = s + c
    return sc / (1.0 + eta * eta * sc)


def _assimilate_structured(mean_hat, S_hat, eta, y, cfg, H=None):
    """Gram-matrix route, H = eta I (eta may be 0 for no observation).

    Eigenvectors of the posterior map are the left singular vectors of
    S_hat because the map is a monotone function of the forecast
    covariance spectrum; everything reduces to a K x K eigenproblem.
    """
    d, K = S_hat.shape
    c = cfg.tau * cfg.rho
    gram = S_hat.T @ S_hat / (K - 1)
    s, Phi = eigh_desc(gram)
    s = np.maximum(s, 0.0)
    sing = np.sqrt(s * (K - 1))  # singular values of S_hat
    keep = sing > SVD_RTOL * max(sing[0], 1e-300)
    m = int(np.count_nonzero(keep))
    kappa_tail = _kappa(0.0, eta, c)
    p = cfg.p
    n_above = int(np.count_nonzero(_kappa(s[:m], eta, c) > cfg.rho)) + (
        (d - m) if kappa_tail > cfg.rho else 0
    )
    if min(n_above, p) > m:
        warnings.warn(
            f"projection wants {min(n_above, p)} directions but the spread "
            f"spans {m}",
            RankDeficit,
        )
    take = min(p, m)
    D = _kappa(s[:take], eta, c) - cfg.rho
    w = np.sqrt(np.maximum(D, 0.0) * (K - 1))
    Psi = S_hat @ (Phi[:, :take] / sing[:take])  # left singular vectors
    S_plus = (Psi * w) @ Phi[:, :take].T
    S_plus = _recenter_zero_sum(S_plus)
    # (p+1)-th eigenvalue of the posterior map, padding the spectrum
    # with the flat tail value
    if p < d:
        rho_next = _kappa(s[p], eta, c) if p < m else kappa_tail
    else:
        rho_next = 0.0
    mean_plus, resid = _posterior_mean_and_residual(mean_hat, S_hat, H, y, cfg)
    ens = Ensemble(mean=mean_plus, spread=S_plus)
    rec = StepRecord(
        forecast_spread=S_hat,
        posterior=ens,
        gain_residual=resid,
        chi=max(1.0, rho_next / cfg.rho),
        projection_discard=float(rho_next),
    )
    return ens, rec


def _assimilate_dense(mean_hat, S_hat, H, y, cfg):
    """Dense route: explicit posterior map, projection, and SVD transform."""
    d, K = S_hat.shape
    c = cfg.tau * cfg.rho
    C_hat = symmetrize(S_hat @ S_hat.T / (K - 1) + c * np.eye(d))
    if H is None:
        Kmat = C_hat
    else:
        Hd = np.asarray(H.todense()) if scipy.sparse.issparse(H) else np.asarray(H, dtype=float)
        Kmat = kalman_update_operator(C_hat, Hd)
    _, pairs, rho_next = top_p_projection(Kmat, cfg.p)
    D = pairs.eigenvalues - cfg.rho
    Q = pairs.eigenvectors
    Psi, sing, PhiT = np.linalg.svd(S_hat, full_matrices=False)
    keep = sing > SVD_RTOL * max(float(sing[0]) if sing.size else 0.0, 1e-300)
    m = int(np.count_nonzero(keep))
    n_pos = int(np.count_nonzero(D > 0))
    if n_pos > m:
        warnings.warn(
            f"projection wants {n_pos} directions but the spread spans {m}",
            RankDeficit,
        )
    take = min(cfg.p, m)
    w = np.sqrt(np.maximum(D[:take], 0.0) * (K - 1))
    # i-th eigenvector of the projected target pairs with the i-th right
    # singular direction of S_hat (both in descending order)
    S_plus = (Q[:, :take] * w) @ PhiT[:take, :]
    S_plus = _recenter_zero_sum(S_plus)
    mean_plus, resid = _posterior_mean_and_residual(mean_hat, S_hat, H, y, cfg)
    ens = Ensemble(mean=mean_plus, spread=S_plus)
    rec = StepRecord(
        forecast_spread=S_hat,
        posterior=ens,
        gain_residual=resid,
        chi=max(1.0, rho_next / cfg.rho),
        projection_discard=float(rho_next),
    )
    return ens, rec


def enkf_assimilate(mean_hat, S_hat, coeffs: StepCoefficients, y, cfg: EnkfConfig):
    """Assimilate an observation into the forecast ensemble.

    Returns ``(posterior Ensemble, StepRecord)``. The posterior spread
    satisfies ``S+ S+.T / (K-1) = P (K(C_hat^{tau rho}) - rho I) P``
    (negative directions clamped) whenever the needed directions lie in
    the span of ``S_hat``; otherwise a :class:`RankDeficit` warning is
    recorded and the identity holds on the spanned part.
    """
    mean_hat = np.asarray(mean_hat, dtype=float).ravel()
    S_hat = np.asarray(S_hat, dtype=float)
    d = mean_hat.shape[0]
    if cfg.p > d:
        raise DimensionMismatch(f"p={cfg.p} exceeds state dimension d={d}")
    H = coeffs.H
    eta = _scaled_identity_coeff(H, d)
    if H is None and S_hat.shape[1] < d:
        return _assimilate_structured(mean_hat, S_hat, 0.0, y, cfg, H=None)
    if eta is not None and S_hat.shape[1] < d:
        return _assimilate_structured(mean_hat, S_hat, eta, y, cfg, H=H)
    return _assimilate_dense(mean_hat, S_hat, H, y, cfg)


def enkf_step(
    ens: Ensemble,
    coeffs: StepCoefficients,
    y,
    cfg: EnkfConfig,
    rng: np.random.Generator,
    factor=None,
):
    """One full filter step: forecast then assimilate."""
    mean_hat, S_hat = enkf_forecast(ens, coeffs, cfg, rng, factor=factor)
    return enkf_assimilate(mean_hat, S_hat, coeffs, y, cfg)


class EnkfFilter:
    """Stateful driver advancing an ensemble along a coefficient stream.

    Noise substreams are keyed by ``(seed, domain, step, member)``
    independently of the state, so two filters sharing a seed draw
    identical noise regardless of their means (used by the stability
    experiments). Sigma+ factors are cached per coefficient object, so
    constant streams factor once.
    """

    def __init__(
        self,
        stream: CoefficientStream,
        cfg: EnkfConfig,
        seed: int,
        init_mean=None,
        init_cov: Optional[float] = None,
    ):
        if cfg.p > stream.d:
            raise DimensionMismatch(f"p={cfg.p} exceeds model dimension d={stream.d}")
        self.stream = stream
        self.cfg = cfg
        self.seed = int(seed)
        self.n = 0
        self._factors = {}
        mean0 = (
            np.zeros(stream.d)
            if init_mean is None
            else np.asarray(init_mean, dtype=float).ravel()
        )
        scale = np.sqrt(cfg.rho if init_cov is None else init_cov)
        noise = np.empty((stream.d, cfg.K))
        for k in range(cfg.K):
            noise[:, k] = scale * substream(self.seed, DOMAIN_INIT, k).standard_normal(
                stream.d
            )
        # Center the noise before attaching the mean: the spread is then a
        # function of the seed alone, so paired runs that differ only in
        # init_mean carry bitwise-identical spreads forever.
        mu_noise = noise.mean(axis=1)
        self.ensemble = Ensemble(mean=mean0 + mu_noise, spread=noise - mu_noise[:, None])

    def _factor_for(self, coeffs):
        key = id(coeffs)
        hit = self._factors.get(key)
        if hit is not None and hit[0] is coeffs:
            return hit[1]
        val = sigma_plus_factor(coeffs, self.cfg)
        self._factors[key] = (coeffs, val)
        return val

    def step(self, y) -> StepRecord:
        coeffs = self.stream.at(self.n)
        rng = substream(self.seed, DOMAIN_FORECAST, self.n)
        factor = self._factor_for(coeffs)
        self.ensemble, rec = enkf_step(
            self.ensemble, coeffs, y, self.cfg, rng, factor=factor
        )
        self.n += 1
        return rec
