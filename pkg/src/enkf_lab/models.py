"""Signal-observation systems with random coefficients, and the turbulence testbed.

The state model is ``X_{n+1} = A_n X_n + B_n + xi_{n+1}`` with
``xi ~ N(0, Sigma_n)``, observed through ``Y_{n+1} = H_n X_{n+1} + zeta``
with unit observation noise. Coefficients come from a
:class:`CoefficientStream`; the spectrally truncated stochastic
turbulence model (damped advected Fourier modes with a power-law
equilibrium spectrum) is the built-in instance.

All randomness is drawn from counter-based Philox substreams keyed by
``(seed, domain, step[, member])``, so trajectories are bit-reproducible
and noise draws never depend on ensemble size or on program state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse

from .linalg import positive_part_factor

__all__ = [
    "InvalidParams",
    "InvalidChain",
    "StepCoefficients",
    "CoefficientStream",
    "TurbulenceParams",
    "TruthTrajectory",
    "JumpSpec",
    "substream",
    "build_turbulence",
    "simulate_truth",
    "markov_jump_step",
    "sample_noise",
]

# Substream domain tags. Never reorder; reproducibility depends on them.
DOMAIN_TRUTH = 1
DOMAIN_OBS = 2
DOMAIN_JUMP = 3
DOMAIN_FORECAST = 4
DOMAIN_INIT = 5
DOMAIN_TRIAL = 6


class InvalidParams(ValueError):
    """A model parameter violates its constraint."""


class InvalidChain(ValueError):
    """A Markov jump specification is not a valid finite-state chain."""


def substream(*key: int) -> np.random.Generator:
    """Counter-based generator keyed by a tuple of non-negative ints."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


@dataclass
class StepCoefficients:
    """One step of system coefficients (A, B, Sigma, H).

    ``A`` and ``Sigma`` may be dense arrays or scipy.sparse matrices;
    ``H`` may additionally be None for an unobserved system.
    """

    A: object
    B: np.ndarray
    Sigma: object
    H: object = None

    def __post_init__(self):
        self.B = np.asarray(self.B, dtype=float).ravel()
        if not scipy.sparse.issparse(self.A):
            self.A = np.asarray(self.A, dtype=float)
        if not scipy.sparse.issparse(self.Sigma):
            self.Sigma = np.asarray(self.Sigma, dtype=float)
        if self.H is not None and not scipy.sparse.issparse(self.H):
            self.H = np.asarray(self.H, dtype=float)
        d = self.B.shape[0]
        if self.A.shape != (d, d):
            raise InvalidParams(f"A has shape {self.A.shape}, expected ({d}, {d})")
        if self.Sigma.shape != (d, d):
            raise InvalidParams(f"Sigma has shape {self.Sigma.shape}, expected ({d}, {d})")
        if self.H is not None and self.H.shape[1] != d:
            raise InvalidParams(f"H has {self.H.shape[1]} columns, expected {d}")


@dataclass
class CoefficientStream:
    """Deterministic map ``(step, rng) -> StepCoefficients``.

    The generator must be pure given the step index and the supplied
    substream, so the same seed reproduces bit-identical coefficients.
    ``q = 0`` marks an unobserved system.
    """

    d: int
    q: int
    generator: Callable[[int, np.random.Generator], StepCoefficients]
    seed: int = 0

    def at(self, n: int) -> StepCoefficients:
        return self.generator(n, substream(self.seed, DOMAIN_JUMP, n))


@dataclass
class JumpSpec:
    """Finite-state Markov chain driving per-mode damping multipliers.

    Attributes
    ----------
    transition : (m, m) array
        Row-stochastic transition matrix.
    multipliers : (m, len(modes)) array
        Multiplier applied to each listed mode's A-block, per chain state.
    modes : sequence of int
        Wavenumbers forming the instability set; only these are scaled.
    init_state : int
        Chain state at step 0.
    """

    transition: np.ndarray
    multipliers: np.ndarray
    modes: tuple
    init_state: int = 0

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=float)
        self.multipliers = np.atleast_2d(np.asarray(self.multipliers, dtype=float))
        self.modes = tuple(int(k) for k in self.modes)
        m = self.transition.shape[0]
        if self.transition.shape != (m, m):
            raise InvalidChain("transition matrix must be square")
        if self.multipliers.shape != (m, len(self.modes)):
            raise InvalidChain(
                f"multipliers must be ({m}, {len(self.modes)}), "
                f"got {self.multipliers.shape}"
            )
        rows = self.transition.sum(axis=1)
        if np.any(np.abs(rows - 1.0) > 1e-12) or np.any(self.transition < 0):
            raise InvalidChain("transition rows must be stochastic (sum to 1 within 1e-12)")


def markov_jump_step(jump_spec: JumpSpec, state: int, rng) -> tuple[int, np.ndarray]:
    """Advance the jump chain one step.

    Returns the new chain state and the multiplier vector for the modes
    in the instability set (aligned with ``jump_spec.modes``).
    """
    probs = jump_spec.transition[state]
    new_state = int(rng.choice(probs.shape[0], p=probs))
    return new_state, jump_spec.multipliers[new_state].copy()


@dataclass
class TurbulenceParams:
    """Parameters of the truncated turbulence model.

    ``d = 2J + 1`` modes: a scalar mode 0 followed by (cos, sin) pairs for
    wavenumbers 1..J. Mode k is damped at rate
    ``gamma_k = gamma0 + nu_visc * k**alpha`` and forced to the
    equilibrium energy ``E_k = E0 * k**(-beta)``; mode 0 is unforced
    (pure damping), which is what reproduces the published effective
    dimensions of the reference configuration.
    """

    J: int
    alpha: float = 2.0
    beta: float = 5.0 / 3.0
    gamma0: float = 0.01
    nu_visc: float = 0.01
    E0: float = 1.0
    h: float = 0.5
    omega_spec: Optional[Sequence[float]] = None
    r: float = 1.1
    tau: float = 1.0
    rho: float = 0.04
    sigma_obs: Optional[float] = None
    jump_spec: Optional[JumpSpec] = None

    @property
    def d(self) -> int:
        return 2 * self.J + 1

    def gamma(self) -> np.ndarray:
        k = np.arange(self.J + 1, dtype=float)
        return self.gamma0 + self.nu_visc * k**self.alpha

    def sigma_diag(self) -> np.ndarray:
        """Diagonal of Sigma over the d state components."""
        g = self.gamma()
        k = np.arange(1, self.J + 1, dtype=float)
        energy = self.E0 * k ** (-self.beta)
        per_mode = 0.5 * energy * (1.0 - np.exp(-2.0 * g[1:] * self.h))
        out = np.zeros(self.d)
        out[1::2] = per_mode
        out[2::2] = per_mode
        return out

    def validate(self):
        if self.J < 0 or int(self.J) != self.J:
            raise InvalidParams("J must be a non-negative integer")
        if self.alpha <= 0:
            raise InvalidParams("alpha must satisfy alpha > 0")
        if self.beta < 0:
            raise InvalidParams("beta must satisfy beta >= 0")
        if self.h <= 0:
            raise InvalidParams("h must satisfy h > 0")
        if self.E0 < 0:
            raise InvalidParams("E0 must satisfy E0 >= 0")
        if np.any(self.gamma() <= 0):
            raise InvalidParams(
                "gamma0 + nu_visc * k**alpha must be positive for all k <= J"
            )
        if self.sigma_obs is not None and self.sigma_obs <= 0:
            raise InvalidParams("sigma_obs must satisfy sigma_obs > 0")
        if self.rho <= 0:
            raise InvalidParams("rho must satisfy rho > 0")
        if self.omega_spec is not None and len(self.omega_spec) != self.J + 1:
            raise InvalidParams(
                f"omega_spec must have length J + 1 = {self.J + 1}"
            )


@dataclass
class TruthTrajectory:
    """Simulated truth and observations under one seed.

    ``states`` has shape (T+1, d) including the initial condition;
    ``observations`` has shape (T, q), observation ``n`` (0-based row)
    pairing with state ``n+1``. None when the system is unobserved.
    """

    states: np.ndarray
    observations: Optional[np.ndarray]
    seed: int


def _rotation_block(scale: float, angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return scale * np.array([[c, -s], [s, c]])


def _turbulence_A(params: TurbulenceParams, mults: Optional[dict] = None):
    g = params.gamma()
    h = params.h
    omega = (
        np.zeros(params.J + 1)
        if params.omega_spec is None
        else np.asarray(params.omega_spec, dtype=float)
    )
    blocks = [np.array([[np.exp(-g[0] * h)]])]
    for k in range(1, params.J + 1):
        blk = _rotation_block(np.exp(-g[k] * h), omega[k] * h)
        if mults and k in mults:
            blk = mults[k] * blk
        blocks.append(blk)
    return scipy.sparse.block_diag(blocks, format="csr")


def build_turbulence(params: TurbulenceParams) -> CoefficientStream:
    """Coefficient stream for the truncated turbulence model.

    A is block-diagonal (damped rotations), Sigma is diagonal with the
    statistical-equilibrium variance increments, and
    ``H = sqrt((2J+1)/sigma_obs) * I`` when an observation noise variance
    is supplied (else the system is unobserved). With a jump spec, the
    A-blocks of the listed modes are scaled by the chain's multipliers
    each step. Matrices are scipy.sparse; dense consumers can densify.
    """
    params.validate()
    d = params.d
    Sigma = scipy.sparse.diags(params.sigma_diag(), format="csr")
    B = np.zeros(d)
    if params.sigma_obs is not None:
        H = scipy.sparse.identity(d, format="csr") * np.sqrt(d / params.sigma_obs)
        q = d
    else:
        H, q = None, 0
    A0 = _turbulence_A(params)
    base = StepCoefficients(A=A0, B=B, Sigma=Sigma, H=H)

    if params.jump_spec is None:

        def generator(n, rng):
            return base  # constant-coefficient: same object every step

        return CoefficientStream(d=d, q=q, generator=generator)

    spec = params.jump_spec
    # chain paths grown lazily per stream seed; transition i uses its own
    # substream, so state at step n never requires replaying other seeds
    paths: dict = {}

    def chain_state(n: int, stream_seed: int) -> np.ndarray:
        path = paths.setdefault(stream_seed, [spec.init_state])
        while len(path) <= n:
            i = len(path)
            rng = substream(stream_seed, DOMAIN_JUMP, i)
            s, _ = markov_jump_step(spec, path[-1], rng)
            path.append(s)
        return spec.multipliers[path[n]]

    stream = CoefficientStream(d=d, q=q, generator=None)

    def generator(n, rng):
        mults_vec = chain_state(n, stream.seed)
        mults = dict(zip(spec.modes, mults_vec))
        A = _turbulence_A(params, mults)
        return StepCoefficients(A=A, B=B, Sigma=Sigma, H=H)

    stream.generator = generator
    return stream


class _FactorCache:
    """Keyed by object identity; holds a strong ref so ids stay unique."""

    def __init__(self):
        self._data = {}

    def get(self, key_obj, build):
        k = id(key_obj)
        hit = self._data.get(k)
        if hit is not None and hit[0] is key_obj:
            return hit[1]
        val = build()
        self._data[k] = (key_obj, val)
        return val


def sample_noise(factor, rng, size: Optional[int] = None) -> np.ndarray:
    """Draw N(0, U diag(s) U.T) given the factor ``(U, s)``.

    Returns shape (d,) for ``size=None``, else (d, size).
    """
    U, s = factor
    m = s.shape[0]
    if m == 0:
        d = U.shape[0]
        return np.zeros(d if size is None else (d, size))
    z = rng.standard_normal(m if size is None else (m, size))
    return U @ (np.sqrt(s)[:, None] * z if size is not None else np.sqrt(s) * z)


def simulate_truth(
    stream: CoefficientStream,
    x0,
    T: int,
    seed: int,
    obs_noise: bool = True,
) -> TruthTrajectory:
    """Simulate the truth path and its observations.

    Parameters
    ----------
    stream : CoefficientStream
    x0 : (d,) initial state
    T : number of steps, >= 1
    seed : int, keys the noise substreams
    obs_noise : bool
        Test hook; False suppresses the observation noise zeta.
    """
    if T < 1:
        raise InvalidParams("T must be >= 1")
    x = np.asarray(x0, dtype=float).ravel().copy()
    if x.shape[0] != stream.d:
        raise InvalidParams(f"x0 has length {x.shape[0]}, stream.d = {stream.d}")
    states = np.empty((T + 1, stream.d))
    states[0] = x
    obs = np.empty((T, stream.q)) if stream.q else None
    cache = _FactorCache()
    for n in range(T):
        coeffs = stream.at(n)
        factor = cache.get(coeffs.Sigma, lambda: positive_part_factor(coeffs.Sigma))
        xi = sample_noise(factor, substream(seed, DOMAIN_TRUTH, n))
        x = np.asarray(coeffs.A @ x).ravel() + coeffs.B + xi
        states[n + 1] = x
        if obs is not None:
            y = np.asarray(coeffs.H @ x).ravel()
            if obs_noise:
                y = y + substream(seed, DOMAIN_OBS, n).standard_normal(stream.q)
            obs[n] = y
    return TruthTrajectory(states=states, observations=obs, seed=seed)
