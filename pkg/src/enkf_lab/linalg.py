"""Dense symmetric/PSD linear algebra kernels shared by the filters.

Conventions used throughout the package:

* a "SymMatrix" is a plain ``numpy.ndarray`` that is exactly symmetric
  (``M[i, j] == M[j, i]``); :func:`symmetrize` is the constructor that
  enforces this by averaging with the transpose,
* eigenvalues are reported in descending order,
* positive definiteness means ``lambda_min > 1e-12 * max(1, lambda_max)``.

LAPACK (via numpy/scipy) does the factorizations; this module owns the
operator definitions, the ordering/sign conventions, and the error model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse

__all__ = [
    "NotPositiveDefinite",
    "DimensionMismatch",
    "SingularInnerSolve",
    "SpectralDecomp",
    "KalmanGainContext",
    "symmetrize",
    "is_positive_definite",
    "mahalanobis_sq",
    "loewner_ratio",
    "kalman_gain",
    "kalman_update_operator",
    "make_gain_context",
    "gain_apply_woodbury",
    "top_p_projection",
    "positive_part",
    "positive_part_factor",
    "factor_matrix",
    "condition_number",
    "eigh_desc",
]

# Relative eigenvalue floor below which a symmetric matrix counts as singular.
PD_RTOL = 1e-12

# Dense eigensolver is used up to this dimension; above it top_p_projection
# switches to power iteration with deflation.
DENSE_EIG_MAX_DIM = 512

_POWER_TOL = 1e-10


class NotPositiveDefinite(ValueError):
    """A matrix required to be positive definite is not."""


class DimensionMismatch(ValueError):
    """Operands have incompatible shapes."""


class SingularInnerSolve(np.linalg.LinAlgError):
    """The inner system of a low-rank gain solve is singular or non-finite."""


def _as_square(M, name: str = "matrix") -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DimensionMismatch(f"{name} must be square, got shape {M.shape}")
    return M


def symmetrize(M) -> np.ndarray:
    """Return the exactly symmetric part ``(M + M.T) / 2``."""
    M = _as_square(M)
    return 0.5 * (M + M.T)


def eigh_desc(M) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric eigendecomposition with descending eigenvalues.

    Eigenvectors are sign-canonicalized (first component of magnitude
    above 1e-12 made positive) so repeated calls on identical input give
    identical output. Exact eigenvalue ties keep LAPACK's deterministic
    internal order, which is stable for identical input bits.
    """
    M = _as_square(M)
    w, V = np.linalg.eigh(M)
    order = np.argsort(-w, kind="stable")
    w = w[order]
    V = V[:, order]
    for j in range(V.shape[1]):
        col = V[:, j]
        nz = np.nonzero(np.abs(col) > 1e-12)[0]
        if nz.size and col[nz[0]] < 0:
            V[:, j] = -col
    return w, V


@dataclass
class SpectralDecomp:
    """Top-``k`` eigenpairs of a symmetric matrix, descending.

    Attributes
    ----------
    eigenvalues : (k,) ndarray
    eigenvectors : (d, k) ndarray, orthonormal columns
    """

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray


def is_positive_definite(M) -> bool:
    """Check PD under the package eigenvalue-floor convention."""
    M = _as_square(M)
    w = np.linalg.eigvalsh(M)
    return bool(w[0] > PD_RTOL * max(1.0, float(w[-1])))


def _cho(C, name: str):
    # cho_factor raises LinAlgError for indefinite input; map to our error
    try:
        return scipy.linalg.cho_factor(C, lower=True, check_finite=False)
    except (scipy.linalg.LinAlgError, ValueError) as exc:
        raise NotPositiveDefinite(f"{name} is not positive definite") from exc


def mahalanobis_sq(v, C) -> float:
    """Squared Mahalanobis norm ``v.T @ inv(C) @ v`` for PD ``C``.

    Parameters
    ----------
    v : (d,) array_like
    C : (d, d) symmetric positive definite

    Raises
    ------
    NotPositiveDefinite
        If the Cholesky factorization of ``C`` fails.
    DimensionMismatch
        If shapes are incompatible.
    """
    v = np.asarray(v, dtype=float).ravel()
    C = _as_square(C, "C")
    if C.shape[0] != v.shape[0]:
        raise DimensionMismatch(f"v has length {v.shape[0]}, C is {C.shape}")
    cf = _cho(C, "C")
    x = scipy.linalg.cho_solve(cf, v, check_finite=False)
    return float(v @ x)


def loewner_ratio(B, A) -> float:
    """Smallest ``lam >= 0`` with ``B <= lam * A`` in the Loewner order.

    Equals the largest generalized eigenvalue of the pencil ``(B, A)``.
    ``B`` must be PSD and ``A`` PD; tiny negative generalized eigenvalues
    from roundoff clamp to zero.
    """
    B = _as_square(B, "B")
    A = _as_square(A, "A")
    if B.shape != A.shape:
        raise DimensionMismatch(f"B is {B.shape}, A is {A.shape}")
    if not is_positive_definite(A):
        raise NotPositiveDefinite("A must be positive definite")
    w = scipy.linalg.eigh(
        symmetrize(B), symmetrize(A), eigvals_only=True, check_finite=False
    )
    return float(max(w[-1], 0.0))


def kalman_gain(C, H) -> np.ndarray:
    """Gain ``G = C H.T (I_q + H C H.T)^{-1}`` for unit observation noise."""
    C = _as_square(C, "C")
    H = np.asarray(H, dtype=float)
    if H.ndim != 2 or H.shape[1] != C.shape[0]:
        raise DimensionMismatch(f"H is {H.shape}, C is {C.shape}")
    q = H.shape[0]
    CHt = C @ H.T
    M = symmetrize(np.eye(q) + H @ CHt)
    cf = _cho(M, "I + H C H.T")
    return scipy.linalg.cho_solve(cf, CHt.T, check_finite=False).T


def kalman_update_operator(C, H) -> np.ndarray:
    """Posterior covariance map ``K(C) = C - G H C`` in Joseph form.

    The Joseph form ``(I - G H) C (I - G H).T + G G.T`` keeps the result
    PSD for PSD input even when ``C`` is singular.
    """
    C = _as_square(C, "C")
    G = kalman_gain(C, H)
    d = C.shape[0]
    ImGH = np.eye(d) - G @ np.asarray(H, dtype=float)
    return symmetrize(ImGH @ C @ ImGH.T + G @ G.T)


def _scaled_identity_coeff(H, d: int):
    """Return ``eta`` if ``H`` equals ``eta * I_d`` (eta > 0), else None.

    Sparse inputs are checked in O(d + nnz); dense inputs in O(d^2).
    """
    if H is None:
        return None
    if scipy.sparse.issparse(H):
        if H.shape != (d, d):
            return None
        diag = H.diagonal()
        eta = diag[0]
        if eta <= 0 or not np.allclose(diag, eta, rtol=0, atol=0):
            return None
        off = H.count_nonzero() - np.count_nonzero(diag)
        return float(eta) if off == 0 else None
    H = np.asarray(H)
    if H.shape != (d, d):
        return None
    eta = H[0, 0]
    if eta <= 0:
        return None
    if np.count_nonzero(H - eta * np.eye(d)):
        return None
    return float(eta)


@dataclass
class KalmanGainContext:
    """Factored form of ``G = C H.T (I_q + H C H.T)^{-1}`` for low-rank C.

    Built from the spread factor ``S_hat`` (d x K), the observation
    operator ``H`` (q x d, dense or sparse, possibly ``eta * I``), and the
    additive floor ``tau_rho``, where ``C = S_hat S_hat.T / (K - 1)
    + tau_rho * I``. Applying the gain never forms a d x d matrix.
    """

    V: np.ndarray  # S_hat / sqrt(K - 1), d x K
    H: object  # q x d operator (ndarray or sparse), kept for H.T applies
    tau_rho: float
    eta: float | None  # scalar when H = eta * I, else None
    q0_scale: float | None  # (1 + tau_rho * eta^2)^{-1} on the fast path
    q0_factor: object | None  # Cholesky of I_q + tau_rho H H.T otherwise
    inner_factor: object  # Cholesky of I_K + U.T Q0 U
    U: np.ndarray  # H V, q x K


def _apply_q0(ctx: KalmanGainContext, y: np.ndarray) -> np.ndarray:
    if ctx.q0_scale is not None:
        return ctx.q0_scale * y
    return scipy.linalg.cho_solve(ctx.q0_factor, y, check_finite=False)


def make_gain_context(S_hat, H, tau_rho: float) -> KalmanGainContext:
    """Precompute the Woodbury factors for repeated gain applications.

    Cost is O(q d K) to form ``H S_hat`` (O(d K) when ``H`` has O(d)
    nonzeros), plus O(K^3 + q^3) for the factorizations.

    Raises
    ------
    SingularInnerSolve
        If the inner K x K system cannot be factored or is non-finite.
    """
    S_hat = np.asarray(S_hat, dtype=float)
    if S_hat.ndim != 2:
        raise DimensionMismatch("S_hat must be d x K")
    d, K = S_hat.shape
    if K < 2:
        raise DimensionMismatch("S_hat needs at least 2 columns")
    if tau_rho <= 0:
        raise NotPositiveDefinite("tau_rho must be positive")
    V = S_hat / np.sqrt(K - 1)
    eta = _scaled_identity_coeff(H, d)
    if eta is not None:
        U = eta * V
        q0_scale = 1.0 / (1.0 + tau_rho * eta * eta)
        q0_factor = None
        inner = np.eye(K) + q0_scale * (U.T @ U)
    else:
        if scipy.sparse.issparse(H):
            U = np.asarray(H @ V, dtype=float)
            HHt = np.asarray((H @ H.T).todense(), dtype=float)
        else:
            Hd = np.asarray(H, dtype=float)
            U = Hd @ V
            HHt = Hd @ Hd.T
        q = U.shape[0]
        M0 = symmetrize(np.eye(q) + tau_rho * HHt)
        try:
            q0_factor = scipy.linalg.cho_factor(M0, lower=True, check_finite=False)
        except scipy.linalg.LinAlgError as exc:
            raise SingularInnerSolve("I + tau_rho H H.T not factorable") from exc
        q0_scale = None
        Q0U = scipy.linalg.cho_solve(q0_factor, U, check_finite=False)
        inner = np.eye(K) + U.T @ Q0U
    if not np.all(np.isfinite(inner)):
        raise SingularInnerSolve("inner system is non-finite")
    try:
        inner_factor = scipy.linalg.cho_factor(
            symmetrize(inner), lower=True, check_finite=False
        )
    except scipy.linalg.LinAlgError as exc:
        raise SingularInnerSolve("inner K x K system is singular") from exc
    return KalmanGainContext(
        V=V,
        H=H,
        tau_rho=float(tau_rho),
        eta=eta,
        q0_scale=q0_scale,
        q0_factor=q0_factor,
        inner_factor=inner_factor,
        U=U,
    )


def gain_apply_woodbury(ctx: KalmanGainContext, y):
    """Apply the gain to ``y`` (a q-vector or q x m batch) without d x d work.

    Uses ``M^{-1} = Q0 - Q0 U (I_K + U.T Q0 U)^{-1} U.T Q0`` with
    ``Q0 = (I_q + tau_rho H H.T)^{-1}`` and ``U = H S_hat / sqrt(K-1)``,
    then ``G y = V (V.T (H.T w)) + tau_rho H.T w`` where ``w = M^{-1} y``.
    """
    y = np.asarray(y, dtype=float)
    squeeze = y.ndim == 1
    if squeeze:
        y = y[:, None]
    Q0y = _apply_q0(ctx, y)
    t = scipy.linalg.cho_solve(ctx.inner_factor, ctx.U.T @ Q0y, check_finite=False)
    w = Q0y - _apply_q0(ctx, ctx.U @ t)
    if ctx.eta is not None:
        Htw = ctx.eta * w
    else:
        Htw = np.asarray(ctx.H.T @ w)
    out = ctx.V @ (ctx.V.T @ Htw) + ctx.tau_rho * Htw
    return out[:, 0] if squeeze else out


def _power_top_eigs(M: np.ndarray, k: int):
    """Top-k eigenpairs by shifted power iteration with deflation.

    Residual tolerance 1e-10 (relative to the matrix scale), at most
    ``10 * d`` iterations per eigenpair.
    """
    d = M.shape[0]
    scale = float(np.max(np.sum(np.abs(M), axis=1)))  # 1-norm bounds |spec|
    shift = scale + 1.0
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(0x70F0)))
    vals = np.empty(k)
    vecs = np.empty((d, k))
    maxit = 10 * d
    for j in range(k):
        v = rng.standard_normal(d)
        for _ in range(maxit):
            w = M @ v + shift * v
            for i in range(j):
                w -= (vecs[:, i] @ w) * vecs[:, i]
            nw = np.linalg.norm(w)
            if nw == 0.0:
                break
            v = w / nw
            mu = float(v @ (M @ v))
            resid = M @ v - mu * v
            for i in range(j):
                resid -= (vecs[:, i] @ resid) * vecs[:, i]
            if np.linalg.norm(resid) <= _POWER_TOL * max(1.0, scale):
                break
        else:
            raise np.linalg.LinAlgError(
                f"power iteration did not converge for eigenpair {j}"
            )
        nz = np.nonzero(np.abs(v) > 1e-12)[0]
        if nz.size and v[nz[0]] < 0:
            v = -v
        vals[j] = float(v @ (M @ v))
        vecs[:, j] = v
    return vals, vecs


def top_p_projection(C, p: int):
    """Projector onto the span of the top-``p`` eigenvectors of ``C``.

    Parameters
    ----------
    C : (d, d) symmetric
    p : int, 0 <= p <= d

    Returns
    -------
    P : (d, d) ndarray
        Orthogonal projector, exactly symmetric.
    pairs : SpectralDecomp
        The top-``p`` eigenpairs, descending.
    rho_next : float
        The (p+1)-th eigenvalue, 0.0 when ``p == d``.

    Dense solve up to dimension 512, shifted power iteration with
    deflation above that.
    """
    C = _as_square(C, "C")
    d = C.shape[0]
    if not 0 <= p <= d:
        raise DimensionMismatch(f"p={p} out of range for d={d}")
    if d <= DENSE_EIG_MAX_DIM:
        w, V = eigh_desc(C)
        top_w, top_V = w[:p], V[:, :p]
        rho_next = float(w[p]) if p < d else 0.0
    else:
        k = min(p + 1, d)
        w, V = _power_top_eigs(C, k)
        top_w, top_V = w[:p], V[:, :p]
        rho_next = float(w[p]) if p < d else 0.0
    P = symmetrize(top_V @ top_V.T)
    return P, SpectralDecomp(np.array(top_w), np.array(top_V)), rho_next


def positive_part(M) -> np.ndarray:
    """PSD part of a symmetric matrix: negative eigenvalues clamp to zero."""
    M = _as_square(M)
    w, V = np.linalg.eigh(symmetrize(M))
    w = np.maximum(w, 0.0)
    return symmetrize((V * w) @ V.T)


def positive_part_factor(M) -> tuple[np.ndarray, np.ndarray]:
    """Low-rank factor of the PSD part: ``(U, s)`` with part = U diag(s) U.T.

    ``s`` holds only the strictly positive eigenvalues. Diagonal input
    (dense with zero off-diagonal, or sparse) is handled in O(d) without
    an eigensolve; sparse diagonal input yields a sparse selector ``U``
    so that applying the factor stays O(d) as well.
    """
    if scipy.sparse.issparse(M):
        diag = np.asarray(M.diagonal(), dtype=float)
        off = M.count_nonzero() - np.count_nonzero(diag)
        if off == 0:
            idx = np.nonzero(diag > 0.0)[0]
            U = scipy.sparse.csr_matrix(
                (np.ones(idx.size), (idx, np.arange(idx.size))),
                shape=(M.shape[0], idx.size),
            )
            return U, diag[idx]
        M = np.asarray(M.todense())
    M = _as_square(M)
    d = M.shape[0]
    diag = np.diag(M)
    if np.count_nonzero(M - np.diag(diag)) == 0:
        idx = np.nonzero(diag > 0.0)[0]
        U = np.zeros((d, idx.size))
        U[idx, np.arange(idx.size)] = 1.0
        return U, diag[idx]
    w, V = np.linalg.eigh(symmetrize(M))
    pos = w > 0.0
    return V[:, pos], w[pos]


def factor_matrix(factor) -> np.ndarray:
    """Densify a ``(U, s)`` factor into ``U diag(s) U.T``."""
    U, s = factor
    if scipy.sparse.issparse(U):
        U = U.toarray()
    U = np.asarray(U, dtype=float)
    return (U * s) @ U.T


def condition_number(A) -> float:
    """Spectral condition number ``lambda_max / lambda_min`` of a PD matrix."""
    A = _as_square(A, "A")
    w = np.linalg.eigvalsh(symmetrize(A))
    if w[0] <= PD_RTOL * max(1.0, float(w[-1])):
        raise NotPositiveDefinite("A must be positive definite")
    return float(w[-1] / w[0])
