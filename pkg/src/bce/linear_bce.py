"""Closed-form linear estimators ``y_hat = A x``.

Covers the linear BCE in moment form and in model form, LMMSE, WLS, the
(possibly negative) linear ridge, and the scalar toy problem ``x = y + w``
with its analytic Bayesian MSE as a function of the training statistic.

All solves go through Cholesky factorizations; nothing is inverted
explicitly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import linalg

Array = NDArray[np.float64]

DEFAULT_JITTER = 1e-9


class LinearAlgebraError(ValueError):
    """A matrix that must be positive definite or invertible is not."""


@dataclass(frozen=True, eq=False)
class LinearEstimator:
    """``y_hat = A x``; callable on single observations or batches."""

    A: Array

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        if not np.all(np.isfinite(A)):
            raise LinearAlgebraError("estimator matrix has non-finite entries")
        object.__setattr__(self, "A", A)

    def __call__(self, x: ArrayLike) -> Array:
        return np.asarray(x, dtype=float) @ self.A.T

    @property
    def shape(self) -> tuple[int, int]:
        return self.A.shape


@dataclass(frozen=True, eq=False)
class SecondMoments:
    """``Exy = E[y x^T]``, ``Exx = E[x x^T]``, ``R = E[E[x|y] E[x|y]^T]``, ``Sy = E[y y^T]``."""

    Exy: Array
    Exx: Array
    R: Array
    Sy: Array


def _cho(matrix: Array, what: str):
    try:
        return linalg.cho_factor(matrix)
    except linalg.LinAlgError as exc:
        raise LinearAlgebraError(f"{what} is not positive definite") from exc


def _sym(m: Array) -> Array:
    return 0.5 * (m + m.T)


def _right_solve(B: Array, S: Array, what: str) -> Array:
    """``B S^{-1}`` for symmetric positive definite ``S``."""
    cf = _cho(_sym(S), what)
    return linalg.cho_solve(cf, B.T).T


def linear_moments(H: ArrayLike, sigma_n: ArrayLike, sigma_y: ArrayLike) -> SecondMoments:
    """Exact second moments of the zero-mean linear model ``x = H y + n``."""
    H = np.atleast_2d(np.asarray(H, float))
    Sn = np.atleast_2d(np.asarray(sigma_n, float))
    Sy = np.atleast_2d(np.asarray(sigma_y, float))
    R = H @ Sy @ H.T
    return SecondMoments(Exy=Sy @ H.T, Exx=R + Sn, R=R, Sy=Sy)


def empirical_moments(y: ArrayLike, x: ArrayLike) -> SecondMoments:
    """Moments from grouped samples ``y (N, d)`` and ``x (N, M, n)``.

    ``R`` uses the group means of x as plug-ins for ``E[x|y]``, with the
    ``1/M`` within-group noise contribution removed.
    """
    y = np.asarray(y, float)
    x = np.asarray(x, float)
    N, M, n = x.shape
    flat = x.reshape(N * M, n)
    yy = np.repeat(y, M, axis=0)
    Exx = flat.T @ flat / (N * M)
    Exy = yy.T @ flat / (N * M)
    mean_x = x.mean(axis=1)
    within = (flat - np.repeat(mean_x, M, axis=0))
    cond_cov = within.T @ within / (N * (M - 1)) if M > 1 else np.zeros((n, n))
    R = mean_x.T @ mean_x / N - cond_cov / M
    Sy = y.T @ y / N
    return SecondMoments(Exy=Exy, Exx=Exx, R=_sym(R), Sy=Sy)


def lbce_moment_form(m: SecondMoments, lam: float) -> LinearEstimator:
    """``A = Exy [Exx/(lam+1) + lam R/(lam+1)]^{-1}``."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    blend = (m.Exx + lam * m.R) / (lam + 1.0)
    return LinearEstimator(_right_solve(m.Exy, blend, "moment blend"))


def lbce_model_form(H: ArrayLike, sigma_n: ArrayLike, sigma_y: ArrayLike, lam: float,
                    jitter: float = DEFAULT_JITTER) -> LinearEstimator:
    """``A = (H^T Sn^{-1} H + Sy^{-1}/(lam+1))^{-1} H^T Sn^{-1}``.

    A PSD but singular ``sigma_y`` (one Cholesky cannot factor) is
    regularized by ``jitter * I`` before it is inverted.
    """
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return _prior_regularized(H, sigma_n, sigma_y, 1.0 / (lam + 1.0), jitter)


def _prior_regularized(H, sigma_n, sigma_y, prior_weight: float, jitter: float) -> LinearEstimator:
    H = np.atleast_2d(np.asarray(H, float))
    Sn = np.atleast_2d(np.asarray(sigma_n, float))
    Sy = np.atleast_2d(np.asarray(sigma_y, float))
    d = H.shape[1]
    cn = _cho(Sn, "noise covariance")
    HtSinv = linalg.cho_solve(cn, H).T            # H^T Sn^{-1}
    try:
        cy = linalg.cho_factor(_sym(Sy))
    except linalg.LinAlgError:
        # singular prior: regularize only when it cannot be factored as is
        cy = _cho(_sym(Sy) + jitter * np.eye(d), "prior covariance")
    Sy_inv = linalg.cho_solve(cy, np.eye(d))
    inner = HtSinv @ H + prior_weight * _sym(Sy_inv)
    ci = _cho(_sym(inner), "inner matrix")
    return LinearEstimator(linalg.cho_solve(ci, HtSinv))


def lmmse(H: ArrayLike, sigma_n: ArrayLike, sigma_y: ArrayLike, jitter: float = DEFAULT_JITTER) -> LinearEstimator:
    """Bayesian linear regression, ``(H^T Sn^{-1} H + Sy^{-1})^{-1} H^T Sn^{-1}``."""
    return _prior_regularized(H, sigma_n, sigma_y, 1.0, jitter)


def wls(H: ArrayLike, sigma_n: ArrayLike) -> LinearEstimator:
    """Weighted least squares ``(H^T Sn^{-1} H)^{-1} H^T Sn^{-1}``."""
    H = np.atleast_2d(np.asarray(H, float))
    Sn = np.atleast_2d(np.asarray(sigma_n, float))
    if np.linalg.matrix_rank(H) < H.shape[1]:
        raise LinearAlgebraError("H is not full column rank")
    cn = _cho(Sn, "noise covariance")
    HtSinv = linalg.cho_solve(cn, H).T
    ci = _cho(_sym(HtSinv @ H), "H^T Sn^-1 H")
    return LinearEstimator(linalg.cho_solve(ci, HtSinv))


def ridge_linear(H: ArrayLike, sigma_n: ArrayLike, sy_hat: ArrayLike, lam: float,
                 jitter: float = DEFAULT_JITTER) -> LinearEstimator:
    """LMMSE with the noise covariance replaced by ``Sn + lam I``.

    Negative ``lam`` is allowed while ``Sn + lam I`` stays positive definite.
    """
    Sn = np.atleast_2d(np.asarray(sigma_n, float))
    tilde = Sn + lam * np.eye(Sn.shape[0])
    try:
        np.linalg.cholesky(tilde)
    except np.linalg.LinAlgError as exc:
        raise LinearAlgebraError(f"Sigma_n + {lam} I is not positive definite") from exc
    return _prior_regularized(H, tilde, sy_hat, 1.0, jitter)


def empirical_second_moment(samples: ArrayLike, jitter: float = DEFAULT_JITTER) -> Array:
    """``(1/N) sum y_i y_i^T + jitter I``."""
    y = np.atleast_2d(np.asarray(samples, float))
    return _sym(y.T @ y / y.shape[0]) + jitter * np.eye(y.shape[1])


def linear_bmse(A: ArrayLike, H: ArrayLike, sigma_n: ArrayLike, sigma_y: ArrayLike) -> float:
    """Exact Bayesian MSE of ``A x`` when ``y ~ N(0, sigma_y)``."""
    A = np.atleast_2d(np.asarray(A, float))
    E = A @ np.atleast_2d(H) - np.eye(A.shape[0])
    return float(np.trace(E @ np.atleast_2d(sigma_y) @ E.T) + np.trace(A @ np.atleast_2d(sigma_n) @ A.T))


# ---------------------------------------------------------------------------
# Scalar toy problem x = y + w, w ~ N(0, 1), y ~ N(0, rho)
# ---------------------------------------------------------------------------


def scalar_lbce(ybar2: float, lam: float) -> float:
    return ybar2 / (ybar2 + 1.0 / (lam + 1.0))


def scalar_ridge(ybar2: float, rho: float, lam: float) -> float:
    return ybar2 / (ybar2 + 1.0 + rho * lam)


def ridge_equiv_lambda(lam_bce: float, rho: float) -> float:
    """Ridge weight giving the same scalar estimator as BCE weight ``lam_bce``."""
    return (1.0 / (lam_bce + 1.0) - 1.0) / rho


def scalar_bmse_given_zn(z_n: ArrayLike, alpha: float, lam: float) -> Array | float:
    """BMSE of the scalar LBCE given the training statistic ``z_N``; ``alpha = 1/rho``."""
    z = np.asarray(z_n, dtype=float)
    out = (alpha + z * z * (lam + 1.0) ** 2) / ((lam + 1.0) * z + alpha) ** 2
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class McEstimate:
    mean: float
    stderr: float


def sample_zn(N: int, reps: int, rng: np.random.Generator) -> Array:
    """Draws of ``z_N ~ chi2_N / N``."""
    return rng.chisquare(N, size=reps) / N


def bmse_n_expectation(N: int, rho: float, lam: float, reps: int, rng: np.random.Generator | None = None,
                       z_n: ArrayLike | None = None) -> McEstimate:
    """Monte-Carlo average over training sets of the scalar BMSE.

    Passing ``z_n`` evaluates on fixed draws (common random numbers across
    a lambda grid).
    """
    if z_n is None:
        if reps < 10_000:
            raise ValueError("reps must be >= 1e4")
        z_n = sample_zn(N, reps, rng)
    vals = scalar_bmse_given_zn(np.asarray(z_n), 1.0 / rho, lam)
    return McEstimate(float(np.mean(vals)), float(np.std(vals, ddof=1) / np.sqrt(vals.size)))
