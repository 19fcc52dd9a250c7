"""Parametric observation models p(x; y).

Three models are provided:

* :class:`LinearGaussianModel` -- ``x = H y + n`` with ``n ~ N(0, Sigma_n)``.
* :class:`SnrModel` -- non-data-aided BPSK, ``x_l = a_l h + w_l`` with
  equiprobable ``a_l = +-1`` and ``w_l ~ N(0, sigma2)``; the unknown is the
  SNR ``y = h**2 / sigma2``.
* :class:`StructuredCovModel` -- zero-mean Gaussian vectors in R^5 whose
  covariance is an affine, sparse function of nine parameters in [0, 1].

All models are immutable and expose a common sampling surface
(``param_dim``, ``obs_shape``, ``sample``, ``sample_groups``) so the data
generator and the evaluation harness can treat them uniformly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike, NDArray
from scipy import linalg

Array = NDArray[np.float64]

LOG_2PI = math.log(2.0 * math.pi)
LOG_2 = math.log(2.0)


class ModelError(ValueError):
    """Raised on invalid model parameters or dimension mismatches."""


def _as_spd(matrix: ArrayLike, name: str) -> tuple[Array, Array]:
    m = np.array(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ModelError(f"{name} must be square, got shape {m.shape}")
    if not np.allclose(m, m.T, rtol=0, atol=1e-12 * max(1.0, np.abs(m).max())):
        raise ModelError(f"{name} must be symmetric")
    try:
        chol = np.linalg.cholesky(m)
    except np.linalg.LinAlgError as exc:
        raise ModelError(f"{name} is not positive definite") from exc
    return m, chol


@dataclass(frozen=True)
class FisherInfo:
    """Fisher information matrix of a model at a parameter value."""

    matrix: Array

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        if m.shape[0] != m.shape[1]:
            raise ModelError("Fisher information must be square")
        if not np.allclose(m, m.T, rtol=1e-8, atol=1e-12 * max(1.0, float(np.abs(m).max()))):
            raise ModelError("Fisher information must be symmetric")
        object.__setattr__(self, "matrix", m)

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def crb_trace(self) -> float:
        return crb_trace(self)


def crb_trace(fim: FisherInfo | ArrayLike) -> float:
    """Trace of the inverse Fisher information (the Cramer-Rao bound)."""
    m = fim.matrix if isinstance(fim, FisherInfo) else np.atleast_2d(np.asarray(fim, float))
    try:
        c, low = linalg.cho_factor(m)
    except linalg.LinAlgError as exc:
        raise ModelError("Fisher information is singular or indefinite") from exc
    inv = linalg.cho_solve((c, low), np.eye(m.shape[0]))
    return float(np.trace(inv))


# ---------------------------------------------------------------------------
# Linear Gaussian model
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LinearGaussianModel:
    """``x = H y + n`` with Gaussian noise of covariance ``sigma_n``."""

    H: Array
    sigma_n: Array
    _chol: Array = field(init=False, repr=False)

    def __post_init__(self):
        H = np.atleast_2d(np.array(self.H, dtype=float))
        sigma_n, chol = _as_spd(self.sigma_n, "sigma_n")
        if sigma_n.shape[0] != H.shape[0]:
            raise ModelError(f"H has {H.shape[0]} rows but sigma_n is {sigma_n.shape}")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "sigma_n", sigma_n)
        object.__setattr__(self, "_chol", chol)

    @property
    def n(self) -> int:
        return self.H.shape[0]

    @property
    def param_dim(self) -> int:
        return self.H.shape[1]

    @property
    def obs_shape(self) -> tuple[int, ...]:
        return (self.n,)

    def _check_y(self, y: ArrayLike) -> Array:
        y = np.asarray(y, dtype=float)
        if y.shape[-1] != self.param_dim:
            raise ModelError(f"y has dimension {y.shape[-1]}, model expects {self.param_dim}")
        return y

    def sample(self, y: ArrayLike, rng: np.random.Generator, size: int | None = None) -> Array:
        """Draw ``size`` observations at ``y`` (a single one if ``size`` is None)."""
        y = self._check_y(y)
        if y.ndim != 1:
            raise ModelError("sample expects a single parameter vector")
        shape = (self.n,) if size is None else (size, self.n)
        z = rng.standard_normal(shape)
        return self.H @ y + z @ self._chol.T

    def sample_groups(self, ys: ArrayLike, m: int, rng: np.random.Generator, nuisance=None) -> Array:
        """Draw ``m`` observations for each row of ``ys``; shape (N, m, n)."""
        ys = np.atleast_2d(self._check_y(ys))
        z = rng.standard_normal((ys.shape[0], m, self.n))
        return (ys @ self.H.T)[:, None, :] + z @ self._chol.T

    def fim(self, y: ArrayLike | None = None) -> FisherInfo:
        return lin_fim(self)

    def crb(self, y: ArrayLike | None = None) -> float:
        return crb_trace(lin_fim(self))

    def descriptor(self) -> dict:
        return {"kind": "linear", "H": self.H.tolist(), "sigma_n": self.sigma_n.tolist()}


def lin_sample(model: LinearGaussianModel, y: ArrayLike, rng: np.random.Generator, size: int | None = None) -> Array:
    return model.sample(y, rng, size)


def lin_fim(model: LinearGaussianModel) -> FisherInfo:
    """``H^T Sigma_n^{-1} H``; the same for every ``y``."""
    cf = linalg.cho_factor(model.sigma_n)
    return FisherInfo(model.H.T @ linalg.cho_solve(cf, model.H))


# ---------------------------------------------------------------------------
# SNR model
# ---------------------------------------------------------------------------

# grid and clipping ranges used by the maximum likelihood estimator
SNR_H_RANGE = (0.1, 20.0)
SNR_SIGMA2_RANGE = (1e-3, 1e2)
SNR_CLIP = (1e-3, 1e3)


def _logcosh(z: Array) -> Array:
    a = np.abs(z)
    return a + np.log1p(np.exp(-2.0 * a)) - LOG_2


def _check_h_sigma2(h: float, sigma2: float) -> None:
    if not (h > 0):
        raise ModelError(f"h must be positive, got {h}")
    if not (sigma2 > 0):
        raise ModelError(f"sigma2 must be positive, got {sigma2}")


@dataclass(frozen=True)
class SnrModel:
    """Non-data-aided BPSK observations of length ``p``.

    The estimated parameter is the scalar SNR ``y = h**2 / sigma2``; the
    amplitude ``h`` is a nuisance parameter. Samplers that take ``y`` accept
    an optional ``h`` (default 1) and set ``sigma2 = h**2 / y``.
    """

    p: int

    def __post_init__(self):
        if int(self.p) != self.p or self.p < 1:
            raise ModelError(f"p must be a positive integer, got {self.p}")

    param_dim = 1

    @property
    def obs_shape(self) -> tuple[int, ...]:
        return (self.p,)

    def sample_hs(self, h: float, sigma2: float, rng: np.random.Generator, size: int | None = None) -> Array:
        _check_h_sigma2(h, sigma2)
        shape = (self.p,) if size is None else (size, self.p)
        a = 2.0 * rng.integers(0, 2, size=shape, dtype=np.int8) - 1.0
        return a * h + math.sqrt(sigma2) * rng.standard_normal(shape)

    def sample(self, y: ArrayLike, rng: np.random.Generator, size: int | None = None, h: float = 1.0) -> Array:
        snr = float(np.asarray(y, dtype=float).reshape(-1)[0])
        if not snr > 0:
            raise ModelError(f"SNR must be positive, got {snr}")
        return self.sample_hs(h, h * h / snr, rng, size)

    def sample_groups(self, ys: ArrayLike, m: int, rng: np.random.Generator, nuisance: ArrayLike | None = None) -> Array:
        snr = np.asarray(ys, dtype=float).reshape(-1)
        if np.any(snr <= 0):
            raise ModelError("SNR values must be positive")
        h = np.ones_like(snr) if nuisance is None else np.asarray(nuisance, float).reshape(-1)
        if np.any(h <= 0):
            raise ModelError("h must be positive")
        sigma = h / np.sqrt(snr)
        shape = (snr.size, m, self.p)
        a = 2.0 * rng.integers(0, 2, size=shape, dtype=np.int8) - 1.0
        return a * h[:, None, None] + sigma[:, None, None] * rng.standard_normal(shape)

    def descriptor(self) -> dict:
        return {"kind": "snr", "p": self.p}


def snr_sample(model: SnrModel, h: float, sigma2: float, rng: np.random.Generator, size: int | None = None) -> Array:
    return model.sample_hs(h, sigma2, rng, size)


def snr_loglik(model: SnrModel, x: ArrayLike, h: float, sigma2: float) -> float | Array:
    """Log-likelihood of the two-component Gaussian mixture.

    ``x`` may hold one observation of length ``p`` or a batch with the
    samples on the last axis; the result is summed over that axis.
    """
    if not sigma2 > 0:
        raise ModelError(f"sigma2 must be positive, got {sigma2}")
    x = np.asarray(x, dtype=float)
    comp_plus = -0.5 * (LOG_2PI + math.log(sigma2)) - (x - h) ** 2 / (2.0 * sigma2)
    comp_minus = -0.5 * (LOG_2PI + math.log(sigma2)) - (x + h) ** 2 / (2.0 * sigma2)
    ll = np.logaddexp(comp_plus, comp_minus) - LOG_2
    out = ll.sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def snr_score(x: ArrayLike, h: float, sigma2: float) -> Array:
    """Per-sample score of the mixture density wrt ``(h, sigma2)``; shape (..., 2)."""
    x = np.asarray(x, dtype=float)
    th = np.tanh(x * h / sigma2)
    d_h = -h / sigma2 + x * th / sigma2
    d_s = -0.5 / sigma2 + (x * x + h * h) / (2.0 * sigma2**2) - x * h * th / sigma2**2
    return np.stack([d_h, d_s], axis=-1)


@dataclass(frozen=True)
class SnrFim:
    fim: FisherInfo
    crb: float
    reps: int


def snr_fim_mc(model: SnrModel, h: float, sigma2: float, reps: int, rng: np.random.Generator) -> SnrFim:
    """Monte-Carlo Fisher information in ``(h, sigma2)`` and the CRB of the SNR.

    The per-sample information is the average outer product of the analytic
    score; the CRB of ``y = h**2/sigma2`` follows by the delta method.
    """
    _check_h_sigma2(h, sigma2)
    if reps < 10_000:
        raise ModelError("snr_fim_mc needs reps >= 1e4")
    x = SnrModel(1).sample_hs(h, sigma2, rng, size=reps)[:, 0]
    s = snr_score(x, h, sigma2)
    per_sample = s.T @ s / reps
    try:
        np.linalg.cholesky(per_sample)
    except np.linalg.LinAlgError as exc:
        raise ModelError("Monte-Carlo FIM is not positive definite; increase reps") from exc
    g = np.array([2.0 * h / sigma2, -(h * h) / sigma2**2])
    crb = float(g @ np.linalg.solve(per_sample, g)) / model.p
    return SnrFim(FisherInfo(model.p * per_sample), crb, reps)


def _profile_sigma2(t: Array, s2: Array, p: int) -> Array:
    # maximizer in sigma2 of -p/2 log s - S2/(2 s) - p t^2 s / 2 for fixed t = h/sigma2
    t2 = t * t
    small = t2 * s2 < 1e-12 * p
    safe_t2 = np.where(small, 1.0, t2)
    root = (-p + np.sqrt(p * p + 4.0 * p * safe_t2 * s2)) / (2.0 * p * safe_t2)
    sig = np.where(small, s2 / p, root)
    return np.clip(sig, *SNR_SIGMA2_RANGE)


def _profile_loglik(t: Array, x: Array) -> tuple[Array, Array]:
    """Profile log-likelihood over ``sigma2`` for ratios ``t``.

    ``x`` has shape (R, p); ``t`` has shape (R, G). Returns (loglik, sigma2).
    """
    p = x.shape[-1]
    s2 = np.sum(x * x, axis=-1, keepdims=True)
    sig = _profile_sigma2(t, s2, p)
    lc = _logcosh(t[:, :, None] * x[:, None, :]).sum(axis=-1)
    h = t * sig
    ll = -0.5 * p * (LOG_2PI + np.log(sig)) - (s2 + p * h * h) / (2.0 * sig) + lc
    return ll, sig


def snr_grid_init(x: ArrayLike, grid_size: int = 60) -> tuple[Array, Array]:
    """Grid stage of the MLE. Returns (h, sigma2) per observation.

    The grid covers the ratio ``t = h/sigma2`` spanned by the (h, sigma2)
    box; ``sigma2`` is profiled in closed form for each grid ratio.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    t_lo = SNR_H_RANGE[0] / SNR_SIGMA2_RANGE[1]
    t_hi = SNR_H_RANGE[1] / SNR_SIGMA2_RANGE[0]
    n_grid = 4 * grid_size
    grid = np.concatenate([[0.0], np.geomspace(t_lo, t_hi, n_grid - 1)])
    best_t = np.empty(x.shape[0])
    best_s = np.empty(x.shape[0])
    chunk = max(1, 200_000 // (n_grid * x.shape[1]))
    for start in range(0, x.shape[0], chunk):
        xs = x[start:start + chunk]
        t = np.broadcast_to(grid, (xs.shape[0], n_grid))
        ll, sig = _profile_loglik(t, xs)
        k = np.argmax(ll, axis=1)
        rows = np.arange(xs.shape[0])
        best_t[start:start + chunk] = grid[k]
        best_s[start:start + chunk] = sig[rows, k]
    return best_t * best_s, best_s


def snr_mle(
    model: SnrModel,
    x: ArrayLike,
    steps: int = 50,
    grid_size: int = 60,
    return_params: bool = False,
):
    """Maximum likelihood estimate of the SNR for one or many observations.

    A grid over the amplitude-to-variance ratio seeds a shrinking-step
    ascent in ``log t`` (with ``sigma2`` profiled exactly at every trial
    point). The SNR estimate is clipped to ``SNR_CLIP``.

    Args:
        model: the SNR model (only ``p`` is used for validation).
        x: array of shape (p,) or (R, p).
        steps: number of refinement steps.
        grid_size: resolution parameter of the initial grid.
        return_params: also return the fitted ``(h, sigma2)`` arrays.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[-1] != model.p:
        raise ModelError(f"observation length {x.shape[-1]} != p = {model.p}")
    if model.p < 2:
        raise ModelError("snr_mle needs p >= 2")
    if np.any(np.sum(x * x, axis=-1) <= 0):
        raise ModelError("degenerate all-zero observation")

    h0, s0 = snr_grid_init(x, grid_size)
    t = h0 / s0
    t_floor = SNR_H_RANGE[0] / SNR_SIGMA2_RANGE[1] / 10.0
    log_t = np.log(np.maximum(t, t_floor))
    ll = _profile_loglik(np.exp(log_t)[:, None], x)[0][:, 0]
    step = np.full(x.shape[0], math.log(SNR_H_RANGE[1] / SNR_H_RANGE[0]) / (grid_size - 1))
    for _ in range(steps):
        cand = np.stack([log_t - step, log_t + step], axis=1)
        cll, _ = _profile_loglik(np.exp(cand), x)
        k = np.argmax(cll, axis=1)
        best = cll[np.arange(x.shape[0]), k]
        improve = best > ll
        log_t = np.where(improve, cand[np.arange(x.shape[0]), k], log_t)
        ll = np.where(improve, best, ll)
        step = np.where(improve, step, 0.5 * step)

    # h = 0 is the low-SNR boundary of the ratio search
    ll0 = _profile_loglik(np.zeros((x.shape[0], 1)), x)[0][:, 0]
    t = np.where(ll0 > ll, 0.0, np.exp(log_t))
    s2 = np.sum(x * x, axis=-1)
    sigma2 = _profile_sigma2(t, s2, model.p)
    h = t * sigma2
    y = np.clip(h * h / sigma2, *SNR_CLIP)
    if single:
        y, h, sigma2 = float(y[0]), float(h[0]), float(sigma2[0])
    if return_params:
        return y, h, sigma2
    return y


def snr_moments_estimate(m2: float, m4: float) -> tuple[float, float]:
    """Method-of-moments ``(h**2, sigma2)`` from the second and fourth moments.

    Uses ``m2 = h^2 + s`` and ``m4 = h^4 + 6 h^2 s + 3 s^2``, which give
    ``h^4 = (3 m2^2 - m4) / 2``.
    """
    h4 = max((3.0 * m2 * m2 - m4) / 2.0, 0.0)
    h2 = min(math.sqrt(h4), m2)
    return h2, m2 - h2


# ---------------------------------------------------------------------------
# Structured covariance model
# ---------------------------------------------------------------------------

COV_DIM = 5
COV_PARAMS = 9
# (row, col, scale) of the entry each parameter controls, zero-based
_COV_ENTRIES = [
    (0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0), (3, 3, 1.0), (4, 4, 1.0),
    (0, 3, 0.5), (1, 3, 0.5), (2, 4, 0.5), (3, 4, 0.5),
]


def _pattern_matrices() -> Array:
    pats = np.zeros((COV_PARAMS, COV_DIM, COV_DIM))
    for k, (i, j, s) in enumerate(_COV_ENTRIES):
        pats[k, i, j] = s
        pats[k, j, i] = s
    return pats


COV_PATTERNS = _pattern_matrices()
COV_PATTERNS.flags.writeable = False


def cov_build_sigma(y: ArrayLike, check: bool = True) -> Array:
    """The 5x5 structured covariance for parameters ``y`` in [0, 1]^9.

    Accepts a single vector or a batch of shape (B, 9).
    """
    y = np.asarray(y, dtype=float)
    if y.shape[-1] != COV_PARAMS:
        raise ModelError(f"expected {COV_PARAMS} parameters, got {y.shape[-1]}")
    if check and (np.any(y < 0) or np.any(y > 1)):
        raise ModelError("structured covariance parameters must lie in [0, 1]")
    sigma = np.eye(COV_DIM) + np.tensordot(y, COV_PATTERNS, axes=([-1], [0]))
    if check:
        try:
            np.linalg.cholesky(sigma)
        except np.linalg.LinAlgError as exc:
            raise ModelError("structured covariance is not positive definite") from exc
    return sigma


@dataclass(frozen=True)
class StructuredCovModel:
    """``p_samples`` i.i.d. N(0, Sigma(y)) vectors per observation."""

    p_samples: int

    def __post_init__(self):
        if int(self.p_samples) != self.p_samples or self.p_samples < 1:
            raise ModelError("p_samples must be a positive integer")

    param_dim = COV_PARAMS

    @property
    def obs_shape(self) -> tuple[int, ...]:
        return (self.p_samples, COV_DIM)

    def sample(self, y: ArrayLike, rng: np.random.Generator, size: int | None = None) -> Array:
        chol = np.linalg.cholesky(cov_build_sigma(y))
        shape = (self.p_samples, COV_DIM) if size is None else (size, self.p_samples, COV_DIM)
        return rng.standard_normal(shape) @ chol.T

    def sample_groups(self, ys: ArrayLike, m: int, rng: np.random.Generator, nuisance=None) -> Array:
        ys = np.atleast_2d(np.asarray(ys, dtype=float))
        chol = np.linalg.cholesky(cov_build_sigma(ys))
        z = rng.standard_normal((ys.shape[0], m, self.p_samples, COV_DIM))
        return np.einsum("nmpj,nij->nmpi", z, chol)

    def fim(self, y: ArrayLike) -> FisherInfo:
        return cov_fim(self, y)

    def crb(self, y: ArrayLike) -> float:
        return crb_trace(cov_fim(self, y))

    def descriptor(self) -> dict:
        return {"kind": "covariance", "p_samples": self.p_samples}


def cov_sample(model: StructuredCovModel, y: ArrayLike, rng: np.random.Generator, size: int | None = None) -> Array:
    return model.sample(y, rng, size)


def cov_fim(model: StructuredCovModel, y: ArrayLike) -> FisherInfo:
    """``F_kl = (p/2) tr(S^-1 P_k S^-1 P_l)`` with constant patterns ``P_k``."""
    sigma = cov_build_sigma(y)
    try:
        cf = linalg.cho_factor(sigma)
    except linalg.LinAlgError as exc:
        raise ModelError("singular covariance") from exc
    w = np.stack([linalg.cho_solve(cf, P) for P in COV_PATTERNS])
    f = 0.5 * model.p_samples * np.einsum("kij,lji->kl", w, w)
    return FisherInfo(0.5 * (f + f.T))


def cov_sample_covariance(x: ArrayLike) -> Array:
    """Zero-mean sample covariance over the second-to-last axis."""
    x = np.asarray(x, dtype=float)
    return np.einsum("...pi,...pj->...ij", x, x) / x.shape[-2]


def cov_project(c: ArrayLike) -> Array:
    """Least-squares projection of a covariance onto the parameterization."""
    c = np.asarray(c, dtype=float)
    out = []
    for i, j, s in _COV_ENTRIES:
        if i == j:
            out.append(c[..., i, i] - 1.0)
        else:
            out.append(0.5 * (c[..., i, j] + c[..., j, i]) / s)
    return np.stack(out, axis=-1)


def build_model(desc: dict):
    """Construct a model from its JSON descriptor."""
    kind = desc.get("kind")
    if kind == "linear":
        return LinearGaussianModel(np.asarray(desc["H"], float), np.asarray(desc["sigma_n"], float))
    if kind == "snr":
        return SnrModel(int(desc["p"]))
    if kind == "covariance":
        return StructuredCovModel(int(desc["p_samples"]))
    raise ModelError(f"unknown model kind {kind!r}")
