"""Monte-Carlo evaluation of estimators at fixed parameter values.

An *estimator* here is any callable that maps a batch of observations with
shape (R, *obs_shape) to estimates of shape (R, d) (or (R,) for scalar
parameters). Closed-form :class:`~bce.linear_bce.LinearEstimator` objects,
trained networks and :func:`~bce.statmodels.snr_mle` wrapped by
:func:`mle_estimator` all qualify.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .linear_bce import (
    LinearAlgebraError,
    empirical_second_moment,
    lbce_model_form,
    linear_bmse,
    lmmse,
    ridge_linear,
)
from .rng import SeedLike, as_seedseq, seeded_map
from .statmodels import SNR_CLIP, SnrModel, snr_mle

Array = NDArray[np.float64]
log = logging.getLogger(__name__)


def mle_estimator(model: SnrModel) -> Callable[[Array], Array]:
    return lambda x: np.atleast_1d(snr_mle(model, x))


def _estimates(estimator, x: Array, d: int) -> Array:
    est = np.asarray(estimator(x), dtype=float)
    return est.reshape(x.shape[0], d)


def _draw(model, y: Array, reps: int, rng: np.random.Generator, nuisance) -> Array:
    nu = None if nuisance is None else np.atleast_1d(nuisance)
    return model.sample_groups(y[None, :], reps, rng, nu)[0]


@dataclass
class MetricsRecord:
    """Monte-Carlo bias, variance and MSE of an estimator at one ``y``.

    ``variance`` is the trace of the error covariance about the mean
    estimate, normalized by ``reps``, so ``mse = variance + |bias|^2``
    holds exactly.
    """

    y: Array
    bias: Array
    variance: float
    mse: float
    reps: int
    bias_se: Array
    variance_se: float
    mse_se: float
    crb: float | None = None

    @property
    def bias_norm(self) -> float:
        return float(np.linalg.norm(self.bias))

    @property
    def mse_over_crb(self) -> float | None:
        return None if self.crb is None else self.mse / self.crb

    def row(self) -> dict:
        out = {}
        for i, v in enumerate(self.y):
            out[f"y{i}"] = v
        for i, v in enumerate(self.bias):
            out[f"bias{i}"] = v
        out.update(var=self.variance, mse=self.mse,
                   mse_over_y2=self.mse / float(self.y @ self.y) if np.any(self.y) else math.nan,
                   crb=math.nan if self.crb is None else self.crb)
        for i, v in enumerate(self.bias_se):
            out[f"bias{i}_se"] = v
        out.update(var_se=self.variance_se, mse_se=self.mse_se, reps=self.reps)
        return out


def metrics_from_estimates(y: ArrayLike, est: ArrayLike, crb: float | None = None) -> MetricsRecord:
    y = np.atleast_1d(np.asarray(y, dtype=float))
    est = np.asarray(est, dtype=float).reshape(-1, y.size)
    R = est.shape[0]
    err = est - y
    bias = err.mean(axis=0)
    dev = est - est.mean(axis=0)
    dev2 = np.sum(dev * dev, axis=1)
    err2 = np.sum(err * err, axis=1)
    sqrt_r = math.sqrt(R)
    ddof = 1 if R > 1 else 0
    return MetricsRecord(
        y=y, bias=bias, variance=float(dev2.mean()), mse=float(err2.mean()), reps=R,
        bias_se=err.std(axis=0, ddof=ddof) / sqrt_r,
        variance_se=float(dev2.std(ddof=ddof) / sqrt_r),
        mse_se=float(err2.std(ddof=ddof) / sqrt_r),
        crb=crb,
    )


def eval_point(estimator, model, y: ArrayLike, reps: int, rng: np.random.Generator,
               crb: float | None = None, nuisance=None) -> MetricsRecord:
    """Monte-Carlo bias/variance/MSE of ``estimator`` at parameter ``y``.

    If ``crb`` is not given and the model has a deterministic ``crb``
    method it is filled in.
    """
    if reps < 100:
        raise ValueError("eval_point needs reps >= 100")
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if y.size != model.param_dim:
        raise ValueError(f"y has dimension {y.size}, model expects {model.param_dim}")
    x = _draw(model, y, reps, rng, nuisance)
    est = _estimates(estimator, x, y.size)
    if crb is None and hasattr(model, "crb"):
        crb = model.crb(y)
    return metrics_from_estimates(y, est, crb)


def eval_sweep(estimator, model, grid: Sequence[ArrayLike], reps: int, seed: SeedLike,
               threads: int = 1, crb: Sequence[float] | None = None, nuisance=None) -> list[MetricsRecord]:
    """:func:`eval_point` over a grid, one substream per grid point, in grid order."""
    grid = [np.atleast_1d(np.asarray(g, dtype=float)) for g in grid]
    crbs = [None] * len(grid) if crb is None else list(crb)

    def task(item, rng):
        i, y = item
        return eval_point(estimator, model, y, reps, rng, crbs[i], nuisance)

    return seeded_map(task, list(enumerate(grid)), seed, threads)


def inverse_snr_errors(estimates: ArrayLike, y: float) -> Array:
    est = np.clip(np.asarray(estimates, dtype=float).reshape(-1), *SNR_CLIP)
    return (1.0 / est - 1.0 / y) ** 2


def inverse_snr_mse(estimator, model, y: float, reps: int, rng: np.random.Generator, nuisance=None) -> float:
    """Monte-Carlo ``E[(1/y_hat - 1/y)^2]`` with estimates clipped away from 0."""
    yv = np.atleast_1d(float(y))
    x = _draw(model, yv, reps, rng, nuisance)
    return float(inverse_snr_errors(estimator(x), float(y)).mean())


def crb_scatter(estimator, model, test_prior, count: int, reps: int, seed: SeedLike,
                threads: int = 1) -> list[tuple[float, float]]:
    """(CRB, MSE) pairs at ``count`` parameters drawn from ``test_prior``, sorted by CRB."""
    records = crb_scatter_records(estimator, model, test_prior, count, reps, seed, threads)
    return sorted(((r.crb, r.mse) for r in records), key=lambda p: p[0])


def crb_scatter_records(estimator, model, test_prior, count: int, reps: int, seed: SeedLike,
                        threads: int = 1) -> list[MetricsRecord]:
    prior_seq, eval_seq = as_seedseq(seed).spawn(2)
    ys = test_prior.sample(count, np.random.default_rng(prior_seq))[0]
    return eval_sweep(estimator, model, list(ys), reps, eval_seq, threads)


@dataclass
class AveragingCurve:
    m_t: list[int]
    mse: list[float]
    bias_norm: list[float]
    variance: list[float]
    records: list[MetricsRecord] = field(default_factory=list)

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.m_t, self.m_t[1:])):
            raise ValueError("M_t values must be strictly increasing")

    def log_variance_slope(self) -> float:
        return float(np.polyfit(np.log(self.m_t), np.log(self.variance), 1)[0])


def averaging_eval(estimator, model, y: ArrayLike, m_list: Sequence[int], reps: int,
                   rng: np.random.Generator, nuisance=None) -> AveragingCurve:
    """Average ``M_t`` local estimates of the same ``y``; metrics per ``M_t``."""
    y = np.atleast_1d(np.asarray(y, dtype=float))
    m_list = [int(m) for m in m_list]
    recs = []
    for m_t in m_list:
        x = model.sample_groups(np.repeat(y[None, :], reps, axis=0), m_t, rng,
                                None if nuisance is None else np.full(reps, nuisance))
        local = _estimates(estimator, x.reshape(reps * m_t, *x.shape[2:]), y.size)
        recs.append(metrics_from_estimates(y, local.reshape(reps, m_t, y.size).mean(axis=1)))
    return AveragingCurve(m_list, [r.mse for r in recs], [r.bias_norm for r in recs],
                          [r.variance for r in recs], recs)


class ShiftedEstimator:
    """Adds a constant offset to another estimator's output."""

    def __init__(self, base, offset: float):
        self.base = base
        self.offset = offset

    def __call__(self, x):
        return np.asarray(self.base(x), dtype=float) + self.offset


# ---------------------------------------------------------------------------
# Linear regularization experiment
# ---------------------------------------------------------------------------


@dataclass
class RegularizationSetup:
    """Linear Gaussian model with a Gaussian prior on ``y``."""

    H: Array
    sigma_n: Array
    sigma_y: Array

    @classmethod
    def random(cls, n: int = 20, d: int = 20, low_eig: float = 0.01, high_eig: float = 100.0,
               n_low: int = 5, noise_spread: float = 0.5, seed: SeedLike = 0) -> "RegularizationSetup":
        """Random instance: non-diagonal noise covariance with mean eigenvalue
        one, and a non-diagonal prior with ``n_low`` eigenvalues ``low_eig``
        and the rest ``high_eig``."""
        rng = np.random.default_rng(as_seedseq(seed))
        H = rng.standard_normal((n, d)) / math.sqrt(n)
        qn, _ = np.linalg.qr(rng.standard_normal((n, n)))
        eig_n = rng.uniform(1.0 - noise_spread, 1.0 + noise_spread, size=n)
        eig_n *= n / eig_n.sum()
        sigma_n = (qn * eig_n) @ qn.T
        qy, _ = np.linalg.qr(rng.standard_normal((d, d)))
        eig_y = np.array([low_eig] * n_low + [high_eig] * (d - n_low))
        sigma_y = (qy * eig_y) @ qy.T
        return cls(H, 0.5 * (sigma_n + sigma_n.T), 0.5 * (sigma_y + sigma_y.T))


@dataclass
class RegularizationConfig:
    n_list: tuple[int, ...] = (5, 10, 20)
    trials: int = 100
    bce_grid: tuple[float, float, int] = (0.0, 10.0, 100)
    ridge_grid: tuple[float, float, int] = (-0.012, 0.002, 100)
    val_size: int = 100_000
    n: int = 20
    d: int = 20
    setup_seed: int = 0
    jitter: float = 1e-9


@dataclass
class RegularizationResult:
    n_list: list[int]
    test_bmse: dict[str, Array]       # method -> (len(n_list), trials)
    ridge_lambda: Array               # (len(n_list), trials)
    bce_lambda: Array
    oracle_bmse: float                # LMMSE with the true prior
    skipped_ridge: int

    def summary_rows(self) -> list[dict]:
        rows = []
        for i, N in enumerate(self.n_list):
            for method, vals in self.test_bmse.items():
                v = vals[i]
                rows.append({"N": N, "method": method, "mean_bmse": float(v.mean()),
                             "se": float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0})
        return rows

    def paired_gap(self, i: int, a: str = "EMMSE", b: str = "BCE") -> tuple[float, float]:
        """Mean and standard error of ``a - b`` over trials at ``n_list[i]``."""
        diff = self.test_bmse[a][i] - self.test_bmse[b][i]
        return float(diff.mean()), float(diff.std(ddof=1) / math.sqrt(diff.size))

    def negative_ridge_fraction(self, i: int) -> float:
        return float(np.mean(self.ridge_lambda[i] < 0))


def _val_bmse(A: Array, cxx: Array, cxy: Array, cyy_trace: float) -> float:
    return float(np.sum((A @ cxx) * A) - 2.0 * np.sum(A * cxy.T) + cyy_trace)


def regularization_experiment(config: RegularizationConfig, seed: SeedLike,
                              setup: RegularizationSetup | None = None,
                              threads: int = 1) -> RegularizationResult:
    """EMMSE vs ridge vs BCE linear estimators trained on ``N`` prior samples.

    Each trial estimates the prior second moment from ``N`` draws, builds the
    three closed-form estimators, tunes ridge and BCE weights on a shared
    validation set from the true model, and scores every estimator by its
    exact Bayesian MSE under the true prior.
    """
    if setup is None:
        setup = RegularizationSetup.random(config.n, config.d, seed=config.setup_seed)
    H, Sn, Sy = setup.H, setup.sigma_n, setup.sigma_y
    val_seq, trials_seq = as_seedseq(seed).spawn(2)
    vrng = np.random.default_rng(val_seq)
    d, n = H.shape[1], H.shape[0]
    wy, vy = np.linalg.eigh(Sy)
    yv = vrng.standard_normal((config.val_size, d)) @ (vy * np.sqrt(np.clip(wy, 0, None))).T
    xv = yv @ H.T + vrng.standard_normal((config.val_size, n)) @ np.linalg.cholesky(Sn).T
    cxx = xv.T @ xv / config.val_size
    cxy = xv.T @ yv / config.val_size
    cyy_trace = float(np.sum(yv * yv) / config.val_size)

    bce_grid = np.linspace(*config.bce_grid[:2], int(config.bce_grid[2]))
    ridge_grid = np.linspace(*config.ridge_grid[:2], int(config.ridge_grid[2]))
    prior_factor = vy * np.sqrt(np.clip(wy, 0, None))

    def trial(task, rng):
        N, _ = task
        ytr = rng.standard_normal((N, d)) @ prior_factor.T
        sy_hat = empirical_second_moment(ytr, config.jitter)
        emmse = lmmse(H, Sn, sy_hat, jitter=0.0)
        best_bce = min(((_val_bmse(A.A, cxx, cxy, cyy_trace), lam, A) for lam in bce_grid
                        for A in [lbce_model_form(H, Sn, sy_hat, lam, jitter=0.0)]), key=lambda t: t[0])
        ridge_scores = []
        skipped = 0
        for lam in ridge_grid:
            try:
                A = ridge_linear(H, Sn, sy_hat, lam, jitter=0.0)
            except LinearAlgebraError:
                skipped += 1
                log.warning("ridge lambda %g skipped: Sigma_n + lambda I not PD", lam)
                continue
            ridge_scores.append((_val_bmse(A.A, cxx, cxy, cyy_trace), lam, A))
        best_ridge = min(ridge_scores, key=lambda t: t[0])
        return (linear_bmse(emmse.A, H, Sn, Sy), linear_bmse(best_ridge[2].A, H, Sn, Sy),
                linear_bmse(best_bce[2].A, H, Sn, Sy), best_ridge[1], best_bce[1], skipped)

    tasks = [(N, t) for N in config.n_list for t in range(config.trials)]
    out = np.array(seeded_map(trial, tasks, trials_seq, threads)).reshape(len(config.n_list), config.trials, 6)
    oracle = linear_bmse(lmmse(H, Sn, Sy).A, H, Sn, Sy)
    return RegularizationResult(
        n_list=list(config.n_list),
        test_bmse={"EMMSE": out[:, :, 0], "Ridge": out[:, :, 1], "BCE": out[:, :, 2]},
        ridge_lambda=out[:, :, 3], bce_lambda=out[:, :, 4],
        oracle_bmse=oracle, skipped_ridge=int(out[:, :, 5].sum()),
    )


# ---------------------------------------------------------------------------
# CSV output
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(rows: Sequence[dict], path: str | Path) -> None:
    """UTF-8, comma separated, header row; floats written round-trip exact."""
    rows = list(rows)
    fields: list[str] = []
    for r in rows:
        for k in r:
            if k not in fields:
                fields.append(k)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_fmt(r.get(k, "")) for k in fields])


def records_to_rows(records: Sequence[MetricsRecord], **extra) -> list[dict]:
    rows = []
    for r in records:
        row = dict(extra)
        row.update(r.row())
        rows.append(row)
    return rows
