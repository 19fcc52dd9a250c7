"""Training loops for the learned estimators.

Three problems are supported:

``linear``
    A network (usually a single affine layer) fed the raw observation
    vector of the linear Gaussian model.
``snr``
    A one-hidden-layer tanh network fed six scale-invariant moment
    features of the BPSK observation.
``covariance``
    The iterative refinement network :class:`CovNet`, which repeatedly
    updates a parameter estimate and a latent state from the current
    structured covariance.

Every run draws fresh batches from the prior and model (or iterates over a
fixed :class:`~bce.datagen.DatasetNM`), minimizes the BCE loss with Adam,
and returns a trained estimator plus its loss history. ``lam = 0`` gives
the plain empirical-MSE baseline.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .datagen import DatasetNM, batch_stream, read_blob, write_blob
from .neuralnet import (
    AdamState,
    ForwardCache,
    MlpParams,
    MlpSpec,
    MultiStep,
    ReduceOnPlateau,
    adam_step,
    backward,
    bce_loss,
    forward,
    init_params,
    zero_params,
)
from .rng import as_seedseq
from .statmodels import COV_DIM, COV_PARAMS, COV_PATTERNS, cov_sample_covariance

Array = NDArray[np.float64]
log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"BCECKPT1"


class TrainingDiverged(RuntimeError):
    """Loss became NaN or infinite."""


# ---------------------------------------------------------------------------
# SNR features
# ---------------------------------------------------------------------------

SNR_FEATURES = ("m4", "m6", "m4^2", "m6^(2/3)", "m4/m6^(2/3)", "log m4")
N_SNR_FEATURES = len(SNR_FEATURES)


def snr_features(x: ArrayLike) -> Array:
    """Six moment features of ``x / sqrt(m2)``; the last axis holds the samples.

    With ``m_k`` the k-th sample moment of the normalized data the features
    are ``(m4, m6, m4**2, m6**(2/3), m4 / m6**(2/3), log m4)``. They do not
    change when ``x`` is multiplied by a positive constant.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] < 2:
        raise ValueError("need at least two samples per observation")
    m2 = np.mean(x * x, axis=-1, keepdims=True)
    if np.any(m2 <= 0):
        raise ValueError("zero second moment")
    u2 = x * x / m2
    m4 = np.mean(u2 * u2, axis=-1)
    m6 = np.mean(u2 * u2 * u2, axis=-1)
    m6_23 = np.cbrt(m6 * m6)
    return np.stack([m4, m6, m4 * m4, m6_23, m4 / m6_23, np.log(m4)], axis=-1)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    lam: float = 0.0
    n_groups: int = 10
    m: int = 100
    steps: int = 20_000
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    scheduler: str = "multistep"         # multistep | plateau | none
    milestones: tuple[int, ...] = ()
    factor: float = 0.1
    patience: int = 5
    eval_every: int = 200
    val_groups: int = 64
    seed: int = 0
    data_mode: str = "fresh"             # fresh | fixed
    mse_mode: str = "all"
    log_every: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.n_groups < 1 or self.m < 1 or self.steps < 0:
            raise ValueError("batch sizes must be positive and steps non-negative")
        if self.scheduler not in ("multistep", "plateau", "none"):
            raise ValueError(f"unknown scheduler {self.scheduler!r}")
        if self.data_mode not in ("fresh", "fixed"):
            raise ValueError(f"unknown data mode {self.data_mode!r}")
        self.betas = tuple(self.betas)
        self.milestones = tuple(int(s) for s in self.milestones)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown training options {sorted(extra)}")
        return cls(**d)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["betas"] = list(self.betas)
        out["milestones"] = list(self.milestones)
        return out


# ---------------------------------------------------------------------------
# Feature-based MLP estimator
# ---------------------------------------------------------------------------

FEATURE_MAPS: dict[str, Callable[[Array], Array]] = {
    "identity": lambda x: np.asarray(x, float).reshape(*np.shape(x)[:-1], -1),
    "snr": snr_features,
}


@dataclass
class MlpEstimator:
    """``out_shift + out_scale * net((features(x) - in_shift) / in_scale)``.

    With ``output="exp"`` the affine result is exponentiated, which keeps
    estimates positive and makes the net work in relative (log) units.
    Non-empty ``in_lo``/``in_hi`` clip the raw features first, so inputs
    outside the range seen in training get the output at its edge.
    """

    spec: MlpSpec
    params: MlpParams
    feature: str = "identity"
    in_shift: Array = field(default_factory=lambda: np.zeros(0))
    in_scale: Array = field(default_factory=lambda: np.zeros(0))
    out_shift: Array = field(default_factory=lambda: np.zeros(0))
    out_scale: Array = field(default_factory=lambda: np.zeros(0))
    output: str = "linear"
    in_lo: Array = field(default_factory=lambda: np.zeros(0))
    in_hi: Array = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        w_in, w_out = self.spec.widths[0], self.spec.widths[-1]
        if self.in_shift.size == 0:
            self.in_shift = np.zeros(w_in)
        if self.in_scale.size == 0:
            self.in_scale = np.ones(w_in)
        if self.out_shift.size == 0:
            self.out_shift = np.zeros(w_out)
        if self.out_scale.size == 0:
            self.out_scale = np.ones(w_out)
        if self.output not in ("linear", "exp"):
            raise ValueError(f"unknown output transform {self.output!r}")

    def inputs(self, x: ArrayLike) -> Array:
        f = FEATURE_MAPS[self.feature](x)
        if self.in_lo.size:
            f = np.clip(f, self.in_lo, self.in_hi)
        return (f - self.in_shift) / self.in_scale

    def from_inputs(self, z: Array, cache: ForwardCache | None = None) -> Array:
        out = self.out_shift + self.out_scale * forward(self.spec, self.params, z, cache)
        return np.exp(out) if self.output == "exp" else out

    def __call__(self, x: ArrayLike) -> Array:
        x = np.asarray(x, dtype=float)
        z = self.inputs(x)
        lead = z.shape[:-1]
        out = self.from_inputs(z.reshape(-1, z.shape[-1]))
        return out.reshape(*lead, -1)

    def linear_map(self) -> Array:
        """Effective matrix of a single affine layer on identity features."""
        if self.spec.n_layers != 1 or self.feature != "identity" or self.output != "linear":
            raise ValueError("not a single-layer identity-feature network")
        return self.out_scale[:, None] * self.params.weights[0] / self.in_scale[None, :]

    # training hooks -------------------------------------------------------

    def loss_and_grad(self, z: Array, targets: Array, lam: float, mse_mode: str) -> tuple[float, list[Array]]:
        n, m, w = z.shape
        cache = ForwardCache()
        out = self.from_inputs(z.reshape(n * m, w), cache).reshape(n, m, -1)
        loss, g = bce_loss(out, targets.reshape(n, -1), lam, mse_mode)
        g = g.reshape(n * m, -1) * self.out_scale
        if self.output == "exp":
            g = g * out.reshape(n * m, -1)
        grads = backward(self.spec, self.params, cache, g)
        return loss, grads.arrays()

    def param_arrays(self) -> list[Array]:
        return self.params.arrays()

    def header(self) -> dict:
        return {
            "kind": "mlp", "spec": self.spec.to_dict(), "feature": self.feature,
            "in_shift": self.in_shift.tolist(), "in_scale": self.in_scale.tolist(),
            "out_shift": self.out_shift.tolist(), "out_scale": self.out_scale.tolist(),
            "output": self.output, "in_lo": self.in_lo.tolist(), "in_hi": self.in_hi.tolist(),
        }


# ---------------------------------------------------------------------------
# Iterative refinement covariance network
# ---------------------------------------------------------------------------

# maps alpha (9,) to vec(Sigma(alpha) - I) (25,)
_COV_P = COV_PATTERNS.reshape(COV_PARAMS, COV_DIM * COV_DIM).T.copy()


@dataclass(frozen=True)
class CovNetSpec:
    iterations: int = 50
    step_scale: float = 0.1
    hidden: int = 128
    state: int = 16
    feed_sample_cov: bool = False
    clamp_output: bool = True

    def __post_init__(self):
        if self.iterations < 1 or self.step_scale <= 0 or self.hidden < 1 or self.state < 0:
            raise ValueError("invalid CovNetSpec")

    @property
    def in_width(self) -> int:
        return COV_DIM * COV_DIM * (2 if self.feed_sample_cov else 1) + self.state

    @property
    def mlp(self) -> MlpSpec:
        return MlpSpec((self.in_width, self.hidden, COV_PARAMS + self.state), ("tanh",))


@dataclass
class _CovTrace:
    caches: list[ForwardCache]
    alphas: list[Array]


def covnet_forward(spec: CovNetSpec, params: MlpParams, sample_cov: ArrayLike,
                   trace: _CovTrace | None = None) -> Array:
    """Refine ``alpha`` from ``0.5`` over ``spec.iterations`` shared-MLP steps.

    ``sample_cov`` is one 5x5 matrix or a batch (B, 5, 5). At each step the
    MLP sees ``vec(C_k - I)`` (plus ``vec(C_0 - I)`` when
    ``feed_sample_cov``) and the state ``v_k``, and its output moves
    ``alpha`` and ``v`` by ``step_scale`` times the predicted increments.
    ``C_{k+1}`` is the structured covariance of ``alpha_{k+1}`` clamped to
    [0, 1].
    """
    c0 = np.asarray(sample_cov, dtype=float)
    single = c0.ndim == 2
    c0 = c0.reshape(-1, COV_DIM, COV_DIM)
    if not np.allclose(c0, np.swapaxes(c0, 1, 2), atol=1e-10):
        raise ValueError("sample covariance must be symmetric")
    B = c0.shape[0]
    mlp = spec.mlp
    c0_vec = (c0 - np.eye(COV_DIM)).reshape(B, -1)
    alpha = np.full((B, COV_PARAMS), 0.5)
    v = np.zeros((B, spec.state))
    c_vec = c0_vec
    if trace is not None:
        trace.alphas.append(alpha)
    for _ in range(spec.iterations):
        parts = [c_vec, c0_vec, v] if spec.feed_sample_cov else [c_vec, v]
        inp = np.concatenate(parts, axis=1)
        cache = ForwardCache() if trace is not None else None
        out = forward(mlp, params, inp, cache)
        alpha = alpha + spec.step_scale * out[:, :COV_PARAMS]
        v = v + spec.step_scale * out[:, COV_PARAMS:]
        c_vec = np.clip(alpha, 0.0, 1.0) @ _COV_P.T
        if trace is not None:
            trace.caches.append(cache)
            trace.alphas.append(alpha)
    result = np.clip(alpha, 0.0, 1.0) if spec.clamp_output else alpha
    return result[0] if single else result


def covnet_backward(spec: CovNetSpec, params: MlpParams, trace: _CovTrace, grad_out: Array) -> MlpParams:
    """Backpropagate d(loss)/d(output) through all refinement steps."""
    mlp = spec.mlp
    total = MlpParams.zeros_like(params)
    alpha_final = trace.alphas[-1]
    g_alpha = np.array(grad_out, dtype=float)
    if spec.clamp_output:
        g_alpha = g_alpha * ((alpha_final >= 0.0) & (alpha_final <= 1.0))
    g_v = np.zeros((g_alpha.shape[0], spec.state))
    n_c = COV_DIM * COV_DIM
    for k in range(spec.iterations - 1, -1, -1):
        g_out = spec.step_scale * np.concatenate([g_alpha, g_v], axis=1)
        grads, g_in = backward(mlp, params, trace.caches[k], g_out, want_input_grad=True)
        for acc, g in zip(total.arrays(), grads.arrays()):
            acc += g
        g_v = g_v + g_in[:, -spec.state:] if spec.state else g_v
        if k > 0:
            a_k = trace.alphas[k]
            inside = (a_k >= 0.0) & (a_k <= 1.0)
            g_alpha = g_alpha + (g_in[:, :n_c] @ _COV_P) * inside
    return total


@dataclass
class CovNetEstimator:
    spec: CovNetSpec
    params: MlpParams

    def __call__(self, x: ArrayLike) -> Array:
        x = np.asarray(x, dtype=float)
        c = cov_sample_covariance(x)
        lead = c.shape[:-2]
        out = covnet_forward(self.spec, self.params, c.reshape(-1, COV_DIM, COV_DIM))
        return out.reshape(*lead, COV_PARAMS)

    def inputs(self, x: ArrayLike) -> Array:
        c = cov_sample_covariance(x)
        return c.reshape(*c.shape[:-2], COV_DIM * COV_DIM)

    def loss_and_grad(self, z: Array, targets: Array, lam: float, mse_mode: str) -> tuple[float, list[Array]]:
        n, m, _ = z.shape
        trace = _CovTrace([], [])
        out = covnet_forward(self.spec, self.params, z.reshape(n * m, COV_DIM, COV_DIM), trace)
        loss, g = bce_loss(out.reshape(n, m, -1), targets.reshape(n, -1), lam, mse_mode)
        return loss, covnet_backward(self.spec, self.params, trace, g.reshape(n * m, -1)).arrays()

    def param_arrays(self) -> list[Array]:
        return self.params.arrays()

    def header(self) -> dict:
        return {"kind": "covnet", "spec": asdict(self.spec)}


def covnet_init(spec: CovNetSpec, rng: np.random.Generator, out_gain: float = 0.1) -> MlpParams:
    params = init_params(spec.mlp, rng)
    params.weights[-1] *= out_gain
    return params


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(estimator, path: str | Path, extra: dict | None = None) -> None:
    header = dict(estimator.header())
    if extra:
        header.update(extra)
    write_blob(path, CHECKPOINT_MAGIC, header, estimator.params.flat())


def load_checkpoint(path: str | Path):
    header, payload = read_blob(path, CHECKPOINT_MAGIC)
    return estimator_from_header(header, payload), header


def estimator_from_header(header: dict, payload: Array):
    if header["kind"] == "mlp":
        spec = MlpSpec.from_dict(header["spec"])
        params = init_params(spec, np.random.default_rng(0))
        params.set_flat(payload)
        return MlpEstimator(spec, params, header["feature"],
                            np.asarray(header["in_shift"]), np.asarray(header["in_scale"]),
                            np.asarray(header["out_shift"]), np.asarray(header["out_scale"]),
                            header.get("output", "linear"),
                            np.asarray(header.get("in_lo", [])), np.asarray(header.get("in_hi", [])))
    if header["kind"] == "covnet":
        spec = CovNetSpec(**header["spec"])
        params = init_params(spec.mlp, np.random.default_rng(0))
        params.set_flat(payload)
        return CovNetEstimator(spec, params)
    raise ValueError(f"unknown checkpoint kind {header['kind']!r}")


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    estimator: object
    history: list[float]
    val_history: list[tuple[int, float]]
    lr_history: list[float]
    config: TrainConfig

    @property
    def best_so_far(self) -> Array:
        return np.minimum.accumulate(np.asarray(self.history))


def _linear_estimator(model, config: TrainConfig, rng) -> MlpEstimator:
    # a single affine layer has no symmetry to break; starting at zero keeps
    # directions the loss barely constrains from carrying init noise
    spec = MlpSpec((model.n, model.param_dim))
    params = zero_params(spec)
    return MlpEstimator(spec, params, "identity")


def _snr_estimator(model, prior, config: TrainConfig, rng, hidden: int = 64,
                   output: str = "linear", clip_inputs: bool = False, pilot: int = 2000) -> MlpEstimator:
    spec = MlpSpec((N_SNR_FEATURES, hidden, 1), ("tanh",))
    params = init_params(spec, rng)
    # fixed standardization (and optional clip range) from a pilot draw
    y, h = prior.sample(pilot, rng)
    feats = snr_features(model.sample_groups(y, 1, rng, h)[:, 0])
    y_lo, y_hi = float(np.min(y)), float(np.max(y))
    if output == "exp":
        y_lo, y_hi = math.log(y_lo), math.log(y_hi)
    return MlpEstimator(
        spec, params, "snr",
        in_shift=feats.mean(axis=0), in_scale=feats.std(axis=0),
        out_shift=np.array([0.5 * (y_lo + y_hi)]), out_scale=np.array([0.5 * (y_hi - y_lo)]),
        output=output,
        in_lo=feats.min(axis=0) if clip_inputs else np.zeros(0),
        in_hi=feats.max(axis=0) if clip_inputs else np.zeros(0),
    )


def make_estimator(problem: str, model, prior, config: TrainConfig, rng, **arch):
    if problem == "linear":
        return _linear_estimator(model, config, rng)
    if problem == "snr":
        return _snr_estimator(model, prior, config, rng, **arch)
    if problem == "covariance":
        spec = CovNetSpec(**arch)
        return CovNetEstimator(spec, covnet_init(spec, rng))
    raise ValueError(f"unknown problem {problem!r}")


def _fixed_batches(ds: DatasetNM, n_groups: int, m: int, rng):
    while True:
        order = rng.permutation(ds.N)
        for start in range(0, ds.N - n_groups + 1, n_groups):
            idx = order[start:start + n_groups]
            cols = rng.choice(ds.M, size=min(m, ds.M), replace=False) if m < ds.M else np.arange(ds.M)
            yield ds.y[idx], ds.x[idx][:, cols]


def train_estimator(
    problem: str,
    config: TrainConfig,
    prior=None,
    model=None,
    dataset: DatasetNM | None = None,
    estimator=None,
    **arch,
) -> TrainResult:
    """Minimize the BCE loss with Adam on batches of ``n_groups x m``.

    Args:
        problem: "linear", "snr" or "covariance".
        config: training options; ``config.lam = 0`` trains the MSE baseline.
        prior, model: source of fresh batches (``data_mode="fresh"``).
        dataset: fixed dataset for ``data_mode="fixed"``.
        estimator: start from this estimator instead of a fresh init.
        **arch: architecture options forwarded to the estimator factory
            (``hidden`` for snr; :class:`CovNetSpec` fields for covariance).

    Raises:
        TrainingDiverged: the loss became NaN or infinite.
    """
    init_seq, data_seq, val_seq = as_seedseq(config.seed).spawn(3)
    init_rng = np.random.default_rng(init_seq)
    if estimator is None:
        estimator = make_estimator(problem, model, prior, config, init_rng, **arch)
    if config.data_mode == "fresh":
        if prior is None or model is None:
            raise ValueError("fresh-data training needs a prior and a model")
        batches = batch_stream(prior, model, config.n_groups, config.m, data_seq)
    else:
        if dataset is None:
            raise ValueError("fixed-data training needs a dataset")
        batches = _fixed_batches(dataset, config.n_groups, config.m, np.random.default_rng(data_seq))

    val = None
    if config.scheduler == "plateau":
        if model is None or prior is None:
            raise ValueError("plateau scheduling needs a prior and model for validation data")
        vy, vx = next(batch_stream(prior, model, config.val_groups, config.m, val_seq))
        val = (estimator.inputs(vx), vy)

    state = AdamState(lr=config.lr, beta1=config.betas[0], beta2=config.betas[1], eps=config.eps)
    multistep = MultiStep(config.lr, config.milestones, config.factor)
    plateau = ReduceOnPlateau(config.lr, config.patience, config.factor)
    params = estimator.param_arrays()
    history: list[float] = []
    val_history: list[tuple[int, float]] = []
    lr_history: list[float] = []
    for step in range(config.steps):
        if config.scheduler == "multistep":
            state.lr = multistep(step)
        elif config.scheduler == "plateau":
            state.lr = plateau.lr
        y, x = next(batches)
        z = estimator.inputs(x)
        loss, grads = estimator.loss_and_grad(z, y, config.lam, config.mse_mode)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingDiverged(f"non-finite loss {loss} at step {step} (lr={state.lr:g})")
        adam_step(state, params, grads)
        history.append(loss)
        lr_history.append(state.lr)
        if val is not None and (step + 1) % config.eval_every == 0:
            vloss, _ = estimator.loss_and_grad(val[0], val[1], config.lam, config.mse_mode)
            val_history.append((step + 1, vloss))
            plateau.update(vloss)
        if config.log_every and (step + 1) % config.log_every == 0:
            recent = float(np.mean(history[-config.log_every:]))
            log.info("step %d loss %.6g lr %.3g", step + 1, recent, state.lr)
    return TrainResult(estimator, history, val_history, lr_history, config)
