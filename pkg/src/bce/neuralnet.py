"""A small feed-forward network engine in float64 numpy.

Forward and backward passes are written out by hand. The loss is the
grouped MSE plus ``lam`` times the squared empirical bias of each group
mean, and its gradient with respect to every prediction is exact, so the
whole chain can be checked against central finite differences.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import ArrayLike, NDArray

Array = NDArray[np.float64]

ACTIVATIONS = ("relu", "tanh", "linear")


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths (input, hidden..., output) and one activation per hidden layer."""

    widths: tuple[int, ...]
    activations: tuple[str, ...] = ()

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ShapeError(f"need >= 2 positive widths, got {widths}")
        acts = tuple(self.activations)
        if len(acts) == 1 and len(widths) > 3:
            acts = acts * (len(widths) - 2)
        if len(acts) != len(widths) - 2:
            raise ShapeError(f"{len(widths) - 2} hidden layers but {len(acts)} activations")
        bad = [a for a in acts if a not in ACTIVATIONS]
        if bad:
            raise ShapeError(f"unknown activations {bad}")
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "activations", acts)

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    def to_dict(self) -> dict:
        return {"widths": list(self.widths), "activations": list(self.activations)}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(tuple(d["widths"]), tuple(d.get("activations", ())))


@dataclass
class MlpParams:
    """Per-layer weights ``W[k]`` of shape (out, in) and biases ``b[k]``."""

    weights: list[Array]
    biases: list[Array]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def arrays(self) -> list[Array]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def flat(self) -> Array:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def set_flat(self, vec: ArrayLike) -> None:
        vec = np.asarray(vec, float)
        pos = 0
        for a in self.arrays():
            a[...] = vec[pos:pos + a.size].reshape(a.shape)
            pos += a.size
        if pos != vec.size:
            raise ShapeError(f"flat vector has {vec.size} entries, expected {pos}")

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    @classmethod
    def zeros_like(cls, other: "MlpParams") -> "MlpParams":
        return cls([np.zeros_like(w) for w in other.weights], [np.zeros_like(b) for b in other.biases])


def init_params(spec: MlpSpec, rng: np.random.Generator) -> MlpParams:
    """Uniform init in +-sqrt(6/(fan_in + fan_out)); zero biases."""
    ws, bs = [], []
    for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        bs.append(np.zeros(fan_out))
    return MlpParams(ws, bs)


def zero_params(spec: MlpSpec) -> MlpParams:
    return MlpParams(
        [np.zeros((o, i)) for i, o in zip(spec.widths[:-1], spec.widths[1:])],
        [np.zeros(o) for o in spec.widths[1:]],
    )


def _act(name: str, z: Array) -> Array:
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(name: str, z: Array, a: Array) -> Array:
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0).astype(float)
    return np.ones_like(z)


@dataclass
class ForwardCache:
    inputs: list[Array] = field(default_factory=list)   # input to each layer
    pre: list[Array] = field(default_factory=list)      # pre-activation of each hidden layer


def forward(spec: MlpSpec, params: MlpParams, x: ArrayLike, cache: ForwardCache | None = None) -> Array:
    """Evaluate the network on a single input or a batch (rows)."""
    a = np.asarray(x, dtype=float)
    single = a.ndim == 1
    a = np.atleast_2d(a)
    if a.shape[1] != spec.widths[0]:
        raise ShapeError(f"input width {a.shape[1]} != {spec.widths[0]}")
    last = spec.n_layers - 1
    for k, (w, b) in enumerate(zip(params.weights, params.biases)):
        if cache is not None:
            cache.inputs.append(a)
        z = a @ w.T + b
        if k == last:
            a = z
        else:
            if cache is not None:
                cache.pre.append(z)
            a = _act(spec.activations[k], z)
    return a[0] if single else a


def backward(spec: MlpSpec, params: MlpParams, cache: ForwardCache, grad_out: Array,
             want_input_grad: bool = False) -> MlpParams | tuple[MlpParams, Array]:
    """Parameter gradient given d(loss)/d(output) for the cached batch."""
    g = np.atleast_2d(grad_out)
    grads = MlpParams.zeros_like(params)
    for k in range(spec.n_layers - 1, -1, -1):
        a_in = cache.inputs[k]
        grads.weights[k] = g.T @ a_in
        grads.biases[k] = g.sum(axis=0)
        if k == 0 and not want_input_grad:
            break
        g = g @ params.weights[k]
        if k > 0:
            z = cache.pre[k - 1]
            g = g * _act_grad(spec.activations[k - 1], z, a_in)
    if want_input_grad:
        return grads, g
    return grads


# ---------------------------------------------------------------------------
# BCE loss
# ---------------------------------------------------------------------------


def bce_loss(outputs: ArrayLike, targets: ArrayLike, lam: float, mse_mode: str = "all") -> tuple[float, Array]:
    """Grouped MSE plus ``lam`` times the mean squared group bias.

    Args:
        outputs: predictions of shape (N_b, M_b, d) (or (N_b, M_b) for d=1).
        targets: shape (N_b, d) (or (N_b,)).
        lam: bias weight, >= 0.
        mse_mode: "all" averages the MSE term over all N_b*M_b pairs;
            "first" uses only the first observation of each group.

    Returns:
        The loss and its gradient with respect to ``outputs``.
    """
    out = np.asarray(outputs, dtype=float)
    tgt = np.asarray(targets, dtype=float)
    squeeze = out.ndim == 2
    if squeeze:
        out = out[:, :, None]
        tgt = tgt.reshape(-1, 1)
    if out.ndim != 3 or tgt.shape != (out.shape[0], out.shape[2]):
        raise ShapeError(f"ragged or mismatched groups: outputs {out.shape}, targets {tgt.shape}")
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    n, m, _ = out.shape
    err = out - tgt[:, None, :]
    bias = err.mean(axis=1)
    grad = np.zeros_like(out)
    if mse_mode == "all":
        mse = float(np.sum(err * err)) / (n * m)
        grad += 2.0 * err / (n * m)
    elif mse_mode == "first":
        mse = float(np.sum(err[:, 0] ** 2)) / n
        grad[:, 0] += 2.0 * err[:, 0] / n
    else:
        raise ValueError(f"unknown mse_mode {mse_mode!r}")
    loss = mse + lam * float(np.sum(bias * bias)) / n
    grad += (2.0 * lam / (n * m)) * bias[:, None, :]
    if squeeze:
        grad = grad[:, :, 0]
    return loss, grad


def grouped_mse(outputs: ArrayLike, targets: ArrayLike) -> float:
    out = np.asarray(outputs, float)
    tgt = np.asarray(targets, float)
    if out.ndim == 2:
        out, tgt = out[:, :, None], tgt.reshape(-1, 1)
    return float(np.mean(np.sum((out - tgt[:, None, :]) ** 2, axis=-1)))


@dataclass
class BceBatch:
    """Groups of network inputs sharing a target."""

    inputs: Array    # (N_b, M_b, width_in)
    targets: Array   # (N_b, d)
    lam: float

    def __post_init__(self):
        if self.inputs.ndim != 3 or self.targets.shape[0] != self.inputs.shape[0]:
            raise ShapeError("inputs must be (N_b, M_b, width) with one target per group")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


def batch_loss_and_grad(spec: MlpSpec, params: MlpParams, batch: BceBatch,
                        mse_mode: str = "all") -> tuple[float, MlpParams]:
    n, m, w = batch.inputs.shape
    cache = ForwardCache()
    out = forward(spec, params, batch.inputs.reshape(n * m, w), cache)
    loss, g = bce_loss(out.reshape(n, m, -1), batch.targets.reshape(n, -1), batch.lam, mse_mode)
    return loss, backward(spec, params, cache, g.reshape(n * m, -1))


def batch_loss(spec: MlpSpec, params: MlpParams, batch: BceBatch, mse_mode: str = "all") -> float:
    n, m, w = batch.inputs.shape
    out = forward(spec, params, batch.inputs.reshape(n * m, w))
    return bce_loss(out.reshape(n, m, -1), batch.targets.reshape(n, -1), batch.lam, mse_mode)[0]


# ---------------------------------------------------------------------------
# Optimizer and schedules
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[Array] | None = None
    v: list[Array] | None = None


def adam_step(state: AdamState, params: list[Array], grads: list[Array]) -> None:
    """Bias-corrected Adam update, applied in place."""
    if state.m is None:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ShapeError("gradient shapes do not match parameters")
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


class MultiStep:
    """Multiply the base step size by ``factor`` at each milestone."""

    def __init__(self, base: float, milestones: Sequence[int] = (), factor: float = 0.1):
        self.base = base
        self.milestones = sorted(int(s) for s in milestones)
        self.factor = factor

    def __call__(self, step: int) -> float:
        passed = sum(1 for s in self.milestones if step >= s)
        return self.base * self.factor ** passed


class ReduceOnPlateau:
    """Multiply the step size by ``factor`` after ``patience`` evaluations
    without improvement of the monitored metric."""

    def __init__(self, base: float, patience: int = 10, factor: float = 0.1,
                 threshold: float = 1e-4, min_lr: float = 0.0):
        self.lr = base
        self.patience = patience
        self.factor = factor
        self.threshold = threshold
        self.min_lr = min_lr
        self.best = math.inf
        self.bad = 0

    def update(self, metric: float) -> float:
        if metric < self.best * (1.0 - self.threshold):
            self.best = metric
            self.bad = 0
        else:
            self.bad += 1
            if self.bad > self.patience:
                self.lr = max(self.lr * self.factor, self.min_lr)
                self.bad = 0
        return self.lr


def schedule(kind: str, history: Sequence[float] | int, base: float = 1.0, **kw) -> float:
    """Step size after ``history`` under a multistep or plateau rule.

    For "multistep", ``history`` is the step index. For "plateau" it is the
    sequence of monitored metric values seen so far.
    """
    if kind == "multistep":
        return MultiStep(base, kw.get("milestones", ()), kw.get("factor", 0.1))(int(history))
    if kind == "plateau":
        sched = ReduceOnPlateau(base, kw.get("patience", 10), kw.get("factor", 0.1))
        lr = base
        for value in history:
            lr = sched.update(value)
        return lr
    raise ValueError(f"unknown schedule {kind!r}")


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    n_params: int
    loss: float


def _rel_errors(analytic: Array, numeric: Array) -> Array:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return np.abs(analytic - numeric) / scale


def grad_check(spec: MlpSpec, seed: int, lam: float = 1.0, n_groups: int = 3, m: int = 4,
               step: float = 1e-5, avoid_kinks: bool = True) -> GradCheckReport:
    """Compare :func:`backward` with central differences on a random batch.

    The relative error uses ``max(|a|, |n|, 1e-6)`` as the denominator.
    For relu nets, inputs are redrawn until every hidden pre-activation is
    farther than ``100 * step * (1 + |a|_1)`` from zero, ``a`` being the
    layer input.
    """
    rng = np.random.default_rng(seed)
    params = init_params(spec, rng)
    for b in params.biases:
        b[...] = rng.normal(scale=0.1, size=b.shape)
    d = spec.widths[-1]
    inputs = rng.normal(size=(n_groups, m, spec.widths[0]))
    if avoid_kinks and "relu" in spec.activations:
        inputs = _kink_free_inputs(spec, params, inputs, rng, step)
    targets = rng.normal(size=(n_groups, d))
    batch = BceBatch(inputs, targets, lam)
    loss, g = batch_loss_and_grad(spec, params, batch)
    analytic = g.flat()
    base = params.flat()
    numeric = np.empty_like(base)
    for i in range(base.size):
        orig = base[i]
        base[i] = orig + step
        params.set_flat(base)
        up = batch_loss(spec, params, batch)
        base[i] = orig - step
        params.set_flat(base)
        down = batch_loss(spec, params, batch)
        base[i] = orig
        numeric[i] = (up - down) / (2.0 * step)
    params.set_flat(base)
    return GradCheckReport(float(_rel_errors(analytic, numeric).max()), base.size, loss)


def _kink_free_inputs(spec, params, inputs, rng, step, tries: int = 200):
    n, m, w = inputs.shape
    flat = inputs.reshape(n * m, w).copy()
    for _ in range(tries):
        cache = ForwardCache()
        forward(spec, params, flat, cache)
        margin = np.ones(flat.shape[0], bool)
        for k, z in enumerate(cache.pre):
            tol = 100.0 * step * (1.0 + np.abs(cache.inputs[k]).sum(axis=1, keepdims=True))
            margin &= np.all(np.abs(z) > tol, axis=1)
        if margin.all():
            return flat.reshape(n, m, w)
        bad = ~margin
        flat[bad] += rng.normal(scale=0.05, size=(bad.sum(), w))
    raise RuntimeError("could not find kink-free inputs")
