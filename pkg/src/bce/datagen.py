"""Fictitious priors and the enhanced dataset {y_i, {x_ij}_j}_i.

A dataset holds ``N`` parameter draws and ``M`` conditionally i.i.d.
observations per draw. :func:`gen_dataset` materializes one;
:func:`batch_stream` yields fresh batches forever for training without
storage.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
from numpy.typing import ArrayLike, NDArray

from .rng import SeedLike, as_seedseq, make_rng, substreams
from .statmodels import build_model

Array = NDArray[np.float64]


class PriorError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class UniformPrior:
    """Independent uniform draws in the box ``[lower, upper]``."""

    lower: Array
    upper: Array

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
        hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
        if lo.shape != hi.shape:
            raise PriorError("lower and upper bounds differ in shape")
        if np.any(lo > hi):
            raise PriorError("uniform prior needs lower <= upper")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def box(cls, lower: float, upper: float, dim: int) -> "UniformPrior":
        return cls(np.full(dim, float(lower)), np.full(dim, float(upper)))

    @property
    def dim(self) -> int:
        return self.lower.size

    def sample(self, count: int, rng: np.random.Generator) -> tuple[Array, None]:
        u = rng.random((count, self.dim))
        return self.lower + u * (self.upper - self.lower), None

    def descriptor(self) -> dict:
        return {"kind": "uniform", "lower": self.lower.tolist(), "upper": self.upper.tolist()}


@dataclass(frozen=True, eq=False)
class GaussianPrior:
    """Gaussian prior with a PSD (possibly nearly low-rank) covariance.

    Draws are left unconstrained unless ``clip`` = (lower, upper) is given.
    """

    mean: Array
    cov: Array
    clip: tuple[float, float] | None = None

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise PriorError("covariance shape does not match the mean")
        if not np.allclose(cov, cov.T):
            raise PriorError("covariance must be symmetric")
        w, v = np.linalg.eigh(cov)
        if w.min() < -1e-10 * max(1.0, w.max()):
            raise PriorError("covariance must be positive semidefinite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "_factor", v * np.sqrt(np.clip(w, 0.0, None)))

    @property
    def dim(self) -> int:
        return self.mean.size

    def sample(self, count: int, rng: np.random.Generator) -> tuple[Array, None]:
        z = rng.standard_normal((count, self.dim))
        y = self.mean + z @ self._factor.T
        if self.clip is not None:
            y = np.clip(y, *self.clip)
        return y, None

    def descriptor(self) -> dict:
        return {"kind": "gaussian", "mean": self.mean.tolist(), "cov": self.cov.tolist(),
                "clip": None if self.clip is None else list(self.clip)}


@dataclass(frozen=True)
class SnrCompositePrior:
    """Amplitude ``h ~ U(h_range)`` then SNR ``y ~ U(snr_range)``.

    The amplitude is returned as the nuisance value; the noise variance is
    implied as ``h**2 / y``.
    """

    h_range: tuple[float, float] = (1.0, 10.0)
    snr_range: tuple[float, float] = (2.0, 50.0)

    def __post_init__(self):
        if not (0 < self.h_range[0] <= self.h_range[1]):
            raise PriorError("h range must be positive and ordered")
        if not (0 < self.snr_range[0] <= self.snr_range[1]):
            raise PriorError("SNR range must be positive and ordered")

    dim = 1

    def sample(self, count: int, rng: np.random.Generator) -> tuple[Array, Array]:
        h = rng.uniform(*self.h_range, size=count)
        y = rng.uniform(*self.snr_range, size=count)
        return y[:, None], h

    def descriptor(self) -> dict:
        return {"kind": "snr-composite", "h_range": list(self.h_range), "snr_range": list(self.snr_range)}


Prior = UniformPrior | GaussianPrior | SnrCompositePrior


def build_prior(desc: dict) -> Prior:
    kind = desc.get("kind")
    if kind == "uniform":
        if "dim" in desc:
            return UniformPrior.box(desc["lower"], desc["upper"], int(desc["dim"]))
        return UniformPrior(desc["lower"], desc["upper"])
    if kind == "gaussian":
        clip = desc.get("clip")
        return GaussianPrior(desc["mean"], desc["cov"], None if clip is None else tuple(clip))
    if kind == "snr-composite":
        return SnrCompositePrior(tuple(desc.get("h_range", (1.0, 10.0))), tuple(desc.get("snr_range", (2.0, 50.0))))
    raise PriorError(f"unknown prior kind {kind!r}")


def prior_sample(prior: Prior, count: int, rng: np.random.Generator) -> Array:
    """``count`` i.i.d. parameter vectors, shape (count, dim)."""
    if count < 1:
        raise PriorError("count must be >= 1")
    return prior.sample(count, rng)[0]


@dataclass(frozen=True, eq=False)
class DatasetNM:
    """N parameter draws, each with M observations generated under it."""

    y: Array                    # (N, d)
    x: Array                    # (N, M, *obs_shape)
    nuisance: Array | None = None   # (N,) or None
    header: dict | None = None

    def __post_init__(self):
        if self.y.ndim != 2 or self.x.shape[0] != self.y.shape[0]:
            raise ValueError("dataset y/x record counts differ")
        if self.x.ndim < 3:
            raise ValueError("x must have shape (N, M, *obs_shape)")

    @property
    def N(self) -> int:
        return self.y.shape[0]

    @property
    def M(self) -> int:
        return self.x.shape[1]


def _check_dims(prior: Prior, model) -> None:
    if prior.dim != model.param_dim:
        raise PriorError(f"prior dimension {prior.dim} != model parameter dimension {model.param_dim}")


def gen_dataset(prior: Prior, model, N: int, M: int, seed: int) -> DatasetNM:
    """Draw ``N`` parameters from the prior and ``M`` observations for each.

    The prior uses its own substream and every record gets a private
    substream, so the output is fixed by ``seed`` alone.
    """
    if N < 1 or M < 1:
        raise ValueError("N and M must be >= 1")
    _check_dims(prior, model)
    prior_seq, records_seq = as_seedseq(seed).spawn(2)
    y, nuis = prior.sample(N, np.random.default_rng(prior_seq))
    streams = substreams(records_seq, N)
    x = np.stack([
        model.sample_groups(y[i:i + 1], M, streams[i], None if nuis is None else nuis[i:i + 1])[0]
        for i in range(N)
    ])
    header = {
        "model": model.descriptor(), "prior": prior.descriptor(),
        "N": N, "M": M, "seed": seed,
        "dims": {"y": int(y.shape[1]), "obs": list(model.obs_shape)},
    }
    return DatasetNM(y, x, nuis, header)


def batch_stream(prior: Prior, model, n_groups: int, m: int, seed: SeedLike) -> Iterator[tuple[Array, Array]]:
    """Endless fresh batches ``(y (n_groups, d), x (n_groups, m, *obs))``."""
    _check_dims(prior, model)
    rng = make_rng(seed)
    while True:
        y, nuis = prior.sample(n_groups, rng)
        yield y, model.sample_groups(y, m, rng, nuis)


# ---------------------------------------------------------------------------
# Serialization: magic, uint64 header length, JSON header, float64 payload
# ---------------------------------------------------------------------------

DATASET_MAGIC = b"BCEDATA1"


def write_blob(path: str | Path, magic: bytes, header: dict, payload: ArrayLike) -> None:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    data = np.ascontiguousarray(payload, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(data.tobytes())


def read_blob(path: str | Path, magic: bytes) -> tuple[dict, Array]:
    raw = Path(path).read_bytes()
    if raw[:len(magic)] != magic:
        raise ValueError(f"{path}: bad magic, expected {magic!r}")
    pos = len(magic)
    (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    payload = np.frombuffer(raw[pos + hlen:], dtype="<f8").astype(float)
    return header, payload


def save_dataset(ds: DatasetNM, path: str | Path) -> None:
    """Row-major records: y block, then the M observations, per record."""
    header = dict(ds.header or {})
    header.update(N=ds.N, M=ds.M)
    header.setdefault("dims", {"y": ds.y.shape[1], "obs": list(ds.x.shape[2:])})
    blocks = [ds.y, ds.x.reshape(ds.N, -1)]
    if ds.nuisance is not None:
        header["nuisance"] = True
        blocks.insert(1, ds.nuisance.reshape(ds.N, 1))
    write_blob(path, DATASET_MAGIC, header, np.hstack(blocks))


def load_dataset(path: str | Path) -> DatasetNM:
    header, payload = read_blob(path, DATASET_MAGIC)
    N, M = header["N"], header["M"]
    d = header["dims"]["y"]
    obs = tuple(header["dims"]["obs"])
    rows = payload.reshape(N, -1)
    y = rows[:, :d]
    col = d
    nuis = None
    if header.get("nuisance"):
        nuis = rows[:, col].copy()
        col += 1
    x = rows[:, col:].reshape((N, M) + obs)
    return DatasetNM(y.copy(), x.copy(), nuis, header)


def model_from_header(header: dict):
    return build_model(header["model"])
