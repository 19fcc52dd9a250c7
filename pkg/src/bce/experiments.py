"""End-to-end experiment runners.

Each runner takes a resolved config dict (see ``bce/configs/*.json``), a
seed, a thread cap and an output directory, writes CSV and JSON artifacts
there, and returns a JSON-serializable summary. Every random quantity is
drawn from a fixed child of the experiment seed, so artifacts do not depend
on the thread count.
"""

from __future__ import annotations

import json
import logging
import math
import time
from pathlib import Path
from typing import Callable

import numpy as np

from .datagen import GaussianPrior, SnrCompositePrior, build_prior
from .evaluation import (
    RegularizationConfig,
    ShiftedEstimator,
    averaging_eval,
    crb_scatter_records,
    inverse_snr_errors,
    metrics_from_estimates,
    mle_estimator,
    records_to_rows,
    regularization_experiment,
    write_csv,
)
from .linear_bce import lbce_model_form, lmmse, wls
from .rng import as_seedseq, seeded_map
from .statmodels import LinearGaussianModel, SnrModel, StructuredCovModel, build_model, snr_fim_mc
from .training import TrainConfig, save_checkpoint, train_estimator

log = logging.getLogger(__name__)


def _write_json(obj: dict, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _train_config(cfg: dict, lam: float, seed) -> TrainConfig:
    return TrainConfig.from_dict({**cfg, "lam": float(lam), "seed": seed})


def _loss_rows(history: list[float], lrs: list[float]) -> list[dict]:
    return [{"step": i + 1, "loss": l, "lr": r} for i, (l, r) in enumerate(zip(history, lrs))]


def _seed_int(seq: np.random.SeedSequence) -> int:
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def model_from_config(desc: dict):
    """Any model descriptor, including the random linear form below."""
    if desc.get("kind") == "linear":
        return linear_model_from_config(desc)
    return build_model(desc)


def linear_model_from_config(desc: dict) -> LinearGaussianModel:
    """Explicit ``H``/``sigma_n`` or a random well-conditioned instance.

    The random form takes ``n``, ``d``, ``noise_var``, ``coupling`` and
    ``seed`` and builds ``H = I + coupling * G / sqrt(n)`` (top ``d``
    columns of an ``n x n`` identity when ``d < n``) with white noise.
    """
    if "H" in desc:
        return LinearGaussianModel(np.asarray(desc["H"], float), np.asarray(desc["sigma_n"], float))
    n, d = int(desc["n"]), int(desc["d"])
    rng = np.random.default_rng(as_seedseq(desc.get("seed", 0)))
    H = np.eye(n, d) + float(desc.get("coupling", 0.0)) * rng.standard_normal((n, d)) / math.sqrt(n)
    return LinearGaussianModel(H, float(desc.get("noise_var", 1.0)) * np.eye(n))


def gaussian_prior_from_config(desc: dict, d: int) -> GaussianPrior:
    """``{"var": v}`` for ``v I``, or an explicit ``mean``/``cov``."""
    if "cov" in desc:
        return GaussianPrior(desc.get("mean", np.zeros(d)), desc["cov"])
    return GaussianPrior(np.zeros(d), float(desc.get("var", 1.0)) * np.eye(d))


# ---------------------------------------------------------------------------
# SNR estimation
# ---------------------------------------------------------------------------


def run_snr(cfg: dict, seed: int, threads: int, out: Path) -> dict:
    """Train the EMMSE and BCE SNR networks and compare them with the MLE."""
    model = SnrModel(int(cfg["model"]["p"]))
    prior = SnrCompositePrior(tuple(cfg["prior"]["h_range"]), tuple(cfg["prior"]["snr_range"]))
    grid = [float(g) for g in cfg["eval"]["grid"]]
    reps = int(cfg["eval"]["reps"])
    h_eval = float(cfg["eval"]["h"])
    train_seq, fim_seq, eval_seq = as_seedseq(seed).spawn(3)

    crb_tasks = list(enumerate(grid))
    fims = seeded_map(lambda item, rng: snr_fim_mc(model, h_eval, h_eval ** 2 / item[1],
                                                   int(cfg["eval"]["fim_reps"]), rng),
                      crb_tasks, fim_seq, threads)
    crbs = [f.crb for f in fims]

    estimators: dict[str, Callable] = {"MLE": mle_estimator(model)}
    train_info = {}
    for (name, lam), tseq in zip(cfg["lambdas"].items(), train_seq.spawn(len(cfg["lambdas"]))):
        t0 = time.perf_counter()
        res = train_estimator("snr", _train_config(cfg["train"], lam, _seed_int(tseq)), prior, model,
                              **cfg["arch"])
        log.info("trained %s (lambda=%g) in %.1fs", name, lam, time.perf_counter() - t0)
        save_checkpoint(res.estimator, out / f"{name.lower()}.ckpt", {"lam": lam})
        write_csv(_loss_rows(res.history, res.lr_history), out / f"loss_{name.lower()}.csv")
        estimators[name] = res.estimator
        train_info[name] = {"lam": lam, "final_loss": float(np.mean(res.history[-200:]))}

    rows, inv_rows, summary = [], [], {}
    nu = np.array([h_eval])

    def point(item, rng, est):
        i, y = item
        # the same observations for every method (common random numbers)
        x = model.sample_groups(np.array([[y]]), reps, rng, nu)[0]
        values = np.asarray(est(x), dtype=float).reshape(reps, 1)
        return metrics_from_estimates([y], values, crbs[i]), float(inverse_snr_errors(values, y).mean())

    for name, est in estimators.items():
        results = seeded_map(lambda item, rng: point(item, rng, est), crb_tasks, eval_seq, threads)
        recs = [r for r, _ in results]
        inv = [v for _, v in results]
        rows += records_to_rows(recs, method=name)
        inv_rows += [{"method": name, "y": y, "snr_db": 10 * math.log10(y), "inverse_mse": v}
                     for y, v in zip(grid, inv)]
        summary[name] = {
            "abs_bias": [abs(float(r.bias[0])) for r in recs],
            "mse_over_crb": [r.mse_over_crb for r in recs],
            "inverse_mse": inv,
        }
    for r in rows:
        r["snr_db"] = 10 * math.log10(r["y0"])
    write_csv(rows, out / "snr_metrics.csv")
    write_csv(inv_rows, out / "snr_inverse.csv")
    write_csv([{"y": y, "crb": f.crb, "fim_reps": f.reps} for y, f in zip(grid, fims)], out / "snr_crb.csv")
    result = {"experiment": "snr", "grid": grid, "crb": crbs, "methods": summary, "training": train_info}
    _write_json(result, out / "summary.json")
    return result


# ---------------------------------------------------------------------------
# Structured covariance
# ---------------------------------------------------------------------------


def run_covariance(cfg: dict, seed: int, threads: int, out: Path) -> dict:
    """EMMSE and BCE refinement networks; CRB scatter on several test priors."""
    model = StructuredCovModel(int(cfg["model"]["p_samples"]))
    prior = build_prior(cfg["prior"])
    train_seq, eval_seq = as_seedseq(seed).spawn(2)
    estimators, train_info = {}, {}
    for (name, lam), tseq in zip(cfg["lambdas"].items(), train_seq.spawn(len(cfg["lambdas"]))):
        t0 = time.perf_counter()
        res = train_estimator("covariance", _train_config(cfg["train"], lam, _seed_int(tseq)), prior, model,
                              **cfg["arch"])
        log.info("trained %s (lambda=%g) in %.1fs", name, lam, time.perf_counter() - t0)
        save_checkpoint(res.estimator, out / f"{name.lower()}.ckpt", {"lam": lam})
        write_csv(_loss_rows(res.history, res.lr_history), out / f"loss_{name.lower()}.csv")
        estimators[name] = res.estimator
        train_info[name] = {"lam": lam, "final_loss": float(np.mean(res.history[-200:]))}

    summary: dict = {}
    rows = []
    test_seqs = eval_seq.spawn(len(cfg["eval"]["test_priors"]))
    for (label, desc), tseq in zip(cfg["eval"]["test_priors"].items(), test_seqs):
        test_prior = build_prior(desc)
        summary[label] = {}
        for name, est in estimators.items():
            recs = crb_scatter_records(est, model, test_prior, int(cfg["eval"]["count"]),
                                       int(cfg["eval"]["reps"]), tseq, threads)
            recs.sort(key=lambda r: r.crb)
            ratios = np.array([r.mse / r.crb for r in recs])
            summary[label][name] = {
                "mean_mse_over_crb": float(ratios.mean()),
                "mean_mse": float(np.mean([r.mse for r in recs])),
                "mean_crb": float(np.mean([r.crb for r in recs])),
                "mean_bias_norm": float(np.mean([r.bias_norm for r in recs])),
            }
            rows += [{"test_prior": label, "method": name, "rank": i, "crb": r.crb, "mse": r.mse,
                      "mse_se": r.mse_se, "bias_norm": r.bias_norm} for i, r in enumerate(recs)]
    write_csv(rows, out / "cov_scatter.csv")
    labels = list(cfg["eval"]["test_priors"])
    degradation = {}
    if len(labels) >= 2:
        base, shifted = labels[0], labels[1]
        for name in estimators:
            degradation[name] = (summary[shifted][name]["mean_mse_over_crb"]
                                 / summary[base][name]["mean_mse_over_crb"] - 1.0)
    result = {"experiment": "covariance", "test_priors": summary, "ratio_change": degradation,
              "training": train_info}
    _write_json(result, out / "summary.json")
    return result


# ---------------------------------------------------------------------------
# Linear regularization (EMMSE / ridge / BCE)
# ---------------------------------------------------------------------------


def run_linear_reg(cfg: dict, seed: int, threads: int, out: Path) -> dict:
    rc = RegularizationConfig(
        n_list=tuple(int(v) for v in cfg["n_list"]), trials=int(cfg["trials"]),
        bce_grid=tuple(cfg["bce_grid"]), ridge_grid=tuple(cfg["ridge_grid"]),
        val_size=int(cfg["val_size"]), n=int(cfg["n"]), d=int(cfg["d"]),
        setup_seed=int(cfg["setup_seed"]), jitter=float(cfg["jitter"]),
    )
    res = regularization_experiment(rc, seed, threads=threads)
    rows = res.summary_rows()
    for i, N in enumerate(res.n_list):
        gap, se = res.paired_gap(i)
        for r in rows:
            if r["N"] == N:
                r["negative_ridge_fraction"] = res.negative_ridge_fraction(i)
                r["emmse_minus_bce"] = gap
                r["emmse_minus_bce_se"] = se
    write_csv(rows, out / "linear_reg_summary.csv")
    trial_rows = []
    for i, N in enumerate(res.n_list):
        for t in range(rc.trials):
            trial_rows.append({"N": N, "trial": t, **{m: float(v[i, t]) for m, v in res.test_bmse.items()},
                               "ridge_lambda": float(res.ridge_lambda[i, t]),
                               "bce_lambda": float(res.bce_lambda[i, t])})
    write_csv(trial_rows, out / "linear_reg_trials.csv")
    result = {
        "experiment": "linear-reg", "oracle_bmse": res.oracle_bmse, "skipped_ridge": res.skipped_ridge,
        "n_list": res.n_list,
        "mean_bmse": {m: [float(v[i].mean()) for i in range(len(res.n_list))] for m, v in res.test_bmse.items()},
        "emmse_minus_bce": [list(res.paired_gap(i)) for i in range(len(res.n_list))],
        "negative_ridge_fraction": [res.negative_ridge_fraction(i) for i in range(len(res.n_list))],
    }
    _write_json(result, out / "summary.json")
    return result


# ---------------------------------------------------------------------------
# Averaging consistency
# ---------------------------------------------------------------------------


def run_averaging(cfg: dict, seed: int, threads: int, out: Path) -> dict:
    """Average ``M_t`` local estimates; BCE and EMMSE nets plus a biased control."""
    model = linear_model_from_config(cfg["model"])
    prior = gaussian_prior_from_config(cfg["prior"], model.param_dim)
    train_seq, eval_seq = as_seedseq(seed).spawn(2)
    estimators: dict[str, Callable] = {}
    for (name, lam), tseq in zip(cfg["lambdas"].items(), train_seq.spawn(len(cfg["lambdas"]))):
        res = train_estimator("linear", _train_config(cfg["train"], lam, _seed_int(tseq)), prior, model)
        save_checkpoint(res.estimator, out / f"{name.lower()}.ckpt", {"lam": lam})
        estimators[name] = res.estimator
    offset = float(cfg["control_offset"])
    estimators["WLS+offset"] = ShiftedEstimator(wls(model.H, model.sigma_n), offset)

    y = np.asarray(cfg["eval"]["y"], float)
    m_list = [int(m) for m in cfg["eval"]["m_list"]]
    names = list(estimators)
    curves = seeded_map(lambda name, rng: averaging_eval(estimators[name], model, y, m_list,
                                                         int(cfg["eval"]["reps"]), rng),
                        names, eval_seq, threads)
    rows, summary = [], {}
    for name, curve in zip(names, curves):
        for m_t, r in zip(curve.m_t, curve.records):
            rows.append({"method": name, "m_t": m_t, "mse": r.mse, "bias_norm": r.bias_norm,
                         "var": r.variance, "mse_se": r.mse_se, "var_se": r.variance_se})
        summary[name] = {"log_variance_slope": curve.log_variance_slope(), "mse": curve.mse,
                         "bias_norm": curve.bias_norm, "variance": curve.variance}
    write_csv(rows, out / "averaging.csv")
    result = {"experiment": "averaging", "m_list": m_list, "methods": summary, "control_offset": offset}
    _write_json(result, out / "summary.json")
    return result


# ---------------------------------------------------------------------------
# Linear sanity: trained single-layer nets against the closed forms
# ---------------------------------------------------------------------------


def run_linear_sanity(cfg: dict, seed: int, threads: int, out: Path) -> dict:
    model = linear_model_from_config(cfg["model"])
    prior = gaussian_prior_from_config(cfg["prior"], model.param_dim)
    rows, summary = [], {}
    for lam, tseq in zip(cfg["lambdas"], as_seedseq(seed).spawn(len(cfg["lambdas"]))):
        lam = float(lam)
        res = train_estimator("linear", _train_config(cfg["train"], lam, _seed_int(tseq)), prior, model)
        learned = res.estimator.linear_map()
        target = (lmmse(model.H, model.sigma_n, prior.cov) if lam == 0
                  else lbce_model_form(model.H, model.sigma_n, prior.cov, lam)).A
        rel = float(np.linalg.norm(learned - target) / np.linalg.norm(target))
        rows.append({"lam": lam, "rel_frobenius_error": rel, "final_loss": float(np.mean(res.history[-100:]))})
        summary[str(lam)] = rel
    write_csv(rows, out / "linear_sanity.csv")
    result = {"experiment": "linear-sanity", "rel_frobenius_error": summary}
    _write_json(result, out / "summary.json")
    return result


RUNNERS: dict[str, Callable[[dict, int, int, Path], dict]] = {
    "snr": run_snr,
    "covariance": run_covariance,
    "linear-reg": run_linear_reg,
    "averaging": run_averaging,
    "linear-sanity": run_linear_sanity,
}


def run_experiment(cfg: dict, seed: int, threads: int, out: str | Path) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    return RUNNERS[cfg["experiment"]](cfg, seed, threads, out)
