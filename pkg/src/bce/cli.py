"""Command-line entry point.

Subcommands::

    bce gen          materialize a dataset file
    bce train        train one estimator and write a checkpoint
    bce eval         Monte-Carlo metrics of an estimator over a grid
    bce experiment   run snr | covariance | linear-reg | averaging | linear-sanity
    bce grad-check   finite-difference check of the network gradients

Exit codes: 0 success, 1 failed check, 2 bad configuration, 3 numerical
failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .config import EXPERIMENTS, ConfigError, dump_config, resolve_config
from .datagen import PriorError, build_prior, gen_dataset, load_dataset, save_dataset
from .evaluation import eval_sweep, mle_estimator, records_to_rows, write_csv
from .experiments import gaussian_prior_from_config, model_from_config, run_experiment
from .linear_bce import LinearAlgebraError, lmmse, wls
from .neuralnet import MlpSpec, grad_check
from .rng import as_seedseq, seeded_map
from .statmodels import ModelError, SnrModel, snr_fim_mc
from .training import TrainConfig, TrainingDiverged, load_checkpoint, save_checkpoint, train_estimator

log = logging.getLogger("bce")

EXIT_FAILED, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 1, 2, 3, 4
GRAD_TOL = 1e-5


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file (comments allowed)")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on it)")
    p.add_argument("--out", default="bce_out", help="output directory")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry by dot path, e.g. train.steps=500 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bce", description="Bias constrained estimation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in [("gen", "generate a dataset"), ("train", "train an estimator"),
                       ("eval", "evaluate an estimator")]:
        _common(sub.add_parser(name, help=text))
    exp = sub.add_parser("experiment", help="run an end-to-end experiment")
    exp.add_argument("name", choices=EXPERIMENTS)
    _common(exp)
    gc = sub.add_parser("grad-check", help="finite-difference gradient check")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--lam", type=float, action="append", help="loss weights to check (default 0, 1, 1000)")
    gc.add_argument("--tol", type=float, default=GRAD_TOL)
    return parser


def _resolve(name: str, args) -> dict:
    cfg = resolve_config(name, args.config, args.overrides)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.threads < 1:
        raise ConfigError("--threads must be >= 1")
    return cfg


def _out_dir(args, cfg: dict) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "effective_config.json")
    return out


def _print_table(rows: list[dict], keys: list[str]) -> None:
    widths = {k: max(len(k), *(len(_cell(r.get(k))) for r in rows)) for k in keys}
    print("  ".join(k.rjust(widths[k]) for k in keys))
    for r in rows:
        print("  ".join(_cell(r.get(k)).rjust(widths[k]) for k in keys))


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else f"{v:.5g}"
    return "" if v is None else str(v)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    cfg = _resolve("gen", args)
    model = model_from_config(cfg["model"])
    prior = build_prior(cfg["prior"])
    out = _out_dir(args, cfg)
    ds = gen_dataset(prior, model, int(cfg["N"]), int(cfg["M"]), int(cfg["seed"]))
    save_dataset(ds, out / "dataset.bin")
    print(f"wrote {out / 'dataset.bin'}: N={ds.N} M={ds.M} obs={list(ds.x.shape[2:])}")
    return 0


def _prior_for(cfg: dict, model):
    desc = cfg.get("prior")
    if desc is None:
        return None
    if desc.get("kind") == "gaussian" and "cov" not in desc:
        return gaussian_prior_from_config(desc, model.param_dim)
    return build_prior(desc)


def cmd_train(args) -> int:
    cfg = _resolve("train", args)
    model = model_from_config(cfg["model"])
    prior = _prior_for(cfg, model)
    tc = TrainConfig.from_dict({**cfg["train"], "seed": int(cfg["seed"])})
    dataset = None
    if cfg.get("dataset"):
        dataset = load_dataset(cfg["dataset"])
        tc = TrainConfig.from_dict({**tc.to_dict(), "data_mode": "fixed"})
    out = _out_dir(args, cfg)
    res = train_estimator(cfg["problem"], tc, prior=prior, model=model, dataset=dataset, **cfg["arch"])
    save_checkpoint(res.estimator, out / "checkpoint.bin", {"lam": tc.lam, "problem": cfg["problem"],
                                                            "model": model.descriptor()})
    write_csv([{"step": i + 1, "loss": l, "lr": r} for i, (l, r) in enumerate(zip(res.history, res.lr_history))],
              out / "loss.csv")
    tail = res.history[-min(len(res.history), 100):]
    final = float(np.mean(tail)) if tail else math.nan
    print(f"trained {cfg['problem']} estimator, lambda={tc.lam:g}, {tc.steps} steps, final loss {final:.6g}")
    return 0


def _estimator_for(cfg: dict, model):
    name = cfg["estimator"]
    if name == "mle":
        if not isinstance(model, SnrModel):
            raise ConfigError("the mle estimator is available for the snr model")
        return mle_estimator(model)
    if name in ("wls", "lmmse"):
        if not hasattr(model, "H"):
            raise ConfigError(f"{name} needs a linear model")
        if name == "wls":
            return wls(model.H, model.sigma_n)
        prior = _prior_for(cfg, model)
        if prior is None or not hasattr(prior, "cov"):
            raise ConfigError("lmmse needs a Gaussian prior")
        return lmmse(model.H, model.sigma_n, prior.cov + np.outer(prior.mean, prior.mean))
    est, _ = load_checkpoint(name)
    return est


def cmd_eval(args) -> int:
    cfg = _resolve("eval", args)
    model = model_from_config(cfg["model"])
    estimator = _estimator_for(cfg, model)
    grid = [np.atleast_1d(np.asarray(g, float)) for g in cfg["grid"]]
    fim_seq, eval_seq = as_seedseq(int(cfg["seed"])).spawn(2)
    nuisance = None
    crbs = None
    if isinstance(model, SnrModel):
        h = float(cfg.get("nuisance") or 1.0)
        nuisance = np.array([h])
        crbs = [f.crb for f in seeded_map(lambda y, rng: snr_fim_mc(model, h, h * h / float(y[0]),
                                                                    int(cfg["fim_reps"]), rng),
                                          grid, fim_seq, args.threads)]
    out = _out_dir(args, cfg)
    recs = eval_sweep(estimator, model, grid, int(cfg["reps"]), eval_seq, args.threads, crb=crbs,
                      nuisance=nuisance)
    rows = records_to_rows(recs)
    write_csv(rows, out / "metrics.csv")
    _print_table([{"y": ",".join(f"{v:g}" for v in r.y), "|bias|": r.bias_norm, "var": r.variance,
                   "mse": r.mse, "crb": r.crb, "mse/crb": r.mse_over_crb} for r in recs],
                 ["y", "|bias|", "var", "mse", "crb", "mse/crb"])
    return 0


def cmd_experiment(args) -> int:
    cfg = _resolve(args.name, args)
    out = _out_dir(args, cfg)
    summary = run_experiment(cfg, int(cfg["seed"]), args.threads, out)
    print(json.dumps(summary, indent=2, sort_keys=True, default=float))
    return 0


def cmd_grad_check(args) -> int:
    lams = args.lam or [0.0, 1.0, 1000.0]
    rows = []
    worst = 0.0
    for act in ("tanh", "relu"):
        spec = MlpSpec((4, 8, 8, 2), (act,))
        for lam in lams:
            rep = grad_check(spec, args.seed, lam=lam)
            worst = max(worst, rep.max_rel_error)
            rows.append({"activation": act, "lambda": lam, "params": rep.n_params,
                         "max_rel_error": rep.max_rel_error})
    _print_table(rows, ["activation", "lambda", "params", "max_rel_error"])
    ok = worst <= args.tol
    print(f"max relative error {worst:.3g} {'<=' if ok else '>'} {args.tol:g}: {'PASS' if ok else 'FAIL'}")
    return 0 if ok else EXIT_FAILED


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
            "experiment": cmd_experiment, "grad-check": cmd_grad_check}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (TrainingDiverged, LinearAlgebraError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, PriorError, ModelError, KeyError, TypeError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
