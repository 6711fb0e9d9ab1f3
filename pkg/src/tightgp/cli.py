"""Command-line entry point: ``tightgp {fit,predict,compare-bounds,reproduce,gradcheck}``.

Every invocation appends one JSON record per line to
``$TIGHTGP_RESULTS_DIR/results.jsonl`` (default ``./results``).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np
import torch

from . import data as data_mod
from . import experiments
from .bounds import CollapsedKind, F8_ORACLE_CAP, collapsed_bound
from .kernels import Hyperparams, InputError, NotPositiveDefinite
from .likelihoods import Categorical
from .objectives import TRAINABLE, likelihood_from_name, make_problem
from .predict import CapabilityError, VarianceMode
from .training import TrainConfig, TrainingDiverged, fit, gradcheck, load_checkpoint

log = logging.getLogger("tightgp")

RESULTS_ENV = "TIGHTGP_RESULTS_DIR"
RESULTS_FILE = "results.jsonl"
ORDER_TOL = 1e-7
GRADCHECK_TOL = 1e-4
EXACT_CAP = 5000


@dataclass
class RunRecord:
    command: str
    config: Dict[str, object]
    dataset_hash: str = ""
    seed: Optional[int] = None
    metrics: Dict[str, object] = field(default_factory=dict)
    artifacts: Dict[str, str] = field(default_factory=dict)
    status: str = "ok"
    failed: bool = False
    error: Optional[str] = None
    timestamp: float = field(default_factory=time.time)

    def clean(self) -> dict:
        """Non-finite metrics become ``"nan"`` and set the failure flag."""
        out = asdict(self)
        metrics = {}
        for k, v in self.metrics.items():
            if isinstance(v, float) and not math.isfinite(v):
                metrics[k] = "nan"
                out["failed"] = True
            else:
                metrics[k] = v
        out["metrics"] = metrics
        return out


def results_path() -> Path:
    return Path(os.environ.get(RESULTS_ENV, "results")) / RESULTS_FILE


def append_record(record: RunRecord) -> dict:
    payload = record.clean()
    path = results_path()
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("a") as fh:
        fh.write(json.dumps(payload, default=_jsonable) + "\n")
    return payload


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    return str(obj)


def _load_dataset(name: str, seed: int, target: Optional[str] = None) -> data_mod.Dataset:
    if name == "synthetic-regression":
        return data_mod.synthetic_regression(seed=seed)
    if name == "synthetic-classification":
        return data_mod.synthetic_classification(seed=seed)
    if name == "three-cluster":
        return data_mod.three_cluster(seed=seed)
    path = Path(name)
    if path.suffix == ".csv":
        tgt = -1 if target is None else (int(target) if target.lstrip("-").isdigit() else target)
        return data_mod.load_csv(path, target=tgt)
    return data_mod.load_named(name)


def _dataset_spec(args) -> dict:
    return {"dataset": args.dataset, "target": getattr(args, "target", None),
            "data_seed": args.seed, "test_fraction": args.test_fraction}


def _prepare(spec: dict, objective: str, likelihood: str):
    ds = _load_dataset(spec["dataset"], spec["data_seed"], spec.get("target"))
    if objective in ("gplvm", "t-gplvm"):
        Y = np.hstack([ds.X, ds.y])
        return ds, data_mod.from_arrays(Y - Y.mean(0), None, ds.name), None
    classify = likelihood != "gaussian"
    if spec["test_fraction"] > 0:
        train, test = data_mod.split(ds, spec["test_fraction"], spec["data_seed"],
                                     standardize_y=not classify)
    else:
        stats = data_mod.fit_standardization(ds.X, ds.y, standardize_y=not classify)
        train, test = data_mod.standardize(ds, stats), None
    return ds, train, test


def _likelihood(name: str, train: data_mod.Dataset, seed: int):
    if name == "categorical":
        return Categorical(int(train.targets.max()) + 1, seed=seed)
    return likelihood_from_name(name)


def cmd_fit(args) -> RunRecord:
    spec = _dataset_spec(args)
    config = {**spec, "objective": args.objective, "num_inducing": args.num_inducing,
              "iterations": args.iterations, "batch": args.batch, "lr": args.lr,
              "optimizer": args.optimizer, "likelihood": args.likelihood, "family": args.family,
              "latent_dim": args.latent_dim}
    record = RunRecord("fit", config, seed=args.seed)
    ds, train, test = _prepare(spec, args.objective, args.likelihood)
    record.dataset_hash = ds.content_hash
    gplvm = args.objective in ("gplvm", "t-gplvm")
    lik = None if gplvm else _likelihood(args.likelihood, train, args.seed)
    if gplvm:
        problem = make_problem(args.objective, np.zeros((train.num_data, args.latent_dim)), train.X,
                               num_inducing=args.num_inducing, family=args.family, seed=args.seed,
                               latent_dim=args.latent_dim)
    else:
        y = train.targets if args.likelihood == "gaussian" else train.targets.astype(np.int64)
        problem = make_problem(args.objective, train.X, y, num_inducing=args.num_inducing,
                               family=args.family, seed=args.seed, likelihood=lik)
    cfg = TrainConfig(args.objective, optimizer=args.optimizer, learning_rate=args.lr,
                      iterations=args.iterations, batch_size=args.batch, seed=args.seed)
    extra = {"dataset_spec": spec, "likelihood": args.likelihood,
             "standardization": train.standardization.as_dict() if train.standardization else None}
    checkpoint = Path(args.checkpoint) if args.checkpoint else None
    result = fit(problem, cfg, checkpoint=checkpoint, dataset_hash=ds.content_hash, extra=extra)
    record.metrics.update(elbo=result.final_objective, wall_time=result.wall_time,
                          **{k: v for k, v in experiments.hyper_summary(result.params).items()
                             if not isinstance(v, list)})
    if test is not None and not gplvm:
        if args.likelihood == "gaussian":
            scores = experiments.regression_scores(problem, result.params, test)
            record.metrics.update(rmse=scores["rmse"], log_likelihood=scores["log_likelihood"])
        elif args.likelihood == "categorical":
            record.metrics["log_likelihood"] = experiments.classification_score(
                problem, result.params, test, args.seed)
    if checkpoint is not None:
        record.artifacts["checkpoint"] = str(checkpoint)
    print(f"{args.objective}: final objective {result.final_objective:.6f} "
          f"({result.wall_time:.1f}s)")
    return record


def _problem_from_checkpoint(payload: dict, params):
    extra = payload.get("extra") or {}
    spec = extra.get("dataset_spec")
    if spec is None:
        raise InputError("checkpoint carries no dataset specification")
    objective = payload["objective"]
    if objective in ("gplvm", "t-gplvm"):
        raise CapabilityError("latent variable models have no input-space predictions")
    ds, train, _ = _prepare(spec, objective, extra.get("likelihood", "gaussian"))
    if ds.content_hash != payload.get("dataset_hash"):
        raise InputError("training data changed since the checkpoint was written")
    model = payload["model"]
    lik_name = extra.get("likelihood", "gaussian")
    lik = _likelihood(lik_name, train, model.get("seed", 0))
    y = train.targets if lik_name == "gaussian" else train.targets.astype(np.int64)
    problem = make_problem(objective, train.X, y, num_inducing=model.get("num_inducing"),
                           family=model["family"], ard=model["ard"], seed=model["seed"],
                           likelihood=lik)
    if problem.initial_params().manifest != params.manifest:
        raise InputError("checkpoint manifest does not match the rebuilt model")
    return problem, train


def cmd_predict(args) -> RunRecord:
    params, payload = load_checkpoint(args.checkpoint)
    record = RunRecord("predict", {"checkpoint": args.checkpoint, "input": args.input,
                                   "variance_mode": args.variance_mode},
                       dataset_hash=payload.get("dataset_hash", ""),
                       seed=payload["model"].get("seed"))
    problem, train = _problem_from_checkpoint(payload, params)
    inputs = data_mod.load_csv(args.input, target=None, header=not args.no_header)
    if inputs.input_dim != train.input_dim:
        raise InputError(f"input has {inputs.input_dim} columns, model expects {train.input_dim}")
    st = train.standardization
    Xs = st.apply(inputs.X, None)[0] if st is not None else inputs.X
    start = time.perf_counter()
    mean, var = problem.predict(params, Xs, VarianceMode(args.variance_mode))
    elapsed = time.perf_counter() - start
    mean, var = mean.numpy(), var.numpy()
    if st is not None and payload["extra"].get("likelihood", "gaussian") == "gaussian":
        mean, var = st.inverse_y(mean, var)
    out = open(args.output, "w", newline="") if args.output else sys.stdout
    try:
        writer = csv.writer(out)
        if mean.ndim == 1:
            writer.writerow(["mean", "variance"])
            writer.writerows(zip(mean.tolist(), var.tolist()))
        else:
            L = mean.shape[1]
            writer.writerow([f"mean_{j}" for j in range(L)] + [f"variance_{j}" for j in range(L)])
            writer.writerows(np.hstack([mean, var]).tolist())
    finally:
        if args.output:
            out.close()
    record.metrics.update(num_points=int(mean.shape[0]), wall_time=elapsed)
    if args.output:
        record.artifacts["predictions"] = args.output
    return record


BOUND_ORDER = ("f1", "f5", "f9", "f4", "f8", "exact")


def cmd_compare_bounds(args) -> RunRecord:
    ds = _load_dataset(args.dataset, args.seed, getattr(args, "target", None))
    stats = data_mod.fit_standardization(ds.X, ds.y)
    ds = data_mod.standardize(ds, stats)
    X, y = ds.X, ds.targets
    N = X.shape[0]
    h = Hyperparams.create(args.family, args.variance, args.lengthscale, args.noise,
                           input_dim=X.shape[1], ard=False)
    Z = X[np.sort(np.random.default_rng(args.seed).choice(N, args.num_inducing, replace=False))]
    config = {"dataset": args.dataset, "num_inducing": args.num_inducing, "family": args.family,
              "variance": args.variance, "lengthscale": args.lengthscale, "noise": args.noise}
    record = RunRecord("compare-bounds", config, dataset_hash=ds.content_hash, seed=args.seed)
    values = {}
    with torch.no_grad():
        for kind in BOUND_ORDER:
            if kind == "f8" and N > F8_ORACLE_CAP or kind == "exact" and N > EXACT_CAP:
                continue
            values[kind] = float(collapsed_bound(CollapsedKind(kind), h, Z, X, y))
    print(f"{'bound':<8}{'value':>22}")
    for kind, v in values.items():
        print(f"{kind:<8}{v:>22.10f}")
    chain = [k for k in ("f1", "f5", "f4", "f8", "exact") if k in values]
    side = [k for k in ("f1", "f9", "f4") if k in values]
    violations = [f"{a} > {b}" for seq in (chain, side) for a, b in zip(seq, seq[1:])
                  if values[a] - values[b] > ORDER_TOL]
    record.metrics.update(values)
    if violations:
        record.status, record.failed = "ordering-violated", True
        record.error = "; ".join(violations)
        print("ordering violated: " + record.error, file=sys.stderr)
    return record


def cmd_reproduce(args) -> RunRecord:
    record = RunRecord("reproduce", {"experiment": args.experiment, "iterations": args.iterations},
                       seed=args.seed)
    out_dir = results_path().parent
    if args.experiment == "snelson":
        res = experiments.run_snelson(iterations=args.iterations or 2000, seed=args.seed)
        record.dataset_hash = res["dataset_hash"]
        for oid, m in res["methods"].items():
            record.metrics[f"{oid}_objective"] = m["final_objective"]
            record.metrics[f"{oid}_noise_variance"] = m["noise_variance"]
            record.metrics[f"{oid}_kernel_variance"] = m["kernel_variance"]
        record.metrics["canonical_data"] = res["canonical"]
        series = out_dir / f"snelson_series_seed{args.seed}.json"
        series.parent.mkdir(parents=True, exist_ok=True)
        series.write_text(json.dumps(res["series"]))
        record.artifacts["series"] = str(series)
        sg, tsg = res["methods"]["sgpr"], res["methods"]["t-sgpr"]
        print(f"{'method':<8}{'objective':>14}{'noise':>10}{'variance':>10}")
        for name, m in (("sgpr", sg), ("t-sgpr", tsg)):
            print(f"{name:<8}{m['final_objective']:>14.4f}{m['noise_variance']:>10.4f}"
                  f"{m['kernel_variance']:>10.4f}")
        if not res["canonical"]:
            print("note: bundled Snelson surrogate in use; set TIGHTGP_SNELSON_DIR for the public data")
    elif args.experiment == "table1":
        kwargs = {"seed": args.seed}
        if args.iterations:
            kwargs["iterations"] = args.iterations
        rows = experiments.run_table1(**kwargs)
        print(f"{'dataset':<14}{'variance':<12}{'RMSE':>8}{'LL':>9}{'time(s)':>10}")
        for row in rows:
            if "skipped" in row:
                print(f"{row['dataset']:<14}skipped: {row['skipped']}")
                record.metrics[f"{row['dataset']}_skipped"] = True
                continue
            for mode in ("full", "simplified"):
                r = row[mode]
                print(f"{row['dataset']:<14}{mode:<12}{r['rmse']:>8.3f}{r['log_likelihood']:>9.3f}"
                      f"{r['predict_time']:>10.4f}")
                for key in ("rmse", "log_likelihood", "predict_time"):
                    record.metrics[f"{row['dataset']}_{mode}_{key}"] = r[key]
        table = out_dir / f"table1_seed{args.seed}.json"
        table.parent.mkdir(parents=True, exist_ok=True)
        table.write_text(json.dumps(rows))
        record.artifacts["table"] = str(table)
    else:
        res = experiments.run_oilflow(seeds=[args.seed], iterations=args.iterations or 3000)
        run = res["runs"][0]
        record.dataset_hash = run["dataset_hash"]
        record.metrics.update(gplvm_elbo=run["gplvm"]["final_elbo"],
                              t_gplvm_elbo=run["t-gplvm"]["final_elbo"])
        print(f"V-BGPLVM {run['gplvm']['final_elbo']:.3f}  TV-BGPLVM {run['t-gplvm']['final_elbo']:.3f}")
    return record


def cmd_gradcheck(args) -> RunRecord:
    rng = np.random.default_rng(args.seed)
    X = rng.uniform(-2.0, 2.0, (args.n, args.dim))
    y = np.sin(2.0 * X[:, 0]) + 0.1 * rng.standard_normal(args.n)
    if args.objective in ("gplvm", "t-gplvm"):
        problem = make_problem(args.objective, np.zeros((args.n, 2)), rng.standard_normal((args.n, 3)),
                               num_inducing=args.m, seed=args.seed, mc_samples=2)
    else:
        problem = make_problem(args.objective, X, y, num_inducing=args.m, seed=args.seed)
    res = gradcheck(problem)
    record = RunRecord("gradcheck", {"objective": args.objective, "n": args.n, "m": args.m},
                       seed=args.seed, metrics=dict(res))
    print(f"{args.objective}: max relative error {res['max_relative_error']:.3e} "
          f"over {res['num_params']} parameters")
    if res["max_relative_error"] > GRADCHECK_TOL:
        record.status, record.failed = "gradient-mismatch", True
    return record


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tightgp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="train a model and optionally write a checkpoint")
    p.add_argument("--objective", required=True, choices=TRAINABLE)
    p.add_argument("--dataset", required=True,
                   help="snelson, wine, solar, pumadyn32nm, a synthetic name or a CSV path")
    p.add_argument("--target", default=None, help="target column for CSV paths (default: last)")
    p.add_argument("--num-inducing", "-M", type=int, default=20)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--batch", type=int, default=0, help="mini-batch size, 0 for full batch")
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--optimizer", choices=("adam", "lbfgs"), default="adam")
    p.add_argument("--likelihood", choices=("gaussian", "bernoulli", "categorical"),
                   default="gaussian")
    p.add_argument("--family", choices=("se", "matern32"), default="se")
    p.add_argument("--latent-dim", type=int, default=2)
    p.add_argument("--test-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="predict from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="CSV of input rows")
    p.add_argument("--no-header", action="store_true")
    p.add_argument("--variance-mode", choices=("full", "simplified"), default="simplified")
    p.add_argument("--output", default=None, help="CSV destination (default: stdout)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("compare-bounds", help="evaluate every collapsed bound at shared hyperparameters")
    p.add_argument("--dataset", required=True)
    p.add_argument("--target", default=None)
    p.add_argument("--num-inducing", "-M", type=int, default=10)
    p.add_argument("--family", choices=("se", "matern32"), default="se")
    p.add_argument("--variance", type=float, default=1.0)
    p.add_argument("--lengthscale", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_compare_bounds)

    p = sub.add_parser("reproduce", help="run a named desk-scale experiment")
    p.add_argument("experiment", choices=("snelson", "table1", "oilflow"))
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("gradcheck", help="compare autograd with central differences")
    p.add_argument("--objective", required=True,
                   choices=("exact", "f1", "f3", "f4", "f5", "f8", "f9") + TRAINABLE)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--m", type=int, default=3)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)
    return parser


RUNTIME_ERRORS = (InputError, CapabilityError, TrainingDiverged, NotPositiveDefinite, OSError,
                  RuntimeError)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        record = args.func(args)
    except RUNTIME_ERRORS as err:
        config = {k: v for k, v in vars(args).items() if k != "func"}
        append_record(RunRecord(args.command, config, seed=getattr(args, "seed", None),
                                status="error", failed=True, error=f"{type(err).__name__}: {err}"))
        print(f"error: {err}", file=sys.stderr)
        return 1
    payload = append_record(record)
    return 1 if payload["failed"] else 0


if __name__ == "__main__":
    sys.exit(main())
