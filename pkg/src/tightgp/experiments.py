"""Desk-scale experiment runners shared by ``tightgp reproduce`` and the acceptance suite."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
import torch

from . import data as data_mod
from .data import Dataset
from .likelihoods import Categorical, predictive_logpdf
from .objectives import ParamVector, Problem, make_problem
from .predict import VarianceMode
from .training import TrainConfig, fit

log = logging.getLogger(__name__)


def hyper_summary(params: ParamVector) -> Dict[str, object]:
    p = params.unpack()
    out = {
        "kernel_variance": math.exp(float(p["log_variance"])),
        "lengthscales": np.exp(p["log_lengthscales"].numpy()).tolist(),
    }
    if "log_noise_variance" in p:
        out["noise_variance"] = math.exp(float(p["log_noise_variance"]))
    if "log_beta" in p:
        out["beta"] = math.exp(float(p["log_beta"]))
    return out


def _train(problem: Problem, iterations: int, lr: float, seed: int, batch_size: int = 0,
           optimizer: str = "adam"):
    cfg = TrainConfig(problem.objective_id, optimizer=optimizer, learning_rate=lr,
                      iterations=iterations, seed=seed, batch_size=batch_size)
    return fit(problem, cfg)


def run_snelson(iterations: int = 2000, num_inducing: int = 5, seed: int = 0, lr: float = 0.01,
                methods: Sequence[str] = ("sgpr", "t-sgpr"), grid_points: int = 200) -> dict:
    """Collapsed SGPR versus T-SGPR on the Snelson data (raw units, no standardisation)."""
    ds = data_mod.snelson()
    grid = np.linspace(ds.X.min() - 1.0, ds.X.max() + 1.0, grid_points)[:, None]
    out = {"dataset": ds.name, "dataset_hash": ds.content_hash,
           "canonical": data_mod.is_canonical_snelson(ds), "methods": {}, "series": []}
    for oid in methods:
        problem = make_problem(oid, ds.X, ds.targets, num_inducing=num_inducing, seed=seed)
        result = _train(problem, iterations, lr, seed)
        mean, var = problem.predict(result.params, grid) if oid in ("sgpr", "t-sgpr", "svgp", "t-svgp") \
            else (None, None)
        out["methods"][oid] = {
            "final_objective": result.final_objective,
            "wall_time": result.wall_time,
            "inducing": result.params.unpack()["Z"].numpy().ravel().tolist(),
            **hyper_summary(result.params),
        }
        out["series"].append({"label": f"{oid} objective",
                              "x": [t[0] for t in result.trace], "y": [t[1] for t in result.trace]})
        if mean is not None:
            mean, sd = mean.numpy(), np.sqrt(var.numpy())
            out["series"].append({"label": f"{oid} predictive mean", "x": grid[:, 0].tolist(),
                                  "y": mean.tolist()})
            out["series"].append({"label": f"{oid} +-2 sd", "x": grid[:, 0].tolist(),
                                  "lower": (mean - 2 * sd).tolist(), "upper": (mean + 2 * sd).tolist()})
    return out


def regression_scores(problem: Problem, params: ParamVector, test: Dataset,
                      mode=VarianceMode.SIMPLIFIED, full_cap: Optional[int] = None) -> dict:
    """Test RMSE and mean log predictive density in original target units."""
    start = time.perf_counter()
    if full_cap is None:
        mean, var = problem.predict(params, test.X, mode)
    else:
        mean, var = problem.predict(params, test.X, mode, full_cap=full_cap)
    elapsed = time.perf_counter() - start
    noise = hyper_summary(params)["noise_variance"]
    st = test.standardization
    y = test.targets
    mean, var = mean.numpy(), var.numpy() + noise
    if st is not None:
        mean, var = st.inverse_y(mean, var)
        y = st.inverse_y(y)
    ll = -0.5 * np.log(2 * np.pi * var) - 0.5 * (y - mean) ** 2 / var
    return {"rmse": float(np.sqrt(np.mean((y - mean) ** 2))), "log_likelihood": float(ll.mean()),
            "predict_time": elapsed}


def run_table1_on(ds: Dataset, num_inducing: int = 100, iterations: int = 1000, seed: int = 0,
                  lr: float = 0.01, objective: str = "t-sgpr", timing_repeats: int = 3) -> dict:
    """Train on a 90/10 split, then score both variance modes on the test part."""
    train, test = data_mod.split(ds, 0.1, seed)
    problem = make_problem(objective, train.X, train.targets, num_inducing=num_inducing, seed=seed)
    result = _train(problem, iterations, lr, seed)
    cap = max(train.num_data, 1)
    row = {"dataset": ds.name, "N": ds.num_data, "D": ds.input_dim, "objective": objective,
           "final_objective": result.final_objective, "train_time": result.wall_time}
    for mode in (VarianceMode.FULL, VarianceMode.SIMPLIFIED):
        scores = [regression_scores(problem, result.params, test, mode, full_cap=cap)
                  for _ in range(timing_repeats)]
        row[mode.value] = {**scores[0], "predict_time": min(s["predict_time"] for s in scores)}
    row["speedup"] = row["full"]["predict_time"] / max(row["simplified"]["predict_time"], 1e-12)
    return row


TABLE1_DATASETS = ("wine", "solar", "pumadyn32nm")


def run_table1(datasets: Iterable[str] = TABLE1_DATASETS, data_dir=None, **kwargs) -> List[dict]:
    rows = []
    for name in datasets:
        try:
            ds = data_mod.load_named(name, data_dir)
        except data_mod.DataError as err:
            rows.append({"dataset": name, "skipped": str(err)})
            continue
        rows.append(run_table1_on(ds, **kwargs))
    return rows


def run_oilflow(seeds: Sequence[int] = (0, 1, 2, 3, 4), num_inducing: int = 20,
                iterations: int = 3000, lr: float = 0.01, latent_dim: int = 2,
                mc_samples: int = 4, eval_samples: int = 64, n: int = 200, p: int = 12) -> dict:
    """V-BGPLVM versus TV-BGPLVM on the three-cluster surrogate, paired per seed."""
    runs = []
    for seed in seeds:
        ds = data_mod.three_cluster(n, p, seed=seed)
        Y = ds.X - ds.X.mean(0)
        entry = {"seed": seed, "dataset_hash": ds.content_hash}
        for oid in ("gplvm", "t-gplvm"):
            problem = make_problem(oid, np.zeros((n, latent_dim)), Y, num_inducing=num_inducing,
                                   seed=seed, latent_dim=latent_dim, mc_samples=mc_samples)
            result = _train(problem, iterations, lr, seed)
            entry[oid] = {"final_elbo": problem.final_bound(result.params, eval_samples),
                          "wall_time": result.wall_time, **hyper_summary(result.params)}
        runs.append(entry)
    return {"runs": runs,
            "all_improved": all(r["t-gplvm"]["final_elbo"] >= r["gplvm"]["final_elbo"] for r in runs)}


def classification_score(problem: Problem, params: ParamVector, test: Dataset, seed: int = 0) -> float:
    mean, var = problem.predict(params, test.X)
    lik: Categorical = problem.options["likelihood"]
    return float(predictive_logpdf(lik, mean, var, test.targets.astype(np.int64), seed=seed).mean())


def run_benchmark(task: str = "regression", seeds: Sequence[int] = (0, 1, 2, 3, 4),
                  num_inducing: int = 32, iterations: int = 1000, lr: float = 0.01,
                  methods: Sequence[str] = ("svgp", "t-svgp", "solvegp", "t-solvegp"),
                  n: Optional[int] = None) -> dict:
    """Paired test log-likelihoods of standard and scaled-conditional models on synthetic tasks."""
    per_seed = []
    for seed in seeds:
        if task == "regression":
            ds = data_mod.synthetic_regression(n or 2000, seed=seed)
            train, test = data_mod.split(ds, 0.1, seed)
            lik_kwargs = {}
        elif task == "classification":
            ds = data_mod.synthetic_classification(n or 500, seed=seed)
            train, test = data_mod.split(ds, 0.1, seed, standardize_y=False)
            lik_kwargs = {"likelihood": Categorical(3, seed=seed)}
        else:
            raise data_mod.DataError(f"unknown benchmark task {task!r}")
        entry = {"seed": seed}
        for oid in methods:
            y = train.targets if task == "regression" else train.targets.astype(np.int64)
            problem = make_problem(oid, train.X, y, num_inducing=num_inducing, seed=seed, **lik_kwargs)
            result = _train(problem, iterations, lr, seed)
            if task == "regression":
                score = regression_scores(problem, result.params, test)["log_likelihood"]
            else:
                score = classification_score(problem, result.params, test, seed)
            entry[oid] = {"test_log_likelihood": score, "final_objective": result.final_objective}
        per_seed.append(entry)
    means = {oid: float(np.mean([e[oid]["test_log_likelihood"] for e in per_seed])) for oid in methods}
    return {"task": task, "per_seed": per_seed, "mean_test_log_likelihood": means}
