"""Gradients, optimisation and checkpointing for every objective in the registry."""
from __future__ import annotations

import json
import logging
import math
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch
from scipy.optimize import minimize

from .kernels import InputError, NotPositiveDefinite
from .objectives import Named, ParamVector, Problem

log = logging.getLogger(__name__)

CHECKPOINT_SCHEMA = 1
TRACE_TAIL = 50


class EvaluationError(RuntimeError):
    """An objective or gradient evaluated to a non-finite number."""


class TrainingDiverged(RuntimeError):
    """Optimisation hit a non-finite objective; carries the last good state."""

    def __init__(self, message: str, last_good: ParamVector, trace: List[Tuple[int, float, float]]):
        super().__init__(message)
        self.last_good = last_good
        self.trace = trace


@dataclass(frozen=True)
class TrainConfig:
    objective: str
    optimizer: str = "adam"
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    lbfgs_memory: int = 10
    iterations: int = 1000
    batch_size: int = 0  # 0 means full batch
    seed: int = 0
    trace_every: int = 10

    def __post_init__(self):
        if self.optimizer not in ("adam", "lbfgs"):
            raise InputError(f"optimizer must be 'adam' or 'lbfgs', got {self.optimizer!r}")
        if self.iterations < 1 or self.trace_every < 1:
            raise InputError("iterations and trace_every must be positive")
        if self.batch_size < 0:
            raise InputError("batch_size must be >= 0")
        if not self.learning_rate > 0:
            raise InputError("learning rate must be positive")
        if self.optimizer == "lbfgs" and self.batch_size:
            raise InputError("L-BFGS runs full batch only")


@dataclass
class FitResult:
    params: ParamVector
    trace: List[Tuple[int, float, float]] = field(default_factory=list)
    final_objective: float = float("nan")
    wall_time: float = 0.0


Objective = Callable[[Named], torch.Tensor]


def _bad_name(params: ParamVector, grad: np.ndarray) -> str:
    bad = np.flatnonzero(~np.isfinite(grad))
    return params.name_of(int(bad[0])) if bad.size else "?"


def value_and_grad(objective: Objective, params: ParamVector) -> Tuple[float, np.ndarray]:
    flat = torch.tensor(params.values, dtype=torch.float64, requires_grad=True)
    value = objective(params.split(flat))
    scalar = float(value.detach())
    if not math.isfinite(scalar):
        raise EvaluationError(f"objective is {scalar} at the given parameters")
    if not value.requires_grad:
        return scalar, np.zeros_like(params.values)
    (grad,) = torch.autograd.grad(value, flat, allow_unused=True)
    grad = np.zeros_like(params.values) if grad is None else grad.numpy().copy()
    if not np.isfinite(grad).all():
        raise EvaluationError(f"gradient is non-finite for parameter {_bad_name(params, grad)}")
    return scalar, grad


def gradient(objective: Objective, params: ParamVector) -> np.ndarray:
    return value_and_grad(objective, params)[1]


def finite_difference(objective: Objective, params: ParamVector, rel_step: float = 1e-5) -> np.ndarray:
    """Central differences with step ``rel_step * (1 + |theta_i|)``."""
    theta = params.values
    out = np.empty_like(theta)
    with torch.no_grad():
        for i in range(theta.size):
            h = rel_step * (1.0 + abs(theta[i]))
            up, down = theta.copy(), theta.copy()
            up[i] += h
            down[i] -= h
            f_up = float(objective(params.split(torch.as_tensor(up))))
            f_down = float(objective(params.split(torch.as_tensor(down))))
            out[i] = (f_up - f_down) / (2.0 * h)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1.0) -> float:
    """Largest componentwise ``|a - b| / max(|a|, |b|, floor)``."""
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale)) if a.size else 0.0


def gradcheck(problem: Problem, params: Optional[ParamVector] = None,
              rel_step: float = 1e-5) -> Dict[str, float]:
    params = params if params is not None else problem.initial_params()
    objective = lambda p: problem.value(p)  # noqa: E731
    auto = gradient(objective, params)
    fd = finite_difference(objective, params, rel_step)
    return {"max_relative_error": relative_error(auto, fd), "num_params": int(auto.size)}


def _batches(rng: np.random.Generator, N: int, size: int):
    while True:
        order = rng.permutation(N)
        for start in range(0, N - size + 1, size):
            yield np.sort(order[start:start + size])


def fit(problem: Problem, config: TrainConfig, params: Optional[ParamVector] = None,
        checkpoint: Optional[os.PathLike] = None, dataset_hash: str = "",
        callback: Optional[Callable[[int, float], None]] = None,
        extra: Optional[dict] = None) -> FitResult:
    """Maximise ``problem``'s objective from ``params`` (default: the problem's initialisation)."""
    if config.batch_size and not problem.supports_batch:
        raise InputError(f"{problem.objective_id} does not support mini-batches")
    if config.batch_size > problem.num_data:
        raise InputError("batch_size exceeds the number of data points")
    torch.manual_seed(config.seed)
    params = params if params is not None else problem.initial_params()
    start = time.perf_counter()
    runner = _fit_adam if config.optimizer == "adam" else _fit_lbfgs
    try:
        result = runner(problem, config, params, start, callback)
    except TrainingDiverged as err:
        if checkpoint is not None:
            save_checkpoint(checkpoint, problem, err.last_good, err.trace, dataset_hash, config, extra)
        raise
    result.wall_time = time.perf_counter() - start
    if checkpoint is not None:
        save_checkpoint(checkpoint, problem, result.params, result.trace, dataset_hash, config, extra)
    return result


def _fit_adam(problem, config, params, start, callback) -> FitResult:
    flat = torch.nn.Parameter(torch.tensor(params.values, dtype=torch.float64))
    opt = torch.optim.Adam([flat], lr=config.learning_rate, betas=(config.beta1, config.beta2),
                           eps=config.epsilon)
    rng = np.random.default_rng(config.seed)
    batches = _batches(rng, problem.num_data, config.batch_size) if config.batch_size else None
    last_good = params
    trace: List[Tuple[int, float, float]] = []
    value = float("nan")
    for it in range(config.iterations):
        batch = next(batches) if batches is not None else None
        opt.zero_grad()
        try:
            obj = problem.value(params.split(flat), batch=batch, iteration=it)
        except NotPositiveDefinite as err:
            raise TrainingDiverged(f"iteration {it}: {err}", last_good, trace) from err
        value = float(obj.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(f"objective became {value} at iteration {it}", last_good, trace)
        (-obj).backward()
        if not torch.isfinite(flat.grad).all():
            name = _bad_name(params, flat.grad.numpy())
            raise TrainingDiverged(f"non-finite gradient for {name} at iteration {it}",
                                   last_good, trace)
        last_good = params.with_values(flat.detach().numpy())
        if it % config.trace_every == 0:
            trace.append((it, value, time.perf_counter() - start))
        if callback is not None:
            callback(it, value)
        opt.step()
    final = params.with_values(flat.detach().numpy())
    try:
        final_value = problem.bound(final, iteration=config.iterations)
    except NotPositiveDefinite as err:
        raise TrainingDiverged(f"final evaluation: {err}", last_good, trace) from err
    if not math.isfinite(final_value):
        raise TrainingDiverged("final objective is non-finite", last_good, trace)
    trace.append((config.iterations, final_value, time.perf_counter() - start))
    return FitResult(final, trace, final_value)


def _fit_lbfgs(problem, config, params, start, callback) -> FitResult:
    trace: List[Tuple[int, float, float]] = []
    state = {"calls": 0, "last_good": params}

    def fun(theta):
        p = params.with_values(theta)
        try:
            value, grad = value_and_grad(lambda named: problem.value(named), p)
        except (EvaluationError, NotPositiveDefinite) as err:
            raise TrainingDiverged(str(err), state["last_good"], trace) from err
        state["last_good"] = p
        if state["calls"] % config.trace_every == 0:
            trace.append((state["calls"], value, time.perf_counter() - start))
        if callback is not None:
            callback(state["calls"], value)
        state["calls"] += 1
        return -value, -grad

    res = minimize(fun, params.values, jac=True, method="L-BFGS-B",
                   options={"maxiter": config.iterations, "maxcor": config.lbfgs_memory})
    final = params.with_values(res.x)
    final_value = problem.bound(final)
    trace.append((state["calls"], final_value, time.perf_counter() - start))
    return FitResult(final, trace, final_value)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, problem: Problem, params: ParamVector, trace, dataset_hash: str = "",
                    config: Optional[TrainConfig] = None, extra: Optional[dict] = None) -> None:
    """Write a JSON checkpoint atomically; floats are stored with full precision."""
    model = {k: v for k, v in problem.describe().items() if k not in ("likelihood", "Z")}
    from .objectives import likelihood_name

    lik = problem.options.get("likelihood")
    if lik is not None:
        model["likelihood"], model["num_classes"] = likelihood_name(lik)
    payload = {
        "schema_version": CHECKPOINT_SCHEMA,
        "objective": problem.objective_id,
        "manifest": [[name, list(shape)] for name, shape in params.manifest],
        "values": [float(v) for v in params.values],  # shortest round-trip decimal
        "scaling_mode": getattr(problem, "scaling_mode", getattr(problem, "mode", None)),
        "dataset_hash": dataset_hash,
        "trace_tail": [list(t) for t in trace[-TRACE_TAIL:]],
        "model": model,
        "train_config": asdict(config) if config is not None else None,
        "extra": extra or {},
    }
    if payload["scaling_mode"] is not None:
        payload["scaling_mode"] = str(getattr(payload["scaling_mode"], "value",
                                              payload["scaling_mode"]))
    _atomic_write(Path(path), json.dumps(payload, indent=1))


def load_checkpoint(path) -> Tuple[ParamVector, dict]:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise InputError(f"cannot read checkpoint {path}: {err}") from err
    if payload.get("schema_version") != CHECKPOINT_SCHEMA:
        raise InputError(f"unsupported checkpoint schema {payload.get('schema_version')!r}")
    manifest = tuple((name, tuple(shape)) for name, shape in payload["manifest"])
    values = np.array([float(v) for v in payload["values"]], dtype=np.float64)
    return ParamVector(values, manifest), payload
