"""Trainable problems: every objective exposed to the optimizer and the CLI.

A problem owns the data, builds its initial :class:`ParamVector`, maps named
unconstrained parameters to domain states and evaluates the objective to be
maximised.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch

from . import bounds
from .gplvm import GplvmScaling, GplvmState, LatentVariational, gplvm_elbo, pca_init
from .kernels import (
    Hyperparams,
    InputError,
    Kernel,
    KernelFamily,
    as_matrix,
    as_tensor,
    build_bundle,
)
from .likelihoods import Bernoulli, Categorical, Gaussian, Likelihood, num_latent
from .predict import FULL_MODE_CAP, CapabilityError, VarianceMode, predict
from .solvegp import OrthState, predict_solvegp, solvegp_elbo, solvegp_minibatch_elbo
from .variational import (
    ConditionalScaling,
    ScalingMode,
    SvgpState,
    VariationalGaussian,
    elbo,
    minibatch_elbo,
)

Named = Dict[str, torch.Tensor]


@dataclass(frozen=True)
class ParamVector:
    """Flat unconstrained parameters plus the ``(name, shape)`` manifest."""

    values: np.ndarray
    manifest: Tuple[Tuple[str, Tuple[int, ...]], ...]

    @classmethod
    def pack(cls, named: Mapping[str, Any]) -> "ParamVector":
        manifest, chunks = [], []
        for name, value in named.items():
            arr = np.asarray(value.detach() if isinstance(value, torch.Tensor) else value,
                             dtype=np.float64)
            manifest.append((name, tuple(int(s) for s in arr.shape)))
            chunks.append(arr.reshape(-1))
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values, tuple(manifest))

    def __post_init__(self):
        expected = sum(int(np.prod(s)) for _, s in self.manifest)
        if self.values.shape != (expected,):
            raise InputError(f"flat vector has {self.values.size} entries, manifest needs {expected}")

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(n for n, _ in self.manifest)

    def split(self, flat: torch.Tensor) -> Named:
        out, start = {}, 0
        for name, shape in self.manifest:
            size = int(np.prod(shape))
            out[name] = flat[start:start + size].reshape(shape)
            start += size
        return out

    def unpack(self) -> Named:
        return self.split(torch.as_tensor(self.values.copy()))

    def with_values(self, values) -> "ParamVector":
        return ParamVector(np.asarray(values, dtype=np.float64).copy(), self.manifest)

    def name_of(self, index: int) -> str:
        start = 0
        for name, shape in self.manifest:
            size = int(np.prod(shape))
            if index < start + size:
                return name if size == 1 else f"{name}[{index - start}]"
            start += size
        raise IndexError(index)


def _tril_pack(L: torch.Tensor) -> torch.Tensor:
    """Lower triangle of (batched) factors; the diagonal goes in as a log."""
    M = L.shape[-1]
    rows, cols = torch.tril_indices(M, M)
    raw = L.clone()
    idx = torch.arange(M)
    raw[..., idx, idx] = torch.log(torch.diagonal(L, dim1=-2, dim2=-1))
    return raw[..., rows, cols]


def _tril_unpack(packed: torch.Tensor, M: int) -> torch.Tensor:
    rows, cols = torch.tril_indices(M, M)
    flat = torch.zeros(*packed.shape[:-1], M * M, dtype=torch.float64)
    L = flat.index_add(-1, rows * M + cols, packed).reshape(*packed.shape[:-1], M, M)
    raw_diag = torch.diagonal(L, dim1=-2, dim2=-1)
    return L - torch.diag_embed(raw_diag) + torch.diag_embed(torch.exp(raw_diag))


def _hyper_from(p: Named, family: KernelFamily, log_noise: Optional[torch.Tensor] = None) -> Hyperparams:
    noise = p["log_noise_variance"] if "log_noise_variance" in p else log_noise
    if noise is None:
        noise = torch.zeros((), dtype=torch.float64)
    return Hyperparams(Kernel(family, p["log_variance"], p["log_lengthscales"]), noise)


def _hyper_init(D: int, ard: bool, variance=1.0, lengthscale=1.0, noise=0.1, gaussian=True):
    out = {
        "log_variance": np.array(math.log(variance)),
        "log_lengthscales": np.full(D if ard else 1, math.log(lengthscale)),
    }
    if gaussian:
        out["log_noise_variance"] = np.array(math.log(noise))
    return out


def _pick_inducing(X: np.ndarray, M: int, rng: np.random.Generator) -> np.ndarray:
    if M > X.shape[0]:
        raise InputError(f"cannot pick {M} inducing points from {X.shape[0]} rows")
    return X[np.sort(rng.choice(X.shape[0], size=M, replace=False))].copy()


@dataclass
class Problem:
    """Base class; subclasses fill in ``init_named``, ``value`` and ``predict``."""

    objective_id: str
    X: np.ndarray
    y: np.ndarray
    family: KernelFamily = KernelFamily.SE
    ard: bool = True
    seed: int = 0
    options: Dict[str, Any] = field(default_factory=dict)
    supports_batch: bool = False
    stochastic: bool = False

    def __post_init__(self):
        pass

    def initial_params(self) -> ParamVector:
        return ParamVector.pack(self.init_named())

    def init_named(self) -> Dict[str, np.ndarray]:
        raise NotImplementedError

    def value(self, p: Named, batch: Optional[np.ndarray] = None, iteration: int = 0) -> torch.Tensor:
        raise NotImplementedError

    def bound(self, params: ParamVector, iteration: int = 0) -> float:
        with torch.no_grad():
            return float(self.value(params.unpack(), iteration=iteration))

    def predict(self, params: ParamVector, Xstar, mode=VarianceMode.SIMPLIFIED,
                full_cap: int = FULL_MODE_CAP):
        raise CapabilityError(f"{self.objective_id} has no predictive distribution")

    def describe(self) -> Dict[str, Any]:
        return {"objective": self.objective_id, "family": self.family.value, "ard": self.ard,
                "seed": self.seed, **self.options}

    @property
    def num_data(self) -> int:
        return self.X.shape[0]


class CollapsedProblem(Problem):
    """Collapsed regression bounds: ``exact``, ``f1``/``sgpr``, ``f3``, ``f4``/``t-sgpr``, ``f5``, ``f8``, ``f9``."""

    ALIASES = {"sgpr": "f1", "t-sgpr": "f4"}

    @property
    def kind(self) -> bounds.CollapsedKind:
        return bounds.CollapsedKind(self.ALIASES.get(self.objective_id, self.objective_id))

    def init_named(self):
        rng = np.random.default_rng(self.seed)
        named = _hyper_init(self.X.shape[1], self.ard, **self.options.get("hyper_init", {}))
        if self.kind is not bounds.CollapsedKind.EXACT:
            Z = self.options.get("Z")
            named["Z"] = (np.asarray(Z, dtype=np.float64) if Z is not None
                          else _pick_inducing(self.X, self.options["num_inducing"], rng))
        if self.kind is bounds.CollapsedKind.F3_GIVEN_M:
            named["log_m"] = np.log(rng.uniform(0.3, 1.0, self.num_data))
        return named

    def hyper(self, p: Named) -> Hyperparams:
        return _hyper_from(p, self.family)

    def value(self, p, batch=None, iteration=0):
        if batch is not None:
            raise InputError("collapsed bounds do not support mini-batching")
        m = torch.exp(p["log_m"]) if "log_m" in p else None
        return bounds.collapsed_bound(self.kind, self.hyper(p), p.get("Z"), self.X, self.y, m).total

    def svgp_state(self, p: Named) -> SvgpState:
        h = self.hyper(p)
        bundle = build_bundle(h, p["Z"], self.X)
        qu = bounds.optimal_qu(h, p["Z"], self.X, self.y, bundle=bundle)
        if self.kind is bounds.CollapsedKind.F1_TITSIAS:
            scaling = ConditionalScaling.identity()
        else:
            scaling = ConditionalScaling.beta_shared(h.noise_variance)
        return SvgpState(h, p["Z"], qu, scaling, Gaussian())

    def predict(self, params, Xstar, mode=VarianceMode.SIMPLIFIED, full_cap=FULL_MODE_CAP):
        if self.kind not in (bounds.CollapsedKind.F1_TITSIAS, bounds.CollapsedKind.F4_TIGHT):
            raise CapabilityError("prediction is available for sgpr and t-sgpr")
        with torch.no_grad():
            state = self.svgp_state(params.unpack())
            out = predict(state, self.X, Xstar, mode, full_cap=full_cap)
        return out.mean, out.var


def _init_q(rng, kuu_chol: torch.Tensor, P: int):
    q = VariationalGaussian.prior(kuu_chol, num_latent=P)
    return q.mean.numpy(), _tril_pack(q.cov_factor).numpy()


class SvgpProblem(Problem):
    """``svgp`` (identity scaling) and ``t-svgp`` (shared-beta scaling)."""

    def __post_init__(self):
        self.supports_batch = True
        self.lik: Likelihood = self.options.get("likelihood") or Gaussian()
        self.stochastic = isinstance(self.lik, Categorical)
        self.scaling_mode = ScalingMode(self.options.get(
            "scaling", "identity" if self.objective_id == "svgp" else "beta_shared"))

    @property
    def gaussian(self) -> bool:
        return isinstance(self.lik, Gaussian)

    def init_named(self):
        rng = np.random.default_rng(self.seed)
        named = _hyper_init(self.X.shape[1], self.ard, gaussian=self.gaussian,
                            **self.options.get("hyper_init", {}))
        Z = self.options.get("Z")
        Z = np.asarray(Z, dtype=np.float64) if Z is not None else \
            _pick_inducing(self.X, self.options["num_inducing"], rng)
        named["Z"] = Z
        h = _hyper_from({k: as_tensor(v) for k, v in named.items()}, self.family)
        kuu_chol = build_bundle(h, Z, Z[:1]).kuu_chol
        named["q_mean"], named["q_tril"] = _init_q(rng, kuu_chol, num_latent(self.lik))
        s2 = float(np.exp(named.get("log_noise_variance", 0.0)))
        if self.scaling_mode is ScalingMode.BETA_SHARED:
            named["log_beta"] = np.array(math.log(s2))
        elif self.scaling_mode is ScalingMode.SCALAR_SHARED:
            named["log_m"] = np.array(0.0)
        elif self.scaling_mode is ScalingMode.PER_POINT:
            named["log_m"] = np.zeros(self.num_data)
        return named

    def scaling(self, p: Named) -> ConditionalScaling:
        if self.scaling_mode is ScalingMode.IDENTITY:
            return ConditionalScaling.identity()
        key = "log_beta" if self.scaling_mode is ScalingMode.BETA_SHARED else "log_m"
        return ConditionalScaling(self.scaling_mode, p[key])

    def state(self, p: Named) -> SvgpState:
        M = p["Z"].shape[0]
        qu = VariationalGaussian(p["q_mean"], _tril_unpack(p["q_tril"], M))
        if qu.num_latent == 1:
            qu = VariationalGaussian(qu.mean[0], qu.cov_factor[0])
        return SvgpState(_hyper_from(p, self.family), p["Z"], qu, self.scaling(p), self.lik)

    def value(self, p, batch=None, iteration=0):
        state = self.state(p)
        seed = self.seed * 100003 + iteration if self.stochastic else None
        if batch is None:
            return elbo(state, self.X, self.y, seed=seed).total
        return minibatch_elbo(state, self.X, self.y, batch, seed=seed)

    def predict(self, params, Xstar, mode=VarianceMode.SIMPLIFIED, full_cap=FULL_MODE_CAP):
        with torch.no_grad():
            out = predict(self.state(params.unpack()), self.X, Xstar, mode, full_cap=full_cap)
        return out.mean, out.var


class SolveProblem(Problem):
    """``solvegp`` and ``t-solvegp``; inducing points split evenly between u and v."""

    def __post_init__(self):
        self.supports_batch = True
        self.lik: Likelihood = self.options.get("likelihood") or Gaussian()
        self.stochastic = isinstance(self.lik, Categorical)
        self.tight = self.objective_id == "t-solvegp"

    def init_named(self):
        rng = np.random.default_rng(self.seed)
        gaussian = isinstance(self.lik, Gaussian)
        named = _hyper_init(self.X.shape[1], self.ard, gaussian=gaussian,
                            **self.options.get("hyper_init", {}))
        M = self.options["num_inducing"]
        Mu = self.options.get("num_u", (M + 1) // 2)
        Z = _pick_inducing(self.X, M, rng)
        named["Zu"], named["Zv"] = Z[:Mu], Z[Mu:]
        h = _hyper_from({k: as_tensor(v) for k, v in named.items()}, self.family)
        from .solvegp import build_orth
        oc = build_orth(h, named["Zu"], named["Zv"], named["Zu"][:1])
        P = num_latent(self.lik)
        named["qu_mean"], named["qu_tril"] = _init_q(rng, oc.kuu_chol, P)
        named["qv_mean"], named["qv_tril"] = _init_q(rng, oc.cvv_chol, P)
        if self.tight:
            named["log_beta"] = np.array(float(named.get("log_noise_variance", 0.0)))
        return named

    def state(self, p: Named) -> OrthState:
        def q(prefix, M):
            g = VariationalGaussian(p[f"{prefix}_mean"], _tril_unpack(p[f"{prefix}_tril"], M))
            return VariationalGaussian(g.mean[0], g.cov_factor[0]) if g.num_latent == 1 else g

        scaling = (ConditionalScaling(ScalingMode.BETA_SHARED, p["log_beta"]) if self.tight
                   else ConditionalScaling.identity())
        return OrthState(_hyper_from(p, self.family), p["Zu"], p["Zv"],
                         q("qu", p["Zu"].shape[0]), q("qv", p["Zv"].shape[0]), scaling, self.lik)

    def value(self, p, batch=None, iteration=0):
        state = self.state(p)
        seed = self.seed * 100003 + iteration if self.stochastic else None
        if batch is None:
            return solvegp_elbo(state, self.X, self.y, seed=seed).total
        return solvegp_minibatch_elbo(state, self.X, self.y, batch, seed=seed)

    def predict(self, params, Xstar, mode=VarianceMode.SIMPLIFIED, full_cap=FULL_MODE_CAP):
        if VarianceMode(mode) is VarianceMode.FULL:
            raise CapabilityError("SOLVE-GP predictions use the simplified variance only")
        with torch.no_grad():
            mean, var = predict_solvegp(self.state(params.unpack()), Xstar)
        if mean.shape[1] == 1:
            mean, var = mean[:, 0], var[:, 0]
        return mean, var


class GplvmProblem(Problem):
    """``gplvm`` (V-BGPLVM) and ``t-gplvm`` (TV-BGPLVM); ``y`` holds the N x P data."""

    def __post_init__(self):
        self.stochastic = True
        self.mode = GplvmScaling.IDENTITY if self.objective_id == "gplvm" else \
            GplvmScaling.POINTWISE_OPTIMAL

    def init_named(self):
        rng = np.random.default_rng(self.seed)
        Q = self.options.get("latent_dim", 2)
        Y = np.asarray(self.y, dtype=np.float64)
        mu = pca_init(Y, Q)
        named = _hyper_init(Q, self.ard, **self.options.get("hyper_init", {}))
        named["Z"] = _pick_inducing(mu, self.options["num_inducing"], rng)
        h = _hyper_from({k: as_tensor(v) for k, v in named.items()}, self.family)
        if self.options.get("whiten", True):
            eye = torch.eye(named["Z"].shape[0], dtype=torch.float64)
            named["q_mean"], named["q_tril"] = _init_q(rng, eye, Y.shape[1])
        else:
            kuu_chol = build_bundle(h, named["Z"], named["Z"][:1]).kuu_chol
            named["q_mean"], named["q_tril"] = _init_q(rng, kuu_chol, Y.shape[1])
        named["latent_mu"] = mu
        named["latent_log_s"] = np.full(mu.shape, math.log(self.options.get("init_std", 0.3)))
        return named

    def state(self, p: Named) -> GplvmState:
        M = p["Z"].shape[0]
        h = _hyper_from(p, self.family)
        mean, factor = p["q_mean"], _tril_unpack(p["q_tril"], M)
        if self.options.get("whiten", True):
            # q(u) = L_uu q(v) with q(v) parameterised directly; same bound, better conditioning
            L = build_bundle(h, p["Z"], p["Z"][:1]).kuu_chol
            mean, factor = mean @ L.T, L @ factor
        latent = LatentVariational(p["latent_mu"], p["latent_log_s"])
        return GplvmState(latent, h, p["Z"], VariationalGaussian(mean, factor), self.mode)

    def value(self, p, batch=None, iteration=0):
        if batch is not None:
            raise InputError("GPLVM objectives are full-batch")
        samples = self.options.get("mc_samples", 8)
        return gplvm_elbo(self.state(p), self.y, samples, self.seed, iteration).total

    def final_bound(self, params: ParamVector, mc_samples: int = 64, seed: int = 10_007) -> float:
        with torch.no_grad():
            return float(gplvm_elbo(self.state(params.unpack()), self.y, mc_samples, seed))


OBJECTIVES = {
    "exact": CollapsedProblem, "f1": CollapsedProblem, "f3": CollapsedProblem,
    "f4": CollapsedProblem, "f5": CollapsedProblem, "f8": CollapsedProblem,
    "f9": CollapsedProblem, "sgpr": CollapsedProblem, "t-sgpr": CollapsedProblem,
    "svgp": SvgpProblem, "t-svgp": SvgpProblem,
    "solvegp": SolveProblem, "t-solvegp": SolveProblem,
    "gplvm": GplvmProblem, "t-gplvm": GplvmProblem,
}

TRAINABLE = ("sgpr", "t-sgpr", "svgp", "t-svgp", "solvegp", "t-solvegp", "gplvm", "t-gplvm")


def make_problem(objective_id: str, X, y, *, num_inducing: Optional[int] = None,
                 family: str = "se", ard: bool = True, seed: int = 0,
                 likelihood: Optional[Likelihood] = None, **options) -> Problem:
    if objective_id not in OBJECTIVES:
        raise InputError(f"unknown objective {objective_id!r}; choose from {sorted(OBJECTIVES)}")
    X = np.asarray(as_matrix(X).numpy() if not isinstance(X, np.ndarray) else X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y)
    if likelihood is None or isinstance(likelihood, Gaussian):
        y = y.astype(np.float64)
        if y.ndim == 2 and y.shape[1] == 1 and objective_id not in ("gplvm", "t-gplvm"):
            y = y[:, 0]
    if num_inducing is not None:
        options["num_inducing"] = num_inducing
    if likelihood is not None:
        options["likelihood"] = likelihood
    cls = OBJECTIVES[objective_id]
    return cls(objective_id, X, y, KernelFamily(family), ard, seed, options)


def likelihood_from_name(name: str, num_classes: int = 0) -> Likelihood:
    if name == "gaussian":
        return Gaussian()
    if name == "bernoulli":
        return Bernoulli()
    if name == "categorical":
        return Categorical(num_classes)
    raise InputError(f"unknown likelihood {name!r}")


def likelihood_name(lik: Likelihood) -> Tuple[str, int]:
    if isinstance(lik, Categorical):
        return "categorical", lik.num_classes
    return ("bernoulli", 0) if isinstance(lik, Bernoulli) else ("gaussian", 0)
