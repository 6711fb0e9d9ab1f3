"""Bayesian GPLVM with the standard and the scaled-conditional variational bounds.

The bound is estimated by reparameterised Monte Carlo over ``q(x)``. Output
dimensions share the kernel, noise, ``Z`` and the scaling ``m_n(x_n)``, and
each has its own ``q(u_p)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch

from .bounds import BoundValue
from .kernels import (
    Hyperparams,
    InputError,
    NotPositiveDefinite,
    as_matrix,
    as_tensor,
    build_bundle,
)
from .likelihoods import Gaussian, expected_loglik
from .variational import VariationalGaussian, conditional_kl, kl_qu, marginals

#: Redraws allowed per Monte Carlo sample before giving up.
RETRY_CAP = 5


class GplvmScaling(str, Enum):
    IDENTITY = "identity"
    POINTWISE_OPTIMAL = "pointwise_optimal"


@dataclass(frozen=True)
class LatentVariational:
    mu: torch.Tensor
    log_s: torch.Tensor

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(self.log_s)


@dataclass(frozen=True)
class GplvmState:
    latent: LatentVariational
    hyper: Hyperparams
    Z: torch.Tensor
    qu: VariationalGaussian
    scaling_mode: GplvmScaling

    def __post_init__(self):
        if self.latent.mu.shape != self.latent.log_s.shape:
            raise InputError("latent means and log standard deviations differ in shape")
        if self.Z.shape[1] != self.latent.mu.shape[1] or self.Z.shape[0] != self.qu.dim:
            raise InputError("inducing inputs disagree with the latent space or q(u)")


def kl_latent(latent: LatentVariational) -> torch.Tensor:
    """``KL[q(x) || N(0, I)]`` for a factorised Gaussian ``q(x)``."""
    mu, log_s = latent.mu, latent.log_s
    return 0.5 * (mu ** 2 + torch.exp(2.0 * log_s) - 1.0 - 2.0 * log_s).sum()


def pca_init(Y, Q: int) -> np.ndarray:
    """Latent means from the top-``Q`` principal components, scaled to unit variance."""
    Y = np.asarray(Y, dtype=np.float64)
    Yc = Y - Y.mean(0)
    U, s, _ = np.linalg.svd(Yc, full_matrices=False)
    scores = U[:, :Q] * s[:Q]
    return scores / scores.std(0)


def latent_noise(seed: int, iteration: int, sample: int, shape) -> torch.Tensor:
    """Standard normal draws keyed by ``(seed, iteration, sample)``."""
    rng = np.random.default_rng([int(seed), int(iteration), int(sample)])
    return torch.as_tensor(rng.standard_normal(shape))


def _pointwise_m(state: GplvmState, d: torch.Tensor) -> torch.Tensor:
    if GplvmScaling(state.scaling_mode) is GplvmScaling.IDENTITY:
        return torch.ones_like(d)
    s2 = state.hyper.noise_variance
    return s2 / (d + s2)


def sample_terms(state: GplvmState, Y, x: torch.Tensor):
    """Scaling and expected log-likelihood terms at one latent draw ``x``."""
    Y = as_matrix(Y)
    bundle = build_bundle(state.hyper, state.Z, x)
    m = _pointwise_m(state, bundle.d)
    mu, var = marginals(state.qu, bundle, m)
    lik = Gaussian(state.hyper.log_noise_variance)
    ell = expected_loglik(lik, mu, var, Y).sum()
    return Y.shape[1] * conditional_kl(m), ell


def gplvm_elbo(state: GplvmState, Y, mc_samples: int = 8, seed: int = 0,
               iteration: int = 0) -> BoundValue:
    if mc_samples < 1:
        raise InputError("need at least one Monte Carlo sample")
    Y = as_matrix(Y)
    mu, std = state.latent.mu, state.latent.std
    if Y.shape[0] != mu.shape[0]:
        raise InputError("data and latent means disagree on N")
    cond = torch.zeros((), dtype=torch.float64)
    ell = torch.zeros((), dtype=torch.float64)
    for s in range(mc_samples):
        for attempt in range(RETRY_CAP + 1):
            eps = latent_noise(seed, iteration, s + attempt * mc_samples, tuple(mu.shape))
            try:
                c, e = sample_terms(state, Y, mu + std * eps)
                break
            except NotPositiveDefinite:
                if attempt == RETRY_CAP:
                    raise
        cond = cond + c
        ell = ell + e
    kuu_chol = build_bundle(state.hyper, state.Z, state.Z[:1]).kuu_chol
    return BoundValue.from_terms(
        kl_x=-kl_latent(state.latent),
        kl_u=-kl_qu(state.qu, kuu_chol),
        kl_conditional=cond / mc_samples,
        ell=ell / mc_samples,
    )


def init_state(Y, Q: int, num_inducing: int, scaling_mode=GplvmScaling.POINTWISE_OPTIMAL,
               family: str = "se", noise_variance: float = 0.1, init_std: float = 0.3,
               seed: int = 0) -> GplvmState:
    Y = np.asarray(Y, dtype=np.float64)
    mu = pca_init(Y, Q)
    rng = np.random.default_rng(seed)
    Z = mu[rng.choice(mu.shape[0], size=num_inducing, replace=False)]
    hyper = Hyperparams.create(family, 1.0, 1.0, noise_variance, input_dim=Q)
    kuu_chol = build_bundle(hyper, Z, Z[:1]).kuu_chol
    qu = VariationalGaussian.prior(kuu_chol, num_latent=Y.shape[1])
    latent = LatentVariational(as_tensor(mu), torch.full(mu.shape, float(np.log(init_std)),
                                                         dtype=torch.float64))
    return GplvmState(latent, hyper, as_tensor(Z), qu, GplvmScaling(scaling_mode))
