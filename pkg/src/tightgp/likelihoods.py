"""Observation models and their expectations under Gaussian marginals."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Optional, Union

import numpy as np
import torch
import torch.nn.functional as F

from .kernels import DTYPE, InputError, as_tensor

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Gaussian:
    """Gaussian noise. ``log_noise_variance=None`` defers to the model hyperparameters."""

    log_noise_variance: Optional[torch.Tensor] = None

    @property
    def noise_variance(self) -> torch.Tensor:
        if self.log_noise_variance is None:
            raise InputError("Gaussian likelihood has no noise variance bound")
        return torch.exp(self.log_noise_variance)

    @classmethod
    def with_variance(cls, noise_variance: float) -> "Gaussian":
        return cls(as_tensor(math.log(noise_variance)))


@dataclass(frozen=True)
class Bernoulli:
    """Logit link; labels in {0, 1}."""

    order: int = 20


@dataclass(frozen=True)
class Categorical:
    """Softmax link over ``num_classes`` latent functions, integer labels."""

    num_classes: int
    num_samples: int = 32
    seed: int = 0


Likelihood = Union[Gaussian, Bernoulli, Categorical]


def num_latent(lik: Likelihood) -> int:
    return lik.num_classes if isinstance(lik, Categorical) else 1


def bind_noise(lik: Likelihood, log_noise_variance: torch.Tensor) -> Likelihood:
    if isinstance(lik, Gaussian) and lik.log_noise_variance is None:
        return Gaussian(log_noise_variance)
    return lik


@lru_cache(maxsize=16)
def _hermgauss(order: int):
    t, w = np.polynomial.hermite.hermgauss(order)
    return torch.as_tensor(t, dtype=DTYPE), torch.as_tensor(w / math.sqrt(math.pi), dtype=DTYPE)


def gauss_hermite(fn, mean: torch.Tensor, var: torch.Tensor, order: int = 20) -> torch.Tensor:
    """``E[fn(f)]`` for ``f ~ N(mean, var)``, elementwise over the inputs."""
    t, w = _hermgauss(order)
    mean, var = as_tensor(mean), as_tensor(var)
    f = mean[..., None] + torch.sqrt(2.0 * var)[..., None] * t
    return (fn(f) * w).sum(-1)


def _check_var(var: torch.Tensor) -> None:
    with torch.no_grad():
        if bool((var < 0).any()):
            raise InputError("variance must be non-negative")


def _mc_eps(shape, num_samples: int, seed: int) -> torch.Tensor:
    gen = torch.Generator().manual_seed(int(seed))
    return torch.randn((num_samples, *shape), generator=gen, dtype=DTYPE)


def expected_loglik(lik: Likelihood, mean, var, y, seed: Optional[int] = None) -> torch.Tensor:
    """Elementwise ``E_{N(f; mean, var)} log p(y | f)``.

    For :class:`Categorical` ``mean`` and ``var`` have a trailing class axis and
    the result drops it. ``seed`` overrides the likelihood's Monte Carlo seed.
    """
    mean, var = as_tensor(mean), as_tensor(var)
    _check_var(var)
    if isinstance(lik, Gaussian):
        y = as_tensor(y)
        s2 = lik.noise_variance
        return -0.5 * LOG_2PI - 0.5 * torch.log(s2) - 0.5 * ((y - mean) ** 2 + var) / s2
    if isinstance(lik, Bernoulli):
        sign = 2.0 * as_tensor(y) - 1.0
        return gauss_hermite(lambda f: -F.softplus(-sign[..., None] * f), mean, var, lik.order)
    if isinstance(lik, Categorical):
        labels = torch.as_tensor(np.asarray(y), dtype=torch.long)
        eps = _mc_eps(mean.shape, lik.num_samples, lik.seed if seed is None else seed)
        f = mean + torch.sqrt(var) * eps
        logp = torch.log_softmax(f, dim=-1)
        idx = labels.reshape(1, -1, 1).expand(lik.num_samples, -1, 1)
        return logp.gather(-1, idx).squeeze(-1).mean(0)
    raise InputError(f"unknown likelihood {lik!r}")


def predictive_logpdf(lik: Likelihood, mean, var, y, seed: int = 0) -> torch.Tensor:
    """Elementwise ``log E_{N(f; mean, var)} p(y | f)`` for test-set scoring."""
    mean, var = as_tensor(mean), as_tensor(var)
    _check_var(var)
    if isinstance(lik, Gaussian):
        y = as_tensor(y)
        tot = var + lik.noise_variance
        return -0.5 * LOG_2PI - 0.5 * torch.log(tot) - 0.5 * (y - mean) ** 2 / tot
    if isinstance(lik, Bernoulli):
        sign = 2.0 * as_tensor(y) - 1.0
        p = gauss_hermite(lambda f: torch.sigmoid(sign[..., None] * f), mean, var, lik.order)
        return torch.log(p)
    if isinstance(lik, Categorical):
        labels = torch.as_tensor(np.asarray(y), dtype=torch.long)
        n_samples = max(lik.num_samples, 256)
        eps = _mc_eps(mean.shape, n_samples, seed)
        logp = torch.log_softmax(mean + torch.sqrt(var) * eps, dim=-1)
        idx = labels.reshape(1, -1, 1).expand(n_samples, -1, 1)
        picked = logp.gather(-1, idx).squeeze(-1)
        return torch.logsumexp(picked, dim=0) - math.log(n_samples)
    raise InputError(f"unknown likelihood {lik!r}")


def quadrature_check(lik: Gaussian, mean, var, y, order: int = 20):
    """Analytic and Gauss-Hermite values of the Gaussian expected log-likelihood."""
    mean, var, y = as_tensor(mean), as_tensor(var), as_tensor(y)
    analytic = expected_loglik(lik, mean, var, y)
    s2 = lik.noise_variance
    quad = gauss_hermite(
        lambda f: -0.5 * LOG_2PI - 0.5 * torch.log(s2) - 0.5 * (y[..., None] - f) ** 2 / s2,
        mean, var, order)
    return analytic, quad
