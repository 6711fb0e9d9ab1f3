"""Uncollapsed SVGP objectives with a scaled conditional posterior.

The conditional ``q(f | u)`` keeps the prior conditional mean and shrinks its
covariance to ``D^{1/2} M D^{1/2}``. ``M = I`` is the standard SVGP family.
Multi-output models (one latent function per class) carry a leading latent
axis on the variational parameters and share the kernel, ``Z`` and ``M``.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np
import torch

from .bounds import BoundValue
from .kernels import CovBundle, Hyperparams, InputError, as_matrix, as_tensor, build_bundle
from .likelihoods import Likelihood, bind_noise, expected_loglik


@dataclass(frozen=True)
class VariationalGaussian:
    """``q(u) = N(mean, L L^T)``; batched as ``(P, M)`` / ``(P, M, M)`` for P outputs."""

    mean: torch.Tensor
    cov_factor: torch.Tensor

    @classmethod
    def prior(cls, kuu_chol: torch.Tensor, num_latent: Optional[int] = None) -> "VariationalGaussian":
        M = kuu_chol.shape[0]
        if num_latent is None:
            return cls(torch.zeros(M, dtype=torch.float64), kuu_chol.clone())
        return cls(torch.zeros(num_latent, M, dtype=torch.float64),
                   kuu_chol.expand(num_latent, M, M).clone())

    @property
    def batched(self) -> bool:
        return self.mean.ndim == 2

    @property
    def num_latent(self) -> int:
        return self.mean.shape[0] if self.batched else 1

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def cov(self) -> torch.Tensor:
        return self.cov_factor @ self.cov_factor.transpose(-1, -2)

    def stacked(self):
        """Mean and factor with an explicit latent axis."""
        if self.batched:
            return self.mean, self.cov_factor
        return self.mean[None], self.cov_factor[None]


class ScalingMode(str, Enum):
    IDENTITY = "identity"
    PER_POINT = "per_point"
    BETA_SHARED = "beta_shared"
    SCALAR_SHARED = "scalar_shared"


@dataclass(frozen=True)
class ConditionalScaling:
    """Parameterisation of the diagonal ``M``; ``log_value`` is on log scale."""

    mode: ScalingMode
    log_value: Optional[torch.Tensor] = None

    @classmethod
    def identity(cls) -> "ConditionalScaling":
        return cls(ScalingMode.IDENTITY)

    @classmethod
    def beta_shared(cls, beta) -> "ConditionalScaling":
        return cls(ScalingMode.BETA_SHARED, torch.log(as_tensor(beta)))

    @classmethod
    def per_point(cls, m) -> "ConditionalScaling":
        return cls(ScalingMode.PER_POINT, torch.log(as_tensor(m)))

    @classmethod
    def scalar_shared(cls, m) -> "ConditionalScaling":
        return cls(ScalingMode.SCALAR_SHARED, torch.log(as_tensor(m)))


def realize_m(scaling: ConditionalScaling, d) -> torch.Tensor:
    d = as_tensor(d)
    mode = ScalingMode(scaling.mode)
    if mode is ScalingMode.IDENTITY:
        return torch.ones_like(d)
    if mode is ScalingMode.PER_POINT:
        if scaling.log_value.shape != d.shape:
            raise InputError(f"per-point scaling has {scaling.log_value.numel()} entries "
                             f"for {d.numel()} points")
        return torch.exp(scaling.log_value)
    if mode is ScalingMode.BETA_SHARED:
        beta = torch.exp(scaling.log_value)
        return beta / (d + beta)
    return torch.exp(scaling.log_value) * torch.ones_like(d)


def conditional_kl(m) -> torch.Tensor:
    """``-E_q(u) KL[q(f|u) || p(f|u)] = 0.5 * sum(1 + log m - m)``; never positive."""
    m = as_tensor(m)
    with torch.no_grad():
        if bool((m <= 0).any()):
            raise InputError("conditional scaling must be positive")
    return 0.5 * (1.0 + torch.log(m) - m).sum()


def kl_qu(qu: VariationalGaussian, kuu_chol: torch.Tensor) -> torch.Tensor:
    """``KL[q(u) || N(0, K_uu)]`` summed over latent functions."""
    mean, factor = qu.stacked()
    M = kuu_chol.shape[0]
    if mean.shape[-1] != M:
        raise InputError(f"q(u) has dimension {mean.shape[-1]}, K_uu has {M}")
    Lk = kuu_chol.expand(mean.shape[0], M, M)
    trace = (torch.linalg.solve_triangular(Lk, factor, upper=False) ** 2).sum((-1, -2))
    maha = (torch.linalg.solve_triangular(Lk, mean[..., None], upper=False) ** 2).sum((-1, -2))
    logdet_k = 2.0 * torch.log(torch.diagonal(kuu_chol)).sum()
    logdet_s = torch.log(torch.abs(torch.diagonal(factor, dim1=-2, dim2=-1))).sum(-1) * 2.0
    return (0.5 * (trace + maha - M + logdet_k - logdet_s)).sum()


@dataclass(frozen=True)
class SvgpState:
    hyper: Hyperparams
    Z: torch.Tensor
    qu: VariationalGaussian
    scaling: ConditionalScaling
    lik: Likelihood

    def __post_init__(self):
        if self.Z.shape[0] < 1 or self.Z.shape[0] != self.qu.dim:
            raise InputError("Z rows must match the dimension of q(u), with M >= 1")

    @property
    def likelihood(self) -> Likelihood:
        return bind_noise(self.lik, self.hyper.log_noise_variance)


def marginals(qu: VariationalGaussian, bundle: CovBundle, m: torch.Tensor):
    """Mean and variance of ``q(f_n)`` at the bundle's inputs, shape ``(N, P)``.

    ``v_n = m_n d_n + a_n^T S a_n`` with ``a_n = K_uu^{-1} k_{u f_n}``.
    """
    mean, factor = qu.stacked()
    a = torch.linalg.solve_triangular(bundle.kuu_chol.T, bundle.proj, upper=True)
    mu = (mean @ a).T
    W = factor.transpose(-1, -2) @ a
    var = (W ** 2).sum(-2).T + (m * bundle.d)[:, None]
    return mu, var


def _targets(y, idx=None) -> np.ndarray:
    y = np.asarray(y.detach() if isinstance(y, torch.Tensor) else y)
    if y.ndim == 2 and y.shape[1] == 1:
        y = y[:, 0]
    return y if idx is None else y[idx]


def _ell(lik: Likelihood, mu, var, y, seed) -> torch.Tensor:
    if mu.shape[1] == 1:
        mu, var = mu[:, 0], var[:, 0]
    return expected_loglik(lik, mu, var, y, seed=seed)


def elbo(state: SvgpState, X, y, *, bundle: Optional[CovBundle] = None,
         seed: Optional[int] = None) -> BoundValue:
    """Uncollapsed bound; ``Identity`` scaling gives the standard SVGP objective."""
    X = as_matrix(X)
    bundle = bundle if bundle is not None else build_bundle(state.hyper, state.Z, X)
    lik = state.likelihood
    m = realize_m(state.scaling, bundle.d)
    mu, var = marginals(state.qu, bundle, m)
    ell = _ell(lik, mu, var, _targets(y), seed).sum()
    return BoundValue.from_terms(
        kl_u=-kl_qu(state.qu, bundle.kuu_chol),
        kl_conditional=state.qu.num_latent * conditional_kl(m),
        ell=ell,
    )


def minibatch_elbo(state: SvgpState, X, y, batch: Sequence[int], num_data: Optional[int] = None,
                   seed: Optional[int] = None) -> torch.Tensor:
    """Unbiased estimate of :func:`elbo` from the rows ``batch`` of ``(X, y)``."""
    X = as_matrix(X)
    idx = np.asarray(batch, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        raise InputError("empty mini-batch")
    if idx.min() < 0 or idx.max() >= X.shape[0]:
        raise InputError("mini-batch index out of range")
    N = X.shape[0] if num_data is None else num_data
    scale = N / idx.size
    bundle = build_bundle(state.hyper, state.Z, X[torch.as_tensor(idx)])
    lik = state.likelihood
    m = realize_m(_batch_scaling(state.scaling, idx), bundle.d)
    mu, var = marginals(state.qu, bundle, m)
    ell = _ell(lik, mu, var, _targets(y, idx), seed).sum()
    return (-kl_qu(state.qu, bundle.kuu_chol)
            + scale * state.qu.num_latent * conditional_kl(m) + scale * ell)


def _batch_scaling(scaling: ConditionalScaling, idx: np.ndarray) -> ConditionalScaling:
    if ScalingMode(scaling.mode) is ScalingMode.PER_POINT:
        return ConditionalScaling(ScalingMode.PER_POINT, scaling.log_value[torch.as_tensor(idx)])
    return scaling
