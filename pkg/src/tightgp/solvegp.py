"""Orthogonally decoupled inducing sets (SOLVE-GP) with a scaled conditional.

``u`` carries the usual inducing posterior; ``v`` lives in the orthogonal
complement and is parameterised against ``C_vv = K_vv - K_vu K_uu^{-1} K_uv``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .bounds import BoundValue
from .kernels import (
    DEFAULT_LADDER,
    Hyperparams,
    InputError,
    NotPositiveDefinite,
    as_matrix,
    cholesky_jitter,
    kernel_diag,
    kernel_eval,
)
from .likelihoods import Likelihood, bind_noise
from .variational import (
    ConditionalScaling,
    VariationalGaussian,
    _batch_scaling,
    _ell,
    _targets,
    conditional_kl,
    kl_qu,
    realize_m,
)


@dataclass(frozen=True)
class OrthState:
    hyper: Hyperparams
    Zu: torch.Tensor
    Zv: torch.Tensor
    qu: VariationalGaussian
    qv: VariationalGaussian
    scaling: ConditionalScaling
    lik: Likelihood

    def __post_init__(self):
        if self.Zu.shape[0] < 1 or self.Zv.shape[0] < 1:
            raise InputError("both inducing sets need at least one point")
        if self.Zu.shape[0] != self.qu.dim or self.Zv.shape[0] != self.qv.dim:
            raise InputError("inducing inputs disagree with variational dimensions")

    @property
    def likelihood(self) -> Likelihood:
        return bind_noise(self.lik, self.hyper.log_noise_variance)


@dataclass(frozen=True)
class OrthCov:
    kuu_chol: torch.Tensor
    cvv_chol: torch.Tensor
    kfu: torch.Tensor
    kfv: torch.Tensor
    kvu: torch.Tensor
    kff_diag: torch.Tensor
    d: torch.Tensor
    proj_u: torch.Tensor  # L_uu^{-1} K_uf
    proj_v: torch.Tensor  # L_cc^{-1} C_vf

    @property
    def num_data(self) -> int:
        return self.kff_diag.shape[0]


def build_orth(h: Hyperparams, Zu, Zv, X, ladder: Sequence[float] = DEFAULT_LADDER,
               tol: float = 1e-8) -> OrthCov:
    X, Zu, Zv = as_matrix(X), as_matrix(Zu), as_matrix(Zv)
    k = h.kernel
    kff = kernel_diag(k, X)
    Lu, _ = cholesky_jitter(kernel_eval(k, Zu), ladder)
    Kfu = kernel_eval(k, X, Zu)
    Kfv = kernel_eval(k, X, Zv)
    Kuv = kernel_eval(k, Zu, Zv)
    proj_u = torch.linalg.solve_triangular(Lu, Kfu.T, upper=False)
    B = torch.linalg.solve_triangular(Lu, Kuv, upper=False)
    Cvv = kernel_eval(k, Zv) - B.T @ B
    Lc, _ = cholesky_jitter(0.5 * (Cvv + Cvv.T), ladder)
    cfv = Kfv - proj_u.T @ B
    proj_v = torch.linalg.solve_triangular(Lc, cfv.T, upper=False)
    d_raw = kff - (proj_u ** 2).sum(0) - (proj_v ** 2).sum(0)
    with torch.no_grad():
        if not bool((d_raw >= -tol * kff).all()):
            raise NotPositiveDefinite("conditional variances negative beyond tolerance", 0.0)
    return OrthCov(Lu, Lc, Kfu, Kfv, Kuv.T, kff, torch.clamp(d_raw, min=0.0), proj_u, proj_v)


def _orth_marginals(state: OrthState, oc: OrthCov, m: torch.Tensor):
    mu_u, Lsu = state.qu.stacked()
    mu_v, Lsv = state.qv.stacked()
    a_u = torch.linalg.solve_triangular(oc.kuu_chol.T, oc.proj_u, upper=True)
    a_v = torch.linalg.solve_triangular(oc.cvv_chol.T, oc.proj_v, upper=True)
    mean = (mu_u @ a_u + mu_v @ a_v).T
    var = ((Lsu.transpose(-1, -2) @ a_u) ** 2).sum(-2) + ((Lsv.transpose(-1, -2) @ a_v) ** 2).sum(-2)
    return mean, var.T + (m * oc.d)[:, None]


def orth_training_marginal(state: OrthState, oc: OrthCov, n: int):
    """Mean and variance of ``q(f(x_n))`` for training index ``n``."""
    if not 0 <= n < oc.num_data:
        raise IndexError(f"training index {n} out of range for N={oc.num_data}")
    m = realize_m(state.scaling, oc.d)
    mean, var = _orth_marginals(state, oc, m)
    return mean[n].squeeze(-1), var[n].squeeze(-1)


def solvegp_elbo(state: OrthState, X, y, *, oc: Optional[OrthCov] = None,
                 seed: Optional[int] = None) -> BoundValue:
    oc = oc if oc is not None else build_orth(state.hyper, state.Zu, state.Zv, X)
    m = realize_m(state.scaling, oc.d)
    mean, var = _orth_marginals(state, oc, m)
    ell = _ell(state.likelihood, mean, var, _targets(y), seed).sum()
    return BoundValue.from_terms(
        kl_u=-kl_qu(state.qu, oc.kuu_chol) - kl_qu(state.qv, oc.cvv_chol),
        kl_conditional=state.qu.num_latent * conditional_kl(m),
        ell=ell,
    )


def solvegp_minibatch_elbo(state: OrthState, X, y, batch: Sequence[int],
                           num_data: Optional[int] = None,
                           seed: Optional[int] = None) -> torch.Tensor:
    X = as_matrix(X)
    idx = np.asarray(batch, dtype=np.int64).reshape(-1)
    if idx.size == 0:
        raise InputError("empty mini-batch")
    scale = (X.shape[0] if num_data is None else num_data) / idx.size
    oc = build_orth(state.hyper, state.Zu, state.Zv, X[torch.as_tensor(idx)])
    m = realize_m(_batch_scaling(state.scaling, idx), oc.d)
    mean, var = _orth_marginals(state, oc, m)
    ell = _ell(state.likelihood, mean, var, _targets(y, idx), seed).sum()
    kl = kl_qu(state.qu, oc.kuu_chol) + kl_qu(state.qv, oc.cvv_chol)
    return -kl + scale * (state.qu.num_latent * conditional_kl(m) + ell)


def predict_solvegp(state: OrthState, Xstar):
    """Test-time marginals without the training-set dependent correction."""
    oc = build_orth(state.hyper, state.Zu, state.Zv, as_matrix(Xstar))
    mean, var = _orth_marginals(state, oc, torch.ones_like(oc.d))
    return mean, torch.clamp(var, min=0.0)
