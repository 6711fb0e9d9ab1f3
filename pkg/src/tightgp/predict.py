"""Posterior predictive marginals for SVGP models with a scaled conditional.

``FULL`` mode keeps the training-set correction
``-(k_*f - Q_*f) V_ff (k_f* - Q_f*)`` with ``V_ff = R^{-1} (I - M) R^{-1}``,
where ``R`` is the symmetric square root of ``D_ff``. ``SIMPLIFIED`` drops it.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import torch

from .bounds import dense_dff
from .kernels import CovBundle, InputError, as_matrix, build_bundle, kernel_eval
from .variational import SvgpState, marginals, realize_m

#: Largest training set for which FULL mode may build the dense N x N correction.
FULL_MODE_CAP = 4000


class CapabilityError(RuntimeError):
    """Requested computation exceeds a configured size cap."""


class VarianceMode(str, Enum):
    FULL = "full"
    SIMPLIFIED = "simplified"


@dataclass(frozen=True)
class PredictiveDist:
    mean: torch.Tensor
    var: torch.Tensor
    mode: VarianceMode


def _squeeze(t: torch.Tensor) -> torch.Tensor:
    return t[:, 0] if t.ndim == 2 and t.shape[1] == 1 else t


def predict(state: SvgpState, X_train, Xstar, mode=VarianceMode.SIMPLIFIED, *,
            bundle: Optional[CovBundle] = None, full_cap: int = FULL_MODE_CAP,
            rcond: float = 1e-12) -> PredictiveDist:
    """Latent (noise-free) predictive mean and variance at ``Xstar``."""
    mode = VarianceMode(mode)
    Xs = as_matrix(Xstar)
    star = build_bundle(state.hyper, state.Z, Xs)
    mean, var = marginals(state.qu, star, torch.ones_like(star.d))
    if mode is VarianceMode.FULL:
        X = as_matrix(X_train)
        if X.shape[0] > full_cap:
            raise CapabilityError(f"full predictive variance is capped at N <= {full_cap} "
                                  f"(got N = {X.shape[0]}); use the simplified mode")
        bundle = bundle if bundle is not None else build_bundle(state.hyper, state.Z, X)
        m = realize_m(state.scaling, bundle.d)
        var = var - _correction(state, X, Xs, bundle, star, m, rcond)[:, None]
    with torch.no_grad():
        if bool((var < -1e-8).any()):
            raise InputError("predictive variance negative beyond tolerance")
    return PredictiveDist(_squeeze(mean), _squeeze(torch.clamp(var, min=0.0)), mode)


def _correction(state, X, Xs, bundle, star, m, rcond):
    D = dense_dff(state.hyper, state.Z, X, bundle)
    lam, U = torch.linalg.eigh(D)
    keep = lam > rcond * torch.clamp(lam.max(), min=1e-300)
    inv_sqrt = torch.where(keep, 1.0 / torch.sqrt(torch.where(keep, lam, torch.ones_like(lam))),
                           torch.zeros_like(lam))
    resid = kernel_eval(state.hyper.kernel, X, Xs) - bundle.proj.T @ star.proj
    w = U @ (inv_sqrt[:, None] * (U.T @ resid))
    return ((1.0 - m)[:, None] * w ** 2).sum(0)


def training_point_var(state: SvgpState, bundle: CovBundle, n: int) -> torch.Tensor:
    """``m_n d_n + k_nu K_uu^{-1} S K_uu^{-1} k_un`` for training index ``n``."""
    if not 0 <= n < bundle.num_data:
        raise IndexError(f"training index {n} out of range for N={bundle.num_data}")
    m = realize_m(state.scaling, bundle.d)
    _, var = marginals(state.qu, bundle, m)
    return _squeeze(var)[n]
