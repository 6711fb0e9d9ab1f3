"""Collapsed objectives for sparse GP regression with Gaussian noise.

Every kind except ``EXACT`` and ``F8`` works through the M x M Woodbury form
of ``Q_ff + s2 I`` and never builds an N x N matrix.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Optional

import torch

from .kernels import (
    CovBundle,
    Hyperparams,
    InputError,
    as_matrix,
    as_tensor,
    build_bundle,
    cholesky_jitter,
    kernel_eval,
)

LOG_2PI = math.log(2.0 * math.pi)

#: Largest N for which the dense O(N^3) F8 oracle may run.
F8_ORACLE_CAP = 2000

TERM_NAMES = (
    "const", "quad", "logdet", "trace_or_scaling", "kl_x", "kl_u", "kl_conditional", "ell",
)


@dataclass(frozen=True)
class BoundValue:
    """Scalar objective plus its named additive pieces."""

    total: torch.Tensor
    terms: Dict[str, torch.Tensor] = field(default_factory=dict)

    @classmethod
    def from_terms(cls, **terms: torch.Tensor) -> "BoundValue":
        unknown = set(terms) - set(TERM_NAMES)
        if unknown:
            raise InputError(f"unknown bound terms {sorted(unknown)}")
        total = sum(terms.values(), torch.zeros((), dtype=torch.float64))
        return cls(total, dict(terms))

    def __float__(self) -> float:
        return float(self.total)

    def as_dict(self) -> Dict[str, float]:
        out = {"total": float(self.total)}
        out.update({k: float(v) for k, v in self.terms.items()})
        return out


class CollapsedKind(str, Enum):
    EXACT = "exact"
    F1_TITSIAS = "f1"
    F3_GIVEN_M = "f3"
    F4_TIGHT = "f4"
    F5_LOGSUM = "f5"
    F8_GENERAL_C = "f8"
    F9_SHARED_M = "f9"


def _flat_y(y) -> torch.Tensor:
    y = as_tensor(y)
    if y.ndim == 2 and y.shape[1] == 1:
        y = y[:, 0]
    if y.ndim != 1:
        raise InputError(f"regression targets must be a vector, got shape {tuple(y.shape)}")
    return y


def exact_lml(h: Hyperparams, X, y) -> BoundValue:
    """Exact log marginal likelihood, O(N^3)."""
    X, y = as_matrix(X), _flat_y(y)
    N = X.shape[0]
    if N < 1 or y.shape[0] != N:
        raise InputError("need N >= 1 targets matching the rows of X")
    K = kernel_eval(h.kernel, X) + h.noise_variance * torch.eye(N, dtype=torch.float64)
    L, _ = cholesky_jitter(K, ladder=(0.0,))
    alpha = torch.linalg.solve_triangular(L, y[:, None], upper=False)[:, 0]
    return BoundValue.from_terms(
        const=torch.tensor(-0.5 * N * LOG_2PI, dtype=torch.float64),
        quad=-0.5 * (alpha ** 2).sum(),
        logdet=-torch.log(torch.diagonal(L)).sum(),
    )


@dataclass(frozen=True)
class _Woodbury:
    chol_b: torch.Tensor  # cholesky of I + A A^T, A = proj / sigma
    c: torch.Tensor  # chol_b^{-1} A y / sigma
    const: torch.Tensor
    quad: torch.Tensor
    logdet: torch.Tensor


def _woodbury(h: Hyperparams, bundle: CovBundle, y: torch.Tensor) -> _Woodbury:
    N, M = bundle.num_data, bundle.num_inducing
    s2 = h.noise_variance
    sigma = torch.sqrt(s2)
    A = bundle.proj / sigma
    B = torch.eye(M, dtype=torch.float64) + A @ A.T
    LB = torch.linalg.cholesky(B)
    c = torch.linalg.solve_triangular(LB, (A @ y)[:, None], upper=False)[:, 0] / sigma
    return _Woodbury(
        chol_b=LB,
        c=c,
        const=torch.tensor(-0.5 * N * LOG_2PI, dtype=torch.float64),
        quad=-0.5 * ((y ** 2).sum() / s2 - (c ** 2).sum()),
        logdet=-0.5 * N * torch.log(s2) - torch.log(torch.diagonal(LB)).sum(),
    )


def optimal_m(h: Hyperparams, bundle: CovBundle) -> torch.Tensor:
    """Per-point conditional scaling maximising the collapsed bound."""
    s2 = h.noise_variance
    return s2 / (bundle.d + s2)


def dense_dff(h: Hyperparams, Z, X, bundle: Optional[CovBundle] = None) -> torch.Tensor:
    """Dense ``K_ff - Q_ff`` using the same jittered ``K_uu`` as the bundle."""
    bundle = bundle if bundle is not None else build_bundle(h, Z, X)
    D = kernel_eval(h.kernel, X) - bundle.proj.T @ bundle.proj
    return 0.5 * (D + D.T)


def collapsed_bound(kind, h: Hyperparams, Z, X, y, m=None, *,
                    bundle: Optional[CovBundle] = None,
                    oracle_cap: int = F8_ORACLE_CAP) -> BoundValue:
    kind = CollapsedKind(kind)
    if kind is CollapsedKind.EXACT:
        return exact_lml(h, X, y)
    X, y = as_matrix(X), _flat_y(y)
    if y.shape[0] != X.shape[0]:
        raise InputError("targets and inputs disagree on N")
    if (m is not None) != (kind is CollapsedKind.F3_GIVEN_M):
        raise InputError("a scaling vector m is required for F3 and only for F3")
    if kind is CollapsedKind.F8_GENERAL_C and X.shape[0] > oracle_cap:
        raise InputError(f"F8 is an O(N^3) oracle limited to N <= {oracle_cap}")
    bundle = bundle if bundle is not None else build_bundle(h, Z, X)
    core = _woodbury(h, bundle, y)
    s2 = h.noise_variance
    d = bundle.d
    N = X.shape[0]

    if kind is CollapsedKind.F1_TITSIAS:
        extra = -0.5 * d.sum() / s2
    elif kind is CollapsedKind.F3_GIVEN_M:
        m = as_tensor(m).reshape(-1)
        if m.shape[0] != N:
            raise InputError(f"m has length {m.shape[0]}, expected {N}")
        with torch.no_grad():
            if bool((m <= 0).any()):
                raise InputError("every m_n must be positive")
        extra = -0.5 * (m * d / s2 - 1.0 - torch.log(m) + m).sum()
    elif kind is CollapsedKind.F4_TIGHT:
        extra = -0.5 * torch.log1p(d / s2).sum()
    elif kind in (CollapsedKind.F5_LOGSUM, CollapsedKind.F9_SHARED_M):
        # trace(K_ff - Q_ff) and sum(d) are the same number
        extra = -0.5 * N * torch.log1p(d.sum() / (N * s2))
    else:
        lam = torch.clamp(torch.linalg.eigvalsh(dense_dff(h, Z, X, bundle)), min=0.0)
        extra = -0.5 * torch.log1p(lam / s2).sum()
    return BoundValue.from_terms(const=core.const, quad=core.quad, logdet=core.logdet,
                                 trace_or_scaling=extra)


def shared_m(h: Hyperparams, bundle: CovBundle) -> torch.Tensor:
    """Optimal single scaling shared across all training points."""
    s2 = h.noise_variance
    return s2 / (bundle.d.mean() + s2)


def optimal_qu(h: Hyperparams, Z, X, y, bundle: Optional[CovBundle] = None):
    """Optimal Gaussian ``q(u)`` for Gaussian-noise regression.

    ``S = K_uu (K_uu + K_uf K_fu / s2)^{-1} K_uu`` and
    ``mean = S K_uu^{-1} K_uf y / s2``, both formed through the whitened
    system ``B = I + A A^T``.
    """
    from .variational import VariationalGaussian

    X, y = as_matrix(X), _flat_y(y)
    bundle = bundle if bundle is not None else build_bundle(h, Z, X)
    core = _woodbury(h, bundle, y)
    # S = R R^T with R = L_uu L_B^{-T}
    R = torch.linalg.solve_triangular(core.chol_b, bundle.kuu_chol.T, upper=False).T
    mean = R @ core.c
    _, U = torch.linalg.qr(R.T)
    factor = U.T
    signs = torch.sign(torch.diagonal(factor))
    signs = torch.where(signs == 0, torch.ones_like(signs), signs)
    return VariationalGaussian(mean, factor * signs)
