"""Covariance functions, Gram matrices and jittered Cholesky factorization."""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np
import torch

DTYPE = torch.float64

#: Jitter ladder, in units of the mean diagonal of the matrix being factorized.
DEFAULT_LADDER = (0.0, 1e-8, 1e-6, 1e-4)

# Above this many pairwise entries the squared distance uses the expanded form.
_DIRECT_DIST_LIMIT = 4_000_000


class InputError(ValueError):
    """Raised for malformed or inconsistent inputs."""


class NotPositiveDefinite(np.linalg.LinAlgError):
    """Cholesky failed for every rung of the jitter ladder."""

    def __init__(self, message: str, jitter: float):
        super().__init__(message)
        self.jitter = jitter


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64))


def as_matrix(x) -> torch.Tensor:
    t = as_tensor(x)
    if t.ndim == 1:
        t = t[:, None]
    if t.ndim != 2:
        raise InputError(f"expected a 2-D input matrix, got shape {tuple(t.shape)}")
    return t


class KernelFamily(str, Enum):
    SE = "se"
    MATERN32 = "matern32"


@dataclass(frozen=True)
class Kernel:
    family: KernelFamily
    log_variance: torch.Tensor
    log_lengthscales: torch.Tensor

    @classmethod
    def create(cls, family="se", variance=1.0, lengthscales=1.0, input_dim: int = 1,
               ard: bool = True) -> "Kernel":
        ls = np.atleast_1d(np.asarray(lengthscales, dtype=np.float64))
        if ard and ls.size == 1:
            ls = np.full(input_dim, ls[0])
        elif not ard:
            ls = ls[:1]
        if np.any(ls <= 0) or variance <= 0:
            raise InputError("kernel variance and lengthscales must be positive")
        return cls(KernelFamily(family), as_tensor(math.log(variance)), as_tensor(np.log(ls)))

    @property
    def variance(self) -> torch.Tensor:
        return torch.exp(self.log_variance)

    @property
    def lengthscales(self) -> torch.Tensor:
        return torch.exp(self.log_lengthscales)

    @property
    def ard(self) -> bool:
        return self.log_lengthscales.numel() > 1


@dataclass(frozen=True)
class Hyperparams:
    kernel: Kernel
    log_noise_variance: torch.Tensor

    @classmethod
    def create(cls, family="se", variance=1.0, lengthscales=1.0, noise_variance=0.1,
               input_dim: int = 1, ard: bool = True) -> "Hyperparams":
        if noise_variance <= 0:
            raise InputError("noise variance must be positive")
        kern = Kernel.create(family, variance, lengthscales, input_dim, ard)
        return cls(kern, as_tensor(math.log(noise_variance)))

    @property
    def noise_variance(self) -> torch.Tensor:
        return torch.exp(self.log_noise_variance)


def _scaled(k: Kernel, X: torch.Tensor) -> torch.Tensor:
    n_ls = k.log_lengthscales.numel()
    if n_ls != 1 and X.shape[1] != n_ls:
        raise InputError(f"input has {X.shape[1]} columns but kernel has {n_ls} lengthscales")
    return X / k.lengthscales


def _sqdist(A: torch.Tensor, B: torch.Tensor) -> torch.Tensor:
    if A.shape[0] * B.shape[0] * max(A.shape[1], 1) <= _DIRECT_DIST_LIMIT:
        return ((A[:, None, :] - B[None, :, :]) ** 2).sum(-1)
    a2 = (A ** 2).sum(-1)
    b2 = (B ** 2).sum(-1)
    return torch.clamp(a2[:, None] + b2[None, :] - 2.0 * A @ B.T, min=0.0)


def kernel_eval(k: Kernel, X, X2=None) -> torch.Tensor:
    """Gram matrix ``k(X, X2)``; ``X2=None`` means ``X2 = X``."""
    X = as_matrix(X)
    X2 = X if X2 is None else as_matrix(X2)
    if X.shape[1] != X2.shape[1]:
        raise InputError(f"column mismatch: {X.shape[1]} vs {X2.shape[1]}")
    r2 = _sqdist(_scaled(k, X), _scaled(k, X2))
    if k.family is KernelFamily.SE:
        return k.variance * torch.exp(-0.5 * r2)
    # clamp keeps the gradient finite at r = 0, where the true derivative vanishes
    r = math.sqrt(3.0) * torch.sqrt(torch.clamp(r2, min=1e-30))
    return k.variance * (1.0 + r) * torch.exp(-r)


def kernel_diag(k: Kernel, X) -> torch.Tensor:
    X = as_matrix(X)
    _scaled(k, X)
    return k.variance * torch.ones(X.shape[0], dtype=DTYPE)


def cholesky_jitter(A, ladder: Sequence[float] = DEFAULT_LADDER, relative: bool = True):
    """Lower Cholesky factor of ``A + j I`` for the first ladder rung that works.

    Returns ``(L, j)`` where ``j`` is the absolute jitter added. With
    ``relative=True`` the rungs are multiples of the mean diagonal of ``A``.
    """
    L, jitter, _ = _ladder_cholesky(as_tensor(A), ladder, relative)
    return L, jitter


def _ladder_cholesky(A: torch.Tensor, ladder: Sequence[float], relative: bool = True):
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise InputError(f"expected a square matrix, got shape {tuple(A.shape)}")
    n = A.shape[0]
    if n == 0:
        return A.clone(), 0.0, 0
    with torch.no_grad():
        scale = float(torch.max(torch.abs(A)))
        asym = float(torch.max(torch.abs(A - A.T)))
        if scale > 0 and asym / scale > 1e-10:
            raise InputError(f"matrix is not symmetric (relative asymmetry {asym / scale:.3g})")
        unit = float(torch.mean(torch.diagonal(A))) if relative else 1.0
    if not math.isfinite(unit):
        raise NotPositiveDefinite("matrix has non-finite entries", float("nan"))
    unit = abs(unit) if unit != 0 else 1.0
    eye = torch.eye(n, dtype=DTYPE)
    jitter = float("nan")
    for i, rung in enumerate(ladder):
        jitter = float(rung) * unit
        L, info = torch.linalg.cholesky_ex(A + jitter * eye if jitter else A)
        if int(info) == 0 and bool(torch.isfinite(L).all()):
            return L, jitter, i
    raise NotPositiveDefinite(f"Cholesky failed up to jitter {jitter:.3g}", jitter)


@dataclass(frozen=True)
class CovBundle:
    """Cached covariances for one (hyperparameters, Z, X) triple.

    ``proj`` holds ``L_uu^{-1} K_uf`` so that ``Q_ff = proj.T @ proj``.
    """

    kuu_chol: torch.Tensor
    jitter: float
    kfu: torch.Tensor
    kff_diag: torch.Tensor
    d: torch.Tensor
    proj: torch.Tensor

    @property
    def num_data(self) -> int:
        return self.kff_diag.shape[0]

    @property
    def num_inducing(self) -> int:
        return self.kuu_chol.shape[0]


def build_bundle(h: Hyperparams, Z, X, ladder: Sequence[float] = DEFAULT_LADDER,
                 tol: float = 1e-8) -> CovBundle:
    """Factorize ``K_uu`` and compute the conditional-prior diagonal ``d``.

    If cancellation pushes some ``d_n`` below ``-tol * k(x_n, x_n)`` the next
    jitter rung is tried before giving up.
    """
    X = as_matrix(X)
    Z = as_tensor(Z)
    Z = as_matrix(Z) if Z.numel() else torch.zeros((0, X.shape[1]), dtype=DTYPE)
    if Z.shape[1] != X.shape[1]:
        raise InputError(f"Z has {Z.shape[1]} columns but X has {X.shape[1]}")
    k = h.kernel
    kff = kernel_diag(k, X)
    M = Z.shape[0]
    if M == 0:
        empty = torch.zeros((0, 0), dtype=DTYPE)
        return CovBundle(empty, 0.0, torch.zeros((X.shape[0], 0), dtype=DTYPE), kff, kff,
                         torch.zeros((0, X.shape[0]), dtype=DTYPE))
    Kuu = kernel_eval(k, Z)
    Kfu = kernel_eval(k, X, Z)
    start, jitter = 0, float("nan")
    while start < len(ladder):
        L, jitter, rung = _ladder_cholesky(Kuu, ladder[start:])
        proj = torch.linalg.solve_triangular(L, Kfu.T, upper=False)
        d_raw = kff - (proj ** 2).sum(0)
        with torch.no_grad():
            ok = bool((d_raw >= -tol * kff).all())
        if ok:
            return CovBundle(L, jitter, Kfu, kff, torch.clamp(d_raw, min=0.0), proj)
        start += rung + 1
    raise NotPositiveDefinite("conditional variances negative beyond tolerance "
                              f"at jitter {jitter:.3g}", jitter)
