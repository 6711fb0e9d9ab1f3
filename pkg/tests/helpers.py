"""Shared instance generators and dense oracles for the test-suite."""
import math

import numpy as np
import torch

from tightgp.kernels import Hyperparams, kernel_eval


def random_instance(seed, N=None, M=None, D=None, family=None):
    """Random ``(h, Z, X, y)`` for a regression problem."""
    rng = np.random.default_rng(seed)
    N = N or int(rng.integers(3, 41))
    M = M or int(rng.integers(1, min(10, N) + 1))
    D = D or int(rng.integers(1, 4))
    family = family or ("se" if rng.random() < 0.5 else "matern32")
    h = Hyperparams.create(family, variance=float(rng.uniform(0.3, 3.0)),
                           lengthscales=rng.uniform(0.3, 2.0, D),
                           noise_variance=float(rng.uniform(0.01, 1.0)), input_dim=D)
    X = rng.uniform(-3.0, 3.0, (N, D))
    Z = rng.uniform(-3.0, 3.0, (M, D))
    y = np.sin(X.sum(1)) + 0.3 * rng.standard_normal(N)
    return h, torch.as_tensor(Z), torch.as_tensor(X), torch.as_tensor(y)


def gauss_kl(m0, S0, m1, S1):
    """KL[N(m0, S0) || N(m1, S1)] by explicit inverses."""
    m0, S0, m1, S1 = (np.asarray(a, dtype=np.float64) for a in (m0, S0, m1, S1))
    k = m0.shape[0]
    S1inv = np.linalg.inv(S1)
    diff = m1 - m0
    return 0.5 * (np.trace(S1inv @ S0) + diff @ S1inv @ diff - k
                  + np.linalg.slogdet(S1)[1] - np.linalg.slogdet(S0)[1])


def gaussian_ell(y, mean, var, s2):
    return -0.5 * math.log(2 * math.pi * s2) - 0.5 * ((y - mean) ** 2 + var) / s2


def dense_kernel(h, A, B=None):
    return kernel_eval(h.kernel, A, B).numpy()
