import itertools

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st
from numpy.testing import assert_allclose

from tightgp.bounds import exact_lml
from tightgp.kernels import Hyperparams, InputError, kernel_eval
from tightgp.likelihoods import Gaussian
from tightgp.solvegp import (
    OrthState,
    build_orth,
    orth_training_marginal,
    predict_solvegp,
    solvegp_elbo,
    solvegp_minibatch_elbo,
)
from tightgp.variational import ConditionalScaling, SvgpState, VariationalGaussian, elbo, realize_m
from helpers import gauss_kl, gaussian_ell, random_instance


def random_q(rng, M):
    L = np.tril(rng.normal(scale=0.4, size=(M, M)), -1) + np.diag(rng.uniform(0.2, 1.0, M))
    return VariationalGaussian(torch.as_tensor(rng.normal(size=M)), torch.as_tensor(L))


def orth_instance(seed, N=None, Mu=None, Mv=None, scaling="identity"):
    rng = np.random.default_rng(seed)
    N = N or int(rng.integers(2, 13))
    Mu = Mu or int(rng.integers(1, 4))
    Mv = Mv or int(rng.integers(1, 4))
    h, _, X, y = random_instance(seed, N=N, M=1)
    D = X.shape[1]
    Zu = torch.as_tensor(rng.uniform(-3, 3, (Mu, D)))
    Zv = torch.as_tensor(rng.uniform(-3, 3, (Mv, D)))
    sc = (ConditionalScaling.beta_shared(h.noise_variance) if scaling == "beta"
          else ConditionalScaling.identity())
    return OrthState(h, Zu, Zv, random_q(rng, Mu), random_q(rng, Mv), sc, Gaussian()), X, y


def _conditional_kl(Dff, m):
    """Symmetric root of D_ff and KL[N(0, D^1/2 M D^1/2) || N(0, D)] at 50 digits."""
    with mpmath.workdps(50):
        D = mpmath.matrix(Dff.tolist())
        lam, U = mpmath.eigsy(D)
        lam = [max(v, mpmath.mpf("1e-30")) for v in lam]  # rounding can leave D_ff indefinite
        D = U * mpmath.diag(lam) * U.T
        R = U * mpmath.diag([mpmath.sqrt(v) for v in lam]) * U.T
        C = R * mpmath.diag([mpmath.mpf(float(v)) for v in m]) * R
        n = len(m)
        tr = sum((mpmath.inverse(D) * C)[i, i] for i in range(n))
        kl = (tr - n + mpmath.log(mpmath.det(D)) - mpmath.log(mpmath.det(C))) / 2
        return np.array(R.tolist(), dtype=float), float(kl)


def dense_solvegp_elbo(state, X, y):
    """Brute-force joint-Gaussian evaluation of the two-set bound."""
    h = state.hyper
    Zu, Zv, X = state.Zu.numpy(), state.Zv.numpy(), X.numpy()
    Mu, Mv, N = len(Zu), len(Zv), len(X)
    W = np.vstack([Zu, Zv])
    Kww = kernel_eval(h.kernel, W).numpy()
    Kfw = kernel_eval(h.kernel, X, W).numpy()
    Kff = kernel_eval(h.kernel, X).numpy()
    Kuu, Kvu = Kww[:Mu, :Mu], Kww[Mu:, :Mu]
    P = Kvu @ np.linalg.inv(Kuu)  # v = v_perp + P u
    T = np.block([[np.eye(Mu), np.zeros((Mu, Mv))], [P, np.eye(Mv)]])
    mean_w = T @ np.concatenate([state.qu.mean.numpy(), state.qv.mean.numpy()])
    S_blk = np.zeros((Mu + Mv, Mu + Mv))
    S_blk[:Mu, :Mu] = state.qu.cov.numpy()
    S_blk[Mu:, Mu:] = state.qv.cov.numpy()
    S_w = T @ S_blk @ T.T
    kl_w = gauss_kl(mean_w, S_w, np.zeros(Mu + Mv), Kww)
    A = Kfw @ np.linalg.inv(Kww)
    Dff = Kff - A @ Kfw.T
    Dff = 0.5 * (Dff + Dff.T)
    d = np.clip(np.diag(Dff), 0, None)
    m = realize_m(state.scaling, torch.as_tensor(d)).numpy()
    root, kl_cond = _conditional_kl(Dff, m)
    C = root @ np.diag(m) @ root
    mu_f = A @ mean_w
    var_f = np.diag(A @ S_w @ A.T) + np.diag(C)
    s2 = float(h.noise_variance)
    ell = sum(gaussian_ell(y[n], mu_f[n], var_f[n], s2) for n in range(N))
    return -kl_w - kl_cond + ell


class TestSolvegpElbo:
    @pytest.mark.parametrize("scaling", ["identity", "beta"])
    @pytest.mark.parametrize("seed", range(10))
    def test_dense_oracle(self, seed, scaling):
        state, X, y = orth_instance(seed, N=int(2 + seed % 4), Mu=1, Mv=1, scaling=scaling)
        assert float(solvegp_elbo(state, X, y)) == pytest.approx(dense_solvegp_elbo(state, X, y.numpy()),
                                                                 abs=1e-7)

    @pytest.mark.parametrize("seed", range(5))
    def test_dense_oracle_larger_sets(self, seed):
        state, X, y = orth_instance(100 + seed, N=8, Mu=2, Mv=3, scaling="beta")
        assert float(solvegp_elbo(state, X, y)) == pytest.approx(dense_solvegp_elbo(state, X, y.numpy()),
                                                                 abs=1e-7)

    def test_priors_have_zero_kl(self):
        state, X, y = orth_instance(1)
        oc = build_orth(state.hyper, state.Zu, state.Zv, X)
        prior = OrthState(state.hyper, state.Zu, state.Zv, VariationalGaussian.prior(oc.kuu_chol),
                          VariationalGaussian.prior(oc.cvv_chol), state.scaling, state.lik)
        bv = solvegp_elbo(prior, X, y)
        assert abs(float(bv.terms["kl_u"])) < 1e-12
        assert float(bv.terms["kl_conditional"]) == 0.0

    def test_far_v_reduces_to_svgp(self):
        state, X, y = orth_instance(2, N=6, Mu=2, Mv=2)
        Zv = state.Zv + 1e3
        oc = build_orth(state.hyper, state.Zu, Zv, X)
        far = OrthState(state.hyper, state.Zu, Zv, state.qu, VariationalGaussian.prior(oc.cvv_chol),
                        state.scaling, state.lik)
        svgp = SvgpState(state.hyper, state.Zu, state.qu, state.scaling, state.lik)
        assert float(solvegp_elbo(far, X, y)) == pytest.approx(float(elbo(svgp, X, y)), abs=1e-6)

    @given(st.integers(0, 100_000))
    def test_tight_dominates_identity(self, seed):
        state, X, y = orth_instance(seed)
        tight = OrthState(state.hyper, state.Zu, state.Zv, state.qu, state.qv,
                          ConditionalScaling.beta_shared(state.hyper.noise_variance), state.lik)
        assert float(solvegp_elbo(tight, X, y)) >= float(solvegp_elbo(state, X, y)) - 1e-9

    @given(st.integers(0, 100_000), st.booleans())
    def test_lower_bounds_exact(self, seed, beta):
        state, X, y = orth_instance(seed, scaling="beta" if beta else "identity")
        assert float(solvegp_elbo(state, X, y)) <= float(exact_lml(state.hyper, X, y)) + 1e-8

    def test_exhaustive_minibatch_average(self):
        state, X, y = orth_instance(3, N=5, scaling="beta")
        vals = [float(solvegp_minibatch_elbo(state, X, y, b))
                for b in itertools.combinations(range(5), 2)]
        assert np.mean(vals) == pytest.approx(float(solvegp_elbo(state, X, y)), abs=1e-10)

    def test_state_validates_dimensions(self):
        state, _, _ = orth_instance(4, Mu=2, Mv=2)
        with pytest.raises(InputError):
            OrthState(state.hyper, state.Zu[:1], state.Zv, state.qu, state.qv, state.scaling, state.lik)


class TestTrainingMarginal:
    def test_zero_means_give_zero_mean(self):
        state, X, _ = orth_instance(5)
        zero = OrthState(state.hyper, state.Zu, state.Zv,
                         VariationalGaussian(torch.zeros_like(state.qu.mean), state.qu.cov_factor),
                         VariationalGaussian(torch.zeros_like(state.qv.mean), state.qv.cov_factor),
                         state.scaling, state.lik)
        oc = build_orth(state.hyper, state.Zu, state.Zv, X)
        mean, _ = orth_training_marginal(zero, oc, 0)
        assert float(mean) == 0.0

    def test_priors_recover_prior_variance(self):
        state, X, _ = orth_instance(6, N=5)
        oc = build_orth(state.hyper, state.Zu, state.Zv, X)
        prior = OrthState(state.hyper, state.Zu, state.Zv, VariationalGaussian.prior(oc.kuu_chol),
                          VariationalGaussian.prior(oc.cvv_chol), state.scaling, state.lik)
        for n in range(5):
            _, var = orth_training_marginal(prior, oc, n)
            assert float(var) == pytest.approx(float(state.hyper.kernel.variance), abs=1e-10)

    def test_v_at_data_point_kills_d(self):
        state, X, _ = orth_instance(7, N=4, Mu=1, Mv=1)
        oc = build_orth(state.hyper, state.Zu, X[:1], X)
        assert float(oc.d[0]) <= 1e-6

    def test_index_checked(self):
        state, X, _ = orth_instance(8, N=3)
        oc = build_orth(state.hyper, state.Zu, state.Zv, X)
        with pytest.raises(IndexError):
            orth_training_marginal(state, oc, 3)

    def test_prediction_drops_correction(self):
        state, X, _ = orth_instance(9, N=4)
        mean, var = predict_solvegp(state, X)
        oc = build_orth(state.hyper, state.Zu, state.Zv, X)
        for n in range(4):
            m_n, v_n = orth_training_marginal(state, oc, n)
            assert float(mean[n, 0]) == pytest.approx(float(m_n), abs=1e-12)
            assert float(var[n, 0]) == pytest.approx(float(v_n), abs=1e-10)  # identity scaling
