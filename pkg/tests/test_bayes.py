"""Tests for residual construction and the inverse-Wishart covariance tracker.

Synthetic-stream oracles: the response model is linear in r and Fz for fixed
u, so injected noise produces exactly e = eps_next - M eps - dt J_F eps_F,
which pins the residual decomposition and the covariance lower bound.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from riskcbf.bayes import (
    IWState,
    Residual,
    iw_init,
    iw_mean,
    iw_update,
    optimal_lambda,
    prediction_residual,
    residual_covariance_lower_bound,
)
from riskcbf.errors import DOFDomain, ForgettingDomain
from riskcbf.nominal import NominalModel
from riskcbf.params import VehicleParams

P = VehicleParams()
NOMINAL_FZ = np.full(6, P.Fz_nom)


class ZeroModel:
    """f = 0 stub for the degenerate-dynamics cases."""

    def f(self, r, u, Fz):
        return np.zeros(3)

    def jac_r(self, r, u, Fz):
        return np.zeros((3, 3))


# -- residuals -------------------------------------------------------------------


def test_residual_zero_for_exact_euler_step():
    model = NominalModel(P, 15.0)
    dt = 0.01
    r0 = np.array([0.03, 0.05, 0.8])
    u = np.concatenate([[0.02], np.full(6, 500.0)])
    r1 = r0 + dt * model.f(r0, u, NOMINAL_FZ)
    res = prediction_residual(r0, r1, u, NOMINAL_FZ, model, dt)
    assert_allclose(res.e, 0.0, atol=1e-15)


def test_residual_static_case():
    res = prediction_residual([0.1, 0.2, 0.3], [0.1, 0.2, 0.3], np.zeros(7),
                              NOMINAL_FZ, ZeroModel(), 0.05)
    assert_allclose(res.e, 0.0)
    assert_allclose(res.M, np.eye(3))


def test_residual_noise_decomposition_exact():
    # Linear-in-r dynamics: injecting known measurement noise gives
    # e = eps_1 - M eps_0 exactly.
    model = NominalModel(P, 15.0)
    dt = 0.001   # small enough that the M transform stays active
    rng = np.random.default_rng(4)
    r0 = np.array([0.02, 0.04, 0.5])
    u = np.concatenate([[0.03], np.full(6, 1000.0)])
    r1 = r0 + dt * model.f(r0, u, NOMINAL_FZ)
    eps0 = rng.normal(0, 0.01, 3)
    eps1 = rng.normal(0, 0.01, 3)
    res = prediction_residual(r0 + eps0, r1 + eps1, u, NOMINAL_FZ, model, dt)
    M_true = np.eye(3) + dt * model.jac_r(r0 + eps0, u, NOMINAL_FZ)
    assert_allclose(res.M, M_true, rtol=1e-12)
    assert_allclose(res.e, eps1 - M_true @ eps0, atol=1e-12)


def test_residual_M_fallback_at_control_rate():
    # dt J_r exceeds the conditioning threshold at dt = 50 ms and highway
    # stiffness (the a_y row is stiff); the update then runs with M = I.
    model = NominalModel(P, 15.0)
    res = prediction_residual(np.zeros(3), np.zeros(3), np.zeros(7),
                              NOMINAL_FZ, model, 0.05)
    assert_allclose(res.M, np.eye(3))
    res_small = prediction_residual(np.zeros(3), np.zeros(3), np.zeros(7),
                                    NOMINAL_FZ, model, 0.001)
    assert not np.allclose(res_small.M, np.eye(3))


def test_residual_rejects_bad_dt():
    with pytest.raises(ValueError):
        prediction_residual(np.zeros(3), np.zeros(3), np.zeros(7),
                            NOMINAL_FZ, ZeroModel(), 0.0)


# -- prior / mean ------------------------------------------------------------------


def test_iw_init_table_prior():
    d = np.array([1e-4, 2e-6, 4e-3])
    st_ = iw_init(d, nu0=50)
    assert_allclose(st_.Psi, 46.0 * np.diag(d))
    assert_allclose(iw_mean(st_), np.diag(d))


def test_iw_init_default_dof_rule():
    st_ = iw_init([1.0, 1.0, 1.0])
    assert st_.nu == 11.0   # 2 n_r + 5


def test_iw_init_rejects_low_dof():
    with pytest.raises(DOFDomain):
        iw_init([1.0, 1.0, 1.0], nu0=4.0)


@given(
    d0=st.floats(min_value=1e-6, max_value=1.0),
    d1=st.floats(min_value=1e-6, max_value=1.0),
    d2=st.floats(min_value=1e-6, max_value=1.0),
    nu0=st.floats(min_value=4.5, max_value=200.0),
)
@settings(max_examples=50, deadline=None)
def test_iw_init_mean_preservation(d0, d1, d2, nu0):
    d = np.array([d0, d1, d2])
    assert_allclose(iw_mean(iw_init(d, nu0)), np.diag(d), rtol=1e-12)


def test_iw_mean_scaling():
    s = IWState(Psi=np.eye(3) * 2.0, nu=10.0)
    assert_allclose(iw_mean(IWState(Psi=s.Psi * 3.0, nu=10.0)), 3.0 * iw_mean(s))


def test_iw_state_invariants():
    with pytest.raises(ValueError):
        IWState(Psi=-np.eye(3), nu=10.0)
    with pytest.raises(DOFDomain):
        IWState(Psi=np.eye(3), nu=4.0)
    with pytest.raises(ForgettingDomain):
        IWState(Psi=np.eye(3), nu=10.0, lam=0.0)
    with pytest.raises(ForgettingDomain):
        IWState(Psi=np.eye(3), nu=10.0, lam=1.2)


# -- update ------------------------------------------------------------------------


def test_update_zero_residual_unit_lambda():
    s0 = IWState(Psi=np.eye(3), nu=10.0, lam=1.0)
    s1 = iw_update(s0, Residual(e=np.zeros(3), M=np.eye(3)))
    assert_allclose(s1.Psi, s0.Psi)
    assert s1.nu == 11.0


def test_update_stationary_consistency():
    # lambda = 1, M = I, e ~ N(0, Sigma*): posterior mean converges.
    rng = np.random.default_rng(17)
    L = np.array([[0.01, 0.0, 0.0], [0.002, 0.005, 0.0], [0.0, 0.001, 0.02]])
    Sigma_true = L @ L.T
    s = iw_init(np.diag(Sigma_true), nu0=11)
    s = IWState(Psi=s.Psi, nu=s.nu, lam=1.0)
    eye = np.eye(3)
    for _ in range(10_000):
        e = L @ rng.normal(0, 1, 3)
        s = iw_update(s, Residual(e=e, M=eye))
    err = np.linalg.norm(iw_mean(s) - Sigma_true) / np.linalg.norm(Sigma_true)
    assert err < 0.1


def test_update_transformed_vs_raw():
    M = np.array([[1.0, 0.1, 0.0], [0.0, 0.9, 0.05], [0.0, 0.0, 1.1]])
    e = np.array([0.01, -0.02, 0.005])
    s0 = IWState(Psi=np.eye(3) * 1e-4, nu=20.0, lam=1.0)
    st_t = iw_update(s0, Residual(e=e, M=M))
    st_r = iw_update(s0, Residual(e=e, M=M), raw=True)
    v = np.linalg.solve(M, e)
    assert_allclose(st_t.Psi, s0.Psi + np.outer(v, v), rtol=1e-12)
    assert_allclose(st_r.Psi, s0.Psi + np.outer(e, e), rtol=1e-12)


def test_nu_fixed_point():
    s = IWState(Psi=np.eye(3), nu=50.0, lam=0.99)
    for _ in range(10_000):
        s = IWState(Psi=s.Psi, nu=s.lam * s.nu + 1.0, lam=s.lam)
    assert abs(s.nu - 100.0) < 1e-3


def test_consistency_error_shrinks_across_seeds():
    # lambda = 1, M = I: Psi_t = Psi_0 + sum e e', so the error at horizon t
    # comes from cumulative outer products (vectorized equivalent of t updates).
    # The prior is deliberately 20x off so the 1e3-step error is dominated by
    # the decaying prior bias rather than sampling luck.
    sigma_true = np.diag([2e-4, 1e-6, 5e-3])
    wins = 0
    n_seeds = 50
    for seed in range(n_seeds):
        rng = np.random.default_rng(1000 + seed)
        e = rng.normal(0, 1, (10_000, 3)) * np.sqrt(np.diag(sigma_true))
        s0 = iw_init(20.0 * np.diag(sigma_true), nu0=11)
        outer_sum = np.einsum("ti,tj->ij", e[:1000], e[:1000])
        m_1e3 = (s0.Psi + outer_sum) / (s0.nu + 1000 - 4)
        outer_sum_full = np.einsum("ti,tj->ij", e, e)
        m_1e4 = (s0.Psi + outer_sum_full) / (s0.nu + 10_000 - 4)
        err3 = np.linalg.norm(m_1e3 - sigma_true)
        err4 = np.linalg.norm(m_1e4 - sigma_true)
        if err4 < err3:
            wins += 1
        assert err4 / np.linalg.norm(sigma_true) < 0.10
    assert wins >= 45


def test_vectorized_shortcut_matches_loop():
    # The einsum path used above is exactly t sequential updates at lambda = 1.
    rng = np.random.default_rng(2)
    e = rng.normal(0, 0.01, (100, 3))
    s = iw_init(np.full(3, 1e-4), nu0=11)
    s = IWState(Psi=s.Psi, nu=s.nu, lam=1.0)
    eye = np.eye(3)
    for i in range(100):
        s = iw_update(s, Residual(e=e[i], M=eye))
    shortcut = (iw_init(np.full(3, 1e-4), nu0=11).Psi + np.einsum("ti,tj->ij", e, e))
    assert_allclose(s.Psi, shortcut, rtol=1e-10)
    assert s.nu == pytest.approx(111.0)


def test_bias_halves_when_horizon_doubles():
    # Prior mean deliberately 10x truth; bias decays as 1/(nu0 + t - 4).
    sigma_true = np.diag([1e-4, 1e-4, 1e-4])
    t1, t2 = 2000, 4000
    biases = {t1: [], t2: []}
    for seed in range(50):
        rng = np.random.default_rng(3000 + seed)
        e = rng.normal(0, 1e-2, (t2, 3))
        s0 = iw_init(np.full(3, 1e-3), nu0=11)   # 10x-too-large prior
        for t in (t1, t2):
            outer = np.einsum("ti,tj->ij", e[:t], e[:t])
            biases[t].append((s0.Psi + outer) / (s0.nu + t - 4))
    b1 = np.linalg.norm(np.mean(biases[t1], axis=0) - sigma_true)
    b2 = np.linalg.norm(np.mean(biases[t2], axis=0) - sigma_true)
    assert 0.38 < b2 / b1 < 0.62


@given(
    lam=st.floats(min_value=0.9, max_value=1.0),
    scale=st.floats(min_value=1e-4, max_value=1e2),
)
@settings(max_examples=40, deadline=None)
def test_spd_preserved_under_updates(lam, scale):
    rng = np.random.default_rng(int(scale * 1e6) % 2**31)
    s = IWState(Psi=np.eye(3) * scale, nu=12.0, lam=lam)
    for _ in range(20):
        s = iw_update(s, Residual(e=rng.normal(0, 0.1, 3), M=np.eye(3)))
    assert np.linalg.eigvalsh(s.Psi).min() > 0.0


# -- forgetting factor ---------------------------------------------------------------


def test_optimal_lambda_example():
    assert optimal_lambda(1e-6, 8e-4) == pytest.approx(0.9, abs=1e-12)


def test_optimal_lambda_stationary_limit():
    assert optimal_lambda(1e-12, 1.0) > 0.999_99


def test_optimal_lambda_domain():
    with pytest.raises(ForgettingDomain):
        optimal_lambda(1.0, 1.0)     # drift too fast
    with pytest.raises(ValueError):
        optimal_lambda(0.0, 1.0)
    with pytest.raises(ValueError):
        optimal_lambda(1e-6, -1.0)


# -- residual covariance bound ---------------------------------------------------------


def test_bound_reduces_to_sigma_r():
    S = np.diag([1e-4, 1e-6, 1e-3])
    b = residual_covariance_lower_bound(np.eye(3), S, np.zeros((3, 6)),
                                        np.zeros((6, 6)), 0.05)
    assert_allclose(b, S)


def test_bound_psd_for_random_inputs():
    rng = np.random.default_rng(31)
    for _ in range(10):
        A = rng.normal(0, 1, (3, 3))
        Sr = A @ A.T + 1e-9 * np.eye(3)
        B = rng.normal(0, 1, (6, 6))
        SF = B @ B.T
        M = np.eye(3) + 0.01 * rng.normal(0, 1, (3, 3))
        JF = rng.normal(0, 1, (3, 6))
        b = residual_covariance_lower_bound(M, Sr, JF, SF, 0.05)
        assert np.linalg.eigvalsh(b).min() > -1e-12


def test_empirical_residual_covariance_dominates_bound():
    # Synthetic stream: true plant = Euler on the (linear) nominal model with
    # true loads; predictor sees noisy responses and noisy loads. Then
    # e = eps1 - M eps0 - dt J_F epsF and E[ee'] exceeds the bound by Sigma_r.
    model = NominalModel(P, 15.0)
    dt = 0.01
    rng = np.random.default_rng(77)
    r = np.array([0.03, 0.02, 0.6])
    u = np.concatenate([[0.02], np.full(6, 800.0)])
    Sigma_r = np.diag([1.5e-4, 1.3e-6, 4.2e-3])
    sigma_F = 7500.0
    Sigma_F = np.eye(6) * sigma_F**2
    sr = np.sqrt(np.diag(Sigma_r))

    n = 100_000
    es = np.empty((n, 3))
    r_next = r + dt * model.f(r, u, NOMINAL_FZ)
    for i in range(n):
        eps0 = rng.normal(0, 1, 3) * sr
        eps1 = rng.normal(0, 1, 3) * sr
        epsF = rng.normal(0, sigma_F, 6)
        res = prediction_residual(r + eps0, r_next + eps1, u, NOMINAL_FZ + epsF,
                                  model, dt)
        es[i] = res.e
    emp = es.T @ es / n
    M = np.eye(3) + dt * model.jac_r(r, u, NOMINAL_FZ)
    JF = model.jac_F(r, u, NOMINAL_FZ)
    bound = residual_covariance_lower_bound(M, Sigma_r, JF, Sigma_F, dt)
    gap_min = np.linalg.eigvalsh(emp - bound).min()
    se = np.linalg.norm(emp) * np.sqrt(2.0 / n)
    assert gap_min >= -3.0 * se


def test_learned_covariance_dominates_truth_under_load_noise():
    # With load noise injected the tracker's mean must (eventually) dominate
    # the true response covariance.
    model = NominalModel(P, 15.0)
    dt = 0.01
    rng = np.random.default_rng(55)
    r = np.array([0.03, 0.02, 0.6])
    u = np.concatenate([[0.02], np.full(6, 800.0)])
    Sigma_r = np.diag([1.5e-4, 1.3e-6, 4.2e-3])
    sr = np.sqrt(np.diag(Sigma_r))
    r_next = r + dt * model.f(r, u, NOMINAL_FZ)
    s = iw_init(np.diag(Sigma_r), nu0=11)
    for _ in range(5000):
        eps0 = rng.normal(0, 1, 3) * sr
        eps1 = rng.normal(0, 1, 3) * sr
        epsF = rng.normal(0, 7500.0, 6)
        res = prediction_residual(r + eps0, r_next + eps1, u, NOMINAL_FZ + epsF,
                                  model, dt)
        s = iw_update(s, res)
    gap = np.linalg.eigvalsh(iw_mean(s) - Sigma_r).min()
    assert gap > -1e-6 * np.linalg.norm(Sigma_r)
