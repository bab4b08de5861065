"""Tests for delta-method barrier uncertainty propagation.

Monte-Carlo oracles sample the measurement noise directly and compare moments;
finite differences check the closed-form load gradient. Sample-variance
standard errors are estimated from the sample's own fourth moment,
SE(s^2) ~= sqrt((m4 - s^4)/N).
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from riskcbf.errors import LoadDomain, SingularLoadRegime
from riskcbf.params import SafetyLimits, VehicleParams
from riskcbf.uncertainty import (
    BarrierSpec,
    barrier_distribution,
    barrier_distribution_full,
    barrier_gradient_r,
    barrier_value,
    delta_error_bound,
    load_gradient,
    load_scale,
    rate_load_quadratic,
    response_derivative_distribution,
    validate_covariance,
)

SPEC = BarrierSpec()
NOMINAL_FZ = np.full(6, SPEC.Fz_nom)


def variance_se(samples):
    """Asymptotic standard error of the sample variance."""
    s2 = samples.var()
    m4 = np.mean((samples - samples.mean()) ** 4)
    return np.sqrt((m4 - s2 * s2) / samples.size)


# -- load scale ---------------------------------------------------------------


def test_load_scale_nominal_is_one():
    assert load_scale(NOMINAL_FZ, SPEC) == pytest.approx(1.0, abs=1e-15)


def test_load_scale_half_load():
    w = load_scale(0.5 * NOMINAL_FZ, SPEC)
    assert w == pytest.approx(0.5**SPEC.gamma, rel=1e-12)


def test_load_scale_rejects_nonpositive():
    bad = NOMINAL_FZ.copy()
    bad[3] = 0.0
    with pytest.raises(LoadDomain):
        load_scale(bad, SPEC)
    bad[3] = -500.0
    with pytest.raises(LoadDomain):
        load_scale(bad, SPEC)


def test_spec_rejects_bad_gamma():
    with pytest.raises(ValueError):
        BarrierSpec(gamma=0.5)
    with pytest.raises(ValueError):
        BarrierSpec(gamma=0.0)


def test_spec_from_limits():
    spec = BarrierSpec.from_limits(SafetyLimits(), VehicleParams())
    assert spec.beta_lim == pytest.approx(0.15)
    assert spec.gamma == pytest.approx(0.3)
    assert spec.Fz_nom == pytest.approx(75_000.0)


# -- simplified barrier moments ----------------------------------------------


def test_barrier_mu_matches_value():
    r = np.array([0.08, 0.05, 1.2])
    dist = barrier_distribution(r, 0.9, 1e-4, SPEC)
    assert dist.mu_h == pytest.approx(barrier_value(0.08, 0.9, SPEC), rel=1e-14)
    assert dist.sigma_h2 == pytest.approx(4.0 * 0.9**4 * 0.08**2 * 1e-4, rel=1e-12)


def test_barrier_variance_mc_at_unit_weight():
    # Delta method drops the 2 sigma^4 curvature term of Var(beta~^2); allow it.
    rng = np.random.default_rng(7)
    beta, sigma = 0.10, 0.008
    n = 2_000_000
    h = barrier_value(rng.normal(beta, sigma, n), 1.0, SPEC)
    dist = barrier_distribution([beta, 0.0, 0.0], 1.0, sigma**2, SPEC)
    tol = 3.0 * variance_se(h) + 2.5 * sigma**4
    assert abs(h.var() - dist.sigma_h2) < tol


def test_barrier_bias_is_minus_sigma2():
    # E[h(beta~)] - h(beta) = -Var(beta~) exactly for the quadratic barrier.
    rng = np.random.default_rng(11)
    beta, sigma = 0.06, 0.01
    n = 4_000_000
    h = barrier_value(rng.normal(beta, sigma, n), 1.0, SPEC)
    bias = h.mean() - barrier_value(beta, 1.0, SPEC)
    se = h.std() / np.sqrt(n)
    assert abs(bias - (-(sigma**2))) < 4.0 * se


def test_barrier_rejects_negative_variance():
    with pytest.raises(ValueError):
        barrier_distribution([0.1, 0.0, 0.0], 1.0, -1e-6, SPEC)


# -- load gradient -------------------------------------------------------------


def test_load_gradient_nominal_value():
    # 2*0.3*0.15^2 / (6*75000) = 3.0e-8 per newton at w = 1.
    g = load_gradient(NOMINAL_FZ, SPEC)
    assert_allclose(g, 3.0e-8, rtol=1e-12)
    assert g.shape == (6,)


def test_load_gradient_matches_finite_difference():
    rng = np.random.default_rng(3)
    for _ in range(5):
        Fz = NOMINAL_FZ * rng.uniform(0.5, 1.5, 6)
        g = load_gradient(Fz, SPEC)
        eps = 1.0  # newtons
        for k in range(6):
            up, dn = Fz.copy(), Fz.copy()
            up[k] += eps
            dn[k] -= eps
            fd = (
                barrier_value(0.0, load_scale(up, SPEC), SPEC)
                - barrier_value(0.0, load_scale(dn, SPEC), SPEC)
            ) / (2 * eps)
            assert fd == pytest.approx(g[k], rel=1e-7)


@pytest.mark.parametrize(
    "gamma,expected_ratio",
    [(0.2, 8.0), (0.3, 0.5 ** (-4.0 / 3.0)), (0.4, 0.5**-0.5)],
)
def test_load_gradient_half_weight_ratio(gamma, expected_ratio):
    # gradient(w=0.5) / gradient(w=1) = 0.5^((2g-1)/g), > 1 for g < 1/2.
    spec = BarrierSpec(gamma=gamma)
    Fz_half_w = (0.5 ** (1.0 / gamma)) * NOMINAL_FZ   # loads giving w = 0.5
    assert load_scale(Fz_half_w, spec) == pytest.approx(0.5, rel=1e-12)
    ratio = load_gradient(Fz_half_w, spec)[0] / load_gradient(NOMINAL_FZ, spec)[0]
    assert ratio == pytest.approx(expected_ratio, rel=1e-12)


# -- full (two-term) variance ---------------------------------------------------


def test_full_variance_adds_load_term():
    Sigma_r = np.diag([1.5e-4, 1e-6, 4e-3])
    Sigma_F = np.diag(np.full(6, 7500.0**2))
    r = np.array([0.09, 0.02, 1.0])
    full = barrier_distribution_full(r, NOMINAL_FZ, Sigma_r, Sigma_F, SPEC)
    simple = barrier_distribution(r, 1.0, Sigma_r[0, 0], SPEC)
    gF = load_gradient(NOMINAL_FZ, SPEC)
    assert full.mu_h == pytest.approx(simple.mu_h, rel=1e-14)
    assert full.sigma_h2 == pytest.approx(simple.sigma_h2 + gF @ Sigma_F @ gF, rel=1e-12)


def test_full_variance_mc():
    rng = np.random.default_rng(19)
    beta, sigma_b, sigma_F = 0.09, 0.006, 6000.0
    Sigma_r = np.diag([sigma_b**2, 1e-8, 1e-8])
    Sigma_F = np.diag(np.full(6, sigma_F**2))
    n = 2_000_000
    betas = rng.normal(beta, sigma_b, n)
    loads = NOMINAL_FZ + rng.normal(0.0, sigma_F, (n, 6))
    w = (loads.sum(axis=1) / (6 * SPEC.Fz_nom)) ** SPEC.gamma
    h = w**2 * SPEC.beta_lim**2 - betas**2
    dist = barrier_distribution_full([beta, 0, 0], NOMINAL_FZ, Sigma_r, Sigma_F, SPEC)
    # Allow MC noise plus curvature remainders of both nonlinear maps.
    tol = 3.0 * variance_se(h) + 2.5 * sigma_b**4 + 0.02 * dist.sigma_h2
    assert abs(h.var() - dist.sigma_h2) < tol


def test_full_variance_singular_load_regime():
    Sigma_r = 1e-4 * np.eye(3)
    Sigma_F = np.eye(6)
    with pytest.raises(SingularLoadRegime):
        barrier_distribution_full([0.05, 0, 0], 0.01 * NOMINAL_FZ, Sigma_r, Sigma_F, SPEC)


def test_covariance_validation():
    with pytest.raises(ValueError):
        validate_covariance(np.array([[1.0, 0.2], [0.3, 1.0]]))
    with pytest.raises(ValueError):
        validate_covariance(np.array([[1.0, 2.0], [2.0, 1.0]]))  # indefinite
    with pytest.raises(ValueError):
        validate_covariance(np.eye(4), dim=3)
    out = validate_covariance(np.eye(3), dim=3)
    assert_allclose(out, np.eye(3))


# -- response-derivative propagation -------------------------------------------


def test_response_derivative_distribution_mc():
    # The delta covariance is first order; f is bilinear in (r, Fz), so the
    # dropped Var*Var cross moments scale with the noise squared. Test at
    # small noise where they sit below the Monte-Carlo floor.
    from riskcbf.nominal import NominalModel

    model = NominalModel(VehicleParams(), 15.0)
    rng = np.random.default_rng(23)
    r = np.array([0.05, 0.08, 1.5])
    u = np.zeros(7)
    u[0] = 0.04
    u[1:] = rng.uniform(-2e4, 2e4, 6)
    sigma_F = 1500.0
    Sigma_r = np.diag([1.5e-4, 1.3e-6, 4.2e-3]) / 25.0
    Sigma_F = np.diag(np.full(6, sigma_F**2))
    mean, cov = response_derivative_distribution(r, u, NOMINAL_FZ, Sigma_r, Sigma_F, model)
    assert_allclose(mean, model.f(r, u, NOMINAL_FZ), rtol=1e-14)

    n = 300_000
    rs = r + rng.multivariate_normal(np.zeros(3), Sigma_r, n)
    Fzs = NOMINAL_FZ + rng.normal(0.0, sigma_F, (n, 6))
    out = np.empty((n, 3))
    for i in range(n):
        out[i] = model.f(rs[i], u, Fzs[i])
    emp = np.cov(out.T)
    d = np.sqrt(np.diag(cov))
    scale = np.outer(d, d)
    se = np.sqrt((scale**2 + cov**2) / n)
    assert np.all(np.abs(emp - cov) < 4.0 * se + 0.01 * scale)


def _exact_rate_load_variance(r, u, Fz, Sigma_F, w, model):
    """Oracle: push Sigma_F through the response Jacobian into the rate."""
    g = barrier_gradient_r(r[0], w)
    J = model.jac_F(r, u, Fz)
    v = g @ J
    return float(v @ Sigma_F @ v)


def test_rate_load_quadratic_matches_exact_variance():
    # The returned split (A, c) drops the term linear in u, so compare c at
    # u = 0 and recover u'Au from the symmetric second difference of the
    # exact variance, where the linear term cancels.
    from riskcbf.nominal import NominalModel

    model = NominalModel(VehicleParams(), 12.0)
    rng = np.random.default_rng(7)
    r = np.array([0.06, -0.04, 1.2])
    Fz = NOMINAL_FZ * rng.uniform(0.85, 1.15, 6)
    q = rng.normal(size=(6, 6))
    Sigma_F = 1500.0**2 * (q @ q.T) / 6.0
    w = load_scale(Fz, SPEC)

    A, c = rate_load_quadratic(r, Fz, Sigma_F, w, model)
    assert A.shape == (7, 7)
    assert_allclose(A, A.T, atol=1e-18)
    assert np.linalg.eigvalsh(A).min() >= -1e-12 * max(1.0, np.abs(A).max())
    assert c >= 0.0
    assert_allclose(c, _exact_rate_load_variance(r, np.zeros(7), Fz, Sigma_F, w, model), rtol=1e-12)

    for _ in range(5):
        u = np.concatenate([[rng.uniform(-0.3, 0.3)], rng.uniform(-5e4, 5e4, 6)])
        plus = _exact_rate_load_variance(r, u, Fz, Sigma_F, w, model)
        minus = _exact_rate_load_variance(r, -u, Fz, Sigma_F, w, model)
        assert_allclose(2.0 * (u @ A @ u), plus + minus - 2.0 * c, rtol=1e-9, atol=1e-18)


def test_rate_load_quadratic_torque_columns_vanish():
    # Wheel torques enter the response dynamics only through the yaw moment,
    # and the barrier gradient has no yaw component, so the command-dependent
    # variance lives entirely in the steer column.
    from riskcbf.nominal import NominalModel

    model = NominalModel(VehicleParams(), 18.0)
    r = np.array([0.03, 0.05, 0.8])
    Sigma_F = np.diag(np.full(6, 7500.0**2))
    A, c = rate_load_quadratic(r, NOMINAL_FZ, Sigma_F, 1.0, model)
    assert np.abs(A[1:, :]).max() == 0.0
    assert np.abs(A[:, 1:]).max() == 0.0
    assert A[0, 0] > 0.0
    assert c > 0.0


def test_delta_error_bound_values():
    assert delta_error_bound(0.015, 0.15) == pytest.approx(4.0 * 0.01, rel=1e-12)
    assert delta_error_bound(0.015, 0.15, L_h=2.0) == pytest.approx(0.02, rel=1e-12)
    with pytest.raises(ValueError):
        delta_error_bound(0.01, 0.0)


# -- properties -----------------------------------------------------------------


@given(
    total=st.floats(min_value=0.1, max_value=3.0),
    bump=st.floats(min_value=1e-3, max_value=1.0),
)
@settings(max_examples=60, deadline=None)
def test_load_scale_monotone_in_total_load(total, bump):
    base = np.full(6, total * SPEC.Fz_nom)
    more = base.copy()
    more[0] += bump * SPEC.Fz_nom
    assert load_scale(more, SPEC) > load_scale(base, SPEC)


@given(
    beta=st.floats(min_value=-0.3, max_value=0.3),
    w=st.floats(min_value=0.3, max_value=1.5),
)
@settings(max_examples=80, deadline=None)
def test_barrier_sign_structure(beta, w):
    h = barrier_value(beta, w, SPEC)
    if abs(beta) < w * SPEC.beta_lim - 1e-12:
        assert h > 0.0
    elif abs(beta) > w * SPEC.beta_lim + 1e-12:
        assert h < 0.0
