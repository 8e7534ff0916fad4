import numpy as np
import pytest

from qtsm_turnpike import QtsmModel
from qtsm_turnpike.pricing import (
    DomainError,
    bond_curve,
    bond_price,
    crra_feedback,
    crra_system,
    eh_gamma_closed_form,
    eh_gamma_curve,
    eh_gamma_direct,
    long_run_yield,
    myopic_measure_coeffs,
)
from qtsm_turnpike.utility import Log, Power

from conftest import scalar_model, two_factor_model
from oracles import crra_hedging


@pytest.mark.parametrize("T", [0.5, 1.0, 5.0, 10.0])
def test_bond_matches_gaussian_oracle(gauss, gmodel, T):
    assert bond_price(gmodel, T, [0.01]) == pytest.approx(gauss.bond(T, 0.01), rel=1e-12)


def test_constant_rate_bond():
    m = scalar_model(r1=[0.0], R2=[[0.0]])
    assert bond_price(m, 1.0, [0.3]) == pytest.approx(np.exp(-0.06), rel=1e-13)


def test_bond_curve_zero_and_monotone(qmodel):
    c = bond_curve(qmodel, [1.0, 2.0, 5.0])
    p = c.prices([0.0])
    assert np.all(np.diff(p) < 0) and np.all(p < 1)
    assert c.price(2.0, [0.0]) == p[1]


@pytest.mark.parametrize("gamma", [0.25, 0.5, 2.0 / 3.0, 1.0])
def test_eh_gamma_matches_gaussian_oracle(gauss, gmodel, gamma):
    assert eh_gamma_closed_form(gmodel, gamma, 5.0, [0.01]) == pytest.approx(gauss.eh_gamma(gamma, 5.0, 0.01), rel=1e-12)


def test_eh_gamma_edge_cases(qmodel):
    assert eh_gamma_closed_form(qmodel, 0.0, 5.0, [0.1]) == 1.0
    assert eh_gamma_closed_form(qmodel, 0.5, 0.0, [0.1]) == 1.0
    with pytest.raises(DomainError):
        eh_gamma_closed_form(qmodel, 1.5, 5.0, [0.1])


@pytest.mark.parametrize("gamma", [0.3, 0.5, 0.8])
def test_moment_route_agrees_with_crra_route(gamma):
    m = two_factor_model()
    y = np.array([0.1, -0.2])
    a = eh_gamma_curve(m, gamma, [1.0, 4.0], y)
    b = eh_gamma_direct(m, gamma, [1.0, 4.0], y)
    np.testing.assert_allclose(a, b, rtol=1e-10)


def test_crra_feedback_matches_oracle(gauss, gmodel):
    fb = crra_feedback(gmodel, Power(-1.0), 0.0, 5.0, 2.0, [0.01])
    assert fb.myopic[0] == pytest.approx(2.0 / 2.0 * gauss.a / gauss.sigma, rel=1e-14)
    assert fb.hedging[0] == pytest.approx(crra_hedging(gauss, -1.0, 5.0, 2.0), rel=1e-10)
    np.testing.assert_allclose(fb.total, fb.myopic + fb.hedging)


def test_log_feedback_has_no_hedging(qmodel):
    fb = crra_feedback(qmodel, Log(), 0.0, 5.0, 1.0, [0.1])
    assert np.all(fb.hedging == 0.0)
    np.testing.assert_allclose(fb.myopic, qmodel.sigma_inv_t() @ qmodel.theta([0.1]))


def test_crra_feedback_homogeneous(qmodel):
    a = crra_feedback(qmodel, Power(-3.0), 0.0, 4.0, 1.0, [0.1])
    b = crra_feedback(qmodel, Power(-3.0), 0.0, 4.0, 2.0, [0.1])
    np.testing.assert_allclose(b.total, 2 * a.total, rtol=1e-14)


def test_crra_system_rejects_positive_p(qmodel):
    with pytest.raises(DomainError):
        crra_system(qmodel, 0.5, 1.0)


def test_long_run_yield_matches_bond_decay(qmodel):
    lr = long_run_yield(qmodel)
    p = bond_curve(qmodel, [40.0, 50.0]).prices([0.0])
    assert lr.scalar_rate == pytest.approx(-np.log(p[1] / p[0]) / 10.0, rel=1e-8)
    assert lr.scalar_rate > 0


def test_myopic_coeffs_gamma_one_is_forward_measure(gauss, gmodel):
    c = myopic_measure_coeffs(gmodel, 1.0, 3.0)
    # forward-measure drift of a Vasicek factor: b − λa − λ² r1 (1 − e^{−κ(T−t)})/κ
    t = c.tgrid
    expect = gauss.b - gauss.lam * gauss.a - gauss.lam**2 * gauss.r1 * (1 - np.exp(-gauss.kappa * (3.0 - t))) / gauss.kappa
    np.testing.assert_allclose(c.drift_intercept[:, 0], expect, atol=1e-12)
    np.testing.assert_allclose(c.drift_slope[:, 0, 0], -gauss.kappa)


def test_myopic_coeffs_gamma_zero_is_physical(qmodel):
    c = myopic_measure_coeffs(qmodel, 0.0, 2.0)
    assert np.all(c.drift_slope == qmodel.B) and np.all(c.drift_intercept == qmodel.b)


@pytest.mark.parametrize("gamma", [0.5, 2.0 / 3.0])
def test_expected_L_oracle(gauss, gmodel, gamma):
    c = myopic_measure_coeffs(gmodel, gamma, 6.0)
    assert c.expected_L(0, [0.01])[0] == pytest.approx(gauss.mean_L_myopic(gamma, 6.0), rel=1e-10)
