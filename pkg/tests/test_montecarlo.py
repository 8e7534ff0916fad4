import numpy as np
import pytest
from scipy.linalg import expm

from qtsm_turnpike import QtsmModel
from qtsm_turnpike.io import dump_functionals, load_functionals
from qtsm_turnpike.montecarlo import (
    DegenerateEstimateError,
    SimGrid,
    attach_functionals,
    convergence_study,
    estimate,
    simulate_discount,
    simulate_factor,
    simulate_functionals,
    transition,
)
from qtsm_turnpike.pricing import myopic_measure_coeffs

from conftest import scalar_model, two_factor_model


def test_simgrid_checks():
    with pytest.raises(ValueError):
        SimGrid(1.0, 1)
    with pytest.raises(ValueError):
        SimGrid(0.0, 10)
    with pytest.raises(ValueError):
        SimGrid.from_rate(1.05, 10)
    assert SimGrid.from_rate(2.0, 10).nsteps == 20


def test_brownian_increments():
    m = QtsmModel(r0=0.0, r1=[0.0], R2=[[0.0]], a=[0.0], A=[[0.0]], b=[0.0], B=[[0.0]], Lambda=[[1.0]], Sigma=[[1.0]])
    grid = SimGrid(1.0, 4)
    e = simulate_factor(m, grid, 50_000, 3, [0.0])
    inc = np.diff(e.Y[:, :, 0], axis=1)
    assert abs(inc.mean()) < 4 * np.sqrt(grid.dt / inc.size)
    assert inc.var() == pytest.approx(grid.dt, rel=0.02)
    np.testing.assert_allclose(inc, e.dW[:, :, 0], atol=1e-14)


def test_deterministic_ode_when_no_noise():
    m = two_factor_model()
    m = QtsmModel(**{**m.to_mapping(), "Lambda": [[0.0, 0.0], [0.0, 0.0]]})
    grid = SimGrid(2.0, 8)
    y0 = np.array([0.3, -0.1])
    e = simulate_factor(m, grid, 4, 1, y0)
    # y(t) = e^{Bt}y0 + ∫ e^{B(t−s)} b ds
    aug = np.zeros((3, 3))
    aug[:2, :2] = m.B
    aug[:2, 2] = m.b
    X = expm(aug * 2.0)
    expect = X[:2, :2] @ y0 + X[:2, 2]
    np.testing.assert_allclose(e.Y[:, -1], np.tile(expect, (4, 1)), atol=1e-10)


def test_ou_stationary_variance():
    m = QtsmModel(r0=0.0, r1=[0.0], R2=[[0.0]], a=[0.0], A=[[0.0]], b=[0.0], B=[[-1.0]], Lambda=[[1.0]], Sigma=[[1.0]])
    e = simulate_factor(m, SimGrid(20.0, 20), 100_000, 5, [0.0], store_paths=False)
    YT = e.Y_T[:, 0]
    v = YT.var(ddof=1)
    se = np.sqrt(2.0 / (YT.size - 1)) * 0.5
    assert abs(v - 0.5 * (1 - np.exp(-40.0))) < 4 * se


def test_transition_first_block_is_brownian():
    E, mv, noise = transition(np.array([[-1.0]]), np.array([0.1]), np.array([[0.5]]), 0.1, True)
    assert noise[0, 0] == pytest.approx(np.sqrt(0.1))
    assert noise[0, 1] == 0.0
    # Cov(ξ) from the transition matches the OU formula λ²(1 − e^{−2κΔ})/(2κ)
    cov = noise[1] @ noise[1]
    assert cov == pytest.approx(0.25 * (1 - np.exp(-0.2)) / 2.0, rel=1e-12)


def test_constant_rate_zero_risk_price():
    m = QtsmModel(r0=0.05, r1=[0.0], R2=[[0.0]], a=[0.0], A=[[0.0]], b=[0.0], B=[[-1.0]], Lambda=[[0.3]], Sigma=[[1.0]])
    ens = simulate_functionals(m, [2.0], 20, 100, 1, [0.2])[2.0]
    np.testing.assert_allclose(ens.H, np.exp(-0.1), rtol=1e-14)


def test_deterministic_L():
    m = QtsmModel(r0=0.0, r1=[1.0], R2=[[0.0]], a=[0.0], A=[[0.0]], b=[0.0], B=[[-1.0]], Lambda=[[0.3]], Sigma=[[1.0]])
    ens = simulate_functionals(m, [1.0], 2000, 10, 1, [0.0])[1.0]
    assert np.max(np.abs(ens.L[:, 0] - (1 - np.exp(-1.0)))) <= 1e-6


def test_exponential_martingale():
    m = QtsmModel(r0=0.0, r1=[0.0], R2=[[0.0]], a=[0.4], A=[[0.0]], b=[0.0], B=[[-1.0]], Lambda=[[0.3]], Sigma=[[1.0]])
    ens = simulate_functionals(m, [3.0], 10, 100_000, 8, [0.0])[3.0]
    est = estimate(ens.H)
    assert abs(est.mean - 1.0) < 3 * est.se


def test_z_martingale_quadratic_model(qmodel):
    ens = simulate_functionals(qmodel, [5.0], 20, 100_000, 4, [0.1])[5.0]
    f = ens.functionals
    Z = np.exp(-f.stoch_int_theta - 0.5 * f.int_theta_sq)
    est = estimate(Z)
    assert abs(est.mean - 1.0) < 4 * est.se


def test_H_consistent_with_components(qmodel):
    ens = simulate_functionals(qmodel, [1.0], 20, 1000, 4, [0.1])[1.0]
    f = ens.functionals
    assert np.array_equal(ens.H, np.exp(-f.int_r - f.stoch_int_theta - 0.5 * f.int_theta_sq))


def test_fused_kernel_matches_stored_paths():
    m = two_factor_model()
    fused = simulate_functionals(m, [1.0, 2.0], 50, 2000, 77, [0.1, 0.0], store_paths=True)
    for T, ens in fused.items():
        ref = attach_functionals(ens, m)
        for name in ("int_r", "stoch_int_theta", "int_theta_sq", "L", "Y_T"):
            np.testing.assert_allclose(getattr(ens.functionals, name), getattr(ref.functionals, name), rtol=1e-12, atol=1e-14)


def test_common_random_numbers_across_horizons(qmodel):
    both = simulate_functionals(qmodel, [1.0, 2.0], 20, 500, 6, [0.0])
    one = simulate_functionals(qmodel, [1.0], 20, 500, 6, [0.0])
    assert np.array_equal(both[1.0].H, one[1.0].H)


@pytest.mark.parametrize("threads", [2, 8])
def test_thread_count_does_not_change_results(qmodel, threads):
    a = simulate_functionals(qmodel, [1.0, 3.0], 20, 3000, 9, [0.1], threads=1)
    b = simulate_functionals(qmodel, [1.0, 3.0], 20, 3000, 9, [0.1], threads=threads)
    for T in a:
        for name in ("int_r", "stoch_int_theta", "int_theta_sq", "L", "Y_T"):
            assert np.array_equal(getattr(a[T].functionals, name), getattr(b[T].functionals, name))


def test_discount_simulation_matches_bond(gauss, gmodel):
    ens = simulate_discount(gmodel, [5.0], 50, 50_000, 3, [0.01])[5.0]
    est = estimate(ens.functionals.discount)
    assert abs(est.mean - gauss.bond(5.0, 0.01)) < 3 * est.se


def test_estimate_examples():
    e = estimate([1.0, 1.0, 1.0])
    assert (e.mean, e.se) == (1.0, 0.0)
    e = estimate([0.0, 2.0])
    assert (e.mean, e.se) == (1.0, 1.0)
    with pytest.raises(DegenerateEstimateError):
        estimate([1.0, 2.0], weights=[0.0, 0.0])
    w = estimate([1.0, 3.0], weights=[1.0, 3.0])
    assert w.mean == pytest.approx(2.5)


def test_se_scales_with_paths(qmodel):
    a = estimate(simulate_functionals(qmodel, [1.0], 10, 20_000, 1, [0.0])[1.0].H).se
    b = estimate(simulate_functionals(qmodel, [1.0], 10, 80_000, 1, [0.0])[1.0].H).se
    assert b / a == pytest.approx(0.5, rel=0.1)


def test_girsanov_weighting_matches_myopic_simulation(qmodel):
    T, y0, gamma = 3.0, [0.2], 0.5
    phys = simulate_functionals(qmodel, [T], 50, 100_000, 21, y0)[T]
    w = estimate(phys.Y_T[:, 0], weights=phys.H**gamma)
    coeffs = myopic_measure_coeffs(qmodel, gamma, T, 50)
    my = simulate_factor(coeffs, SimGrid(T, 150), 100_000, 22, y0, model=qmodel, store_paths=False)
    d = estimate(my.Y_T[:, 0])
    assert abs(w.mean - d.mean) < 3 * np.hypot(w.se, d.se)


def test_convergence_constant_rate_has_no_bias():
    m = QtsmModel(r0=0.05, r1=[0.0], R2=[[0.0]], a=[0.0], A=[[0.0]], b=[0.0], B=[[-1.0]], Lambda=[[0.3]], Sigma=[[1.0]])
    rep = convergence_study(m, "H", [4, 8, 16], 1.0, 200, 1, [0.0])
    assert all(abs(r.bias) < 1e-15 for r in rep.rows)


def test_convergence_vasicek_discount_second_order(gmodel):
    rep = convergence_study(gmodel, "discount", [4, 8, 16, 32], 10.0, 20_000, 5, [0.5])
    ratios = rep.bias_ratios()
    assert np.all(ratios >= 3.5)


def test_convergence_deterministic_L():
    m = QtsmModel(r0=0.0, r1=[1.0], R2=[[0.0]], a=[0.0], A=[[0.0]], b=[0.0], B=[[-1.0]], Lambda=[[0.3]], Sigma=[[1.0]])
    rep = convergence_study(m, "L", [500, 1000, 2000], 1.0, 10, 1, [0.0])
    assert abs(rep.rows[-1].mean - (1 - np.exp(-1.0))) < 1e-6


def test_functional_dump_round_trip(tmp_path, qmodel):
    ens = simulate_functionals(qmodel, [1.0], 10, 100, 2, [0.1])[1.0]
    path = dump_functionals(ens, tmp_path / "f.bin")
    back = load_functionals(path)
    assert back.id == ens.id
    assert np.array_equal(back.H, ens.H) and np.array_equal(back.L, ens.L)
    raw = path.read_bytes()
    assert raw[:8] == b"QTSMFUN1"
