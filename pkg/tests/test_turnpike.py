import numpy as np
import pytest

from qtsm_turnpike import LinearSharing, Log, ParetoCollective, Power
from qtsm_turnpike.montecarlo import simulate_functionals
from qtsm_turnpike.portfolio import hedging_feedback
from qtsm_turnpike.turnpike import (
    ExperimentConfig,
    ExperimentRefused,
    InsufficientSignalError,
    exponent_from_alpha,
    fit_rate,
    holder_holds,
    run_experiment,
    theoretical_exponent,
    theory_for,
    uniform_proportion_gap,
    verdict_for,
)
from qtsm_turnpike.utility import UtilityDomainError

from conftest import scalar_model
from oracles import ols_slope_spread, pareto_power_gaps

PARETO = ParetoCollective(weights=(0.5, 0.5), exponents=(-2.0, -1.0))
TGRID = (1.0, 2.0, 3.0, 4.0, 5.0)


def test_exponent_examples():
    assert exponent_from_alpha(0.0, 0.5) == 1.0
    assert theoretical_exponent(ParetoCollective((0.5, 0.5), (-2.0, -1.0)), Power(-1.0)) == pytest.approx(1 / 3)
    # gamma = (3, 2) through the Pareto formula and the generic formula agree
    th = theory_for(PARETO, Power(-1.0))
    assert th.alpha == pytest.approx(-1 / 3)
    assert exponent_from_alpha(th.alpha, th.q) == pytest.approx(1 / 3)


def test_exponent_domain():
    with pytest.raises(UtilityDomainError):
        exponent_from_alpha(0.1, 0.5)
    with pytest.raises(UtilityDomainError):
        exponent_from_alpha(-0.5, 0.5)


def test_linear_sharing_reports_supremum():
    th = theory_for(LinearSharing(w=(1.0, 1.0), exponents=(-2.0, -1.0)), Power(-1.0), beta=0.5)
    assert th.supremum
    assert th.exponent == pytest.approx(min(1.0, 3.0 - 2.0))


def test_fit_exact_power_law():
    EH = np.exp(-np.linspace(0.5, 4.0, 8))
    fit = fit_rate(EH, 2.5 * EH**0.7)
    assert fit.slope == pytest.approx(0.7, abs=1e-12)
    assert fit.halfwidth < 1e-10
    assert fit.intercept == pytest.approx(np.log(2.5), abs=1e-12)


def test_fit_with_noise():
    mean, spread = ols_slope_spread(0.7, 8, 0.05, 2000, 1)
    # sampling distribution of the slope is centred on 0.7 and far narrower than 0.1
    assert abs(mean - 0.7) < 0.01 and 4 * spread < 0.1
    rng = np.random.default_rng(3)
    EH = np.exp(-np.linspace(0.2, 3.0, 8))
    for _ in range(20):
        g = 2.5 * EH**0.7 * np.exp(0.05 * rng.standard_normal(8))
        assert abs(fit_rate(EH, g).slope - 0.7) <= 0.1


def test_fit_drops_noisy_rows():
    EH = np.exp(-np.linspace(0.5, 4.0, 6))
    gap = EH**0.5
    se = np.array([0, 0, 0, 0, 1.0, 1.0])
    fit = fit_rate(EH, gap, se)
    assert (fit.n_used, fit.n_dropped) == (4, 2)
    with pytest.raises(InsufficientSignalError):
        fit_rate(EH, gap, np.ones(6))


def test_verdicts():
    assert verdict_for(0.35, 1 / 3, 0.2) == "PASS"
    assert verdict_for(0.9, 1 / 3, 0.2) == "STEEPER"
    assert verdict_for(0.05, 1 / 3, 0.2) == "FAIL"


def test_config_checks(qmodel):
    with pytest.raises(ValueError):
        ExperimentConfig(qmodel, PARETO, Power(-1.0), 1.0, [0.0], (1, 2, 3, 4), 10, 10, 1)
    with pytest.raises(ValueError):
        ExperimentConfig(qmodel, PARETO, Power(-1.0), 1.0, [0.0], (1, 3, 2, 4, 5), 10, 10, 1)
    with pytest.raises(ValueError):
        ExperimentConfig(qmodel, PARETO, Power(-1.0), 1.0, [0.0], TGRID, 10, 10, 1, components=("bogus",))
    with pytest.raises(UtilityDomainError):
        ExperimentConfig(qmodel, Power(-1.0), PARETO, 1.0, [0.0], TGRID, 10, 10, 1)


def test_degenerate_pair(qmodel):
    cfg = ExperimentConfig(qmodel, Power(-1.0), Power(-1.0), 1.0, [0.0], TGRID, 100, 10, 1)
    rep = run_experiment(cfg)
    assert rep.verdict == "degenerate"
    assert all(f.reason == "identical preferences" for f in rep.fits.values())


def test_refuses_non_decaying_bonds():
    m = scalar_model(r0=-0.5, r1=[0.0], R2=[[0.0]])
    cfg = ExperimentConfig(m, PARETO, Power(-1.0), 1.0, [0.0], TGRID, 100, 10, 1)
    with pytest.raises(ExperimentRefused):
        run_experiment(cfg)


def test_log_reference_hedging_is_pareto_demand(qmodel):
    u1 = ParetoCollective(weights=(0.5, 0.5), exponents=(-1.0, 0.0))
    ens = simulate_functionals(qmodel, TGRID, 10, 5000, 4, [0.1])
    cfg = ExperimentConfig(qmodel, u1, Log(), 2.0, [0.1], TGRID, 5000, 10, 4, components=("hedging",))
    rep = run_experiment(cfg, ensembles=ens)
    assert theoretical_exponent(u1, Log()) == pytest.approx(0.5)
    for row in rep.rows:
        demand = hedging_feedback(u1, qmodel, ens[row.T], 2.0)
        assert row.gaps["hedging"].mean == pytest.approx(float(np.linalg.norm(demand.value)), rel=1e-12)


def test_report_rows_and_bounds(qmodel):
    cfg = ExperimentConfig(qmodel, PARETO, Power(-1.0), 1.0, [0.0], TGRID, 5000, 10, 2, components=("myopic", "wealth_gap"))
    rep = run_experiment(cfg)
    assert not rep.incomplete
    assert [r.T for r in rep.rows] == list(TGRID)
    assert all(r.d_holds and r.holder_ok for r in rep.rows)
    assert np.all(np.diff(rep.m_proxy()) <= 0)
    assert np.all(np.diff([r.EH for r in rep.rows]) < 0)
    assert rep.summary().startswith("slope=")
    assert "theory=0.3333" in rep.summary()


def test_threads_do_not_change_report(qmodel):
    base = dict(model=qmodel, u1=PARETO, u2=Power(-1.0), x=1.0, y=[0.0], Tgrid=TGRID, npaths=3000, steps_per_unit=10, seed=8)
    a = run_experiment(ExperimentConfig(**base, threads=1))
    b = run_experiment(ExperimentConfig(**base, threads=4))
    for ra, rb in zip(a.rows, b.rows):
        for k in ra.gaps:
            assert ra.gaps[k] == rb.gaps[k]
    assert repr(a.fits) == repr(b.fits)


def test_holder_inequality_on_samples():
    rng = np.random.default_rng(0)
    H = np.exp(rng.normal(-1.0, 0.8, 10_000))
    assert holder_holds(H, 0.5, -1 / 3)
    assert holder_holds(np.full(5, 0.3), 0.5, -1 / 3)


def test_proportions_same_crra_zero(qmodel):
    cfg = ExperimentConfig(qmodel, Power(-1.0), Power(-1.0), 1.0, [0.1], TGRID, 1000, 10, 1)
    for T, est, _ in uniform_proportion_gap(cfg, [0.5, 1.0, 2.0]):
        assert est.mean == 0.0


def test_proportions_power_pair_flat_in_wealth(qmodel):
    ens = simulate_functionals(qmodel, TGRID, 10, 2000, 5, [0.1])
    cfg = ExperimentConfig(qmodel, Power(-2.0), Power(-1.0), 1.0, [0.1], TGRID, 2000, 10, 5)
    full = uniform_proportion_gap(cfg, [0.1, 1.0, 10.0], ensembles=ens)
    for T, est, _ in full:
        single = uniform_proportion_gap(cfg, [3.0], ensembles=ens)
        one = dict((t, e) for t, e, _ in single)[T]
        assert est.mean == pytest.approx(one.mean, rel=1e-9)


def test_mc_gaps_match_gaussian_oracle(gauss, gmodel):
    T, x, y = 2.0, 1.0, 0.01
    grid = (1.0, 1.5, 2.0, 2.5, 3.0)
    ens = simulate_functionals(gmodel, grid, 100, 100_000, 12, [y])
    cfg = ExperimentConfig(gmodel, PARETO, Power(-1.0), x, [y], grid, 100_000, 100, 12, components=("myopic", "hedging"))
    rep = run_experiment(cfg, ensembles=ens)
    for row in rep.rows:
        my, hd = pareto_power_gaps(gauss, row.T, x, y)
        m, h = row.gaps["myopic"], row.gaps["hedging"]
        assert abs(m.mean - abs(my)) < 4 * m.se + 1e-3 * abs(my)
        assert abs(h.mean - abs(hd)) < 4 * h.se + 1e-2 * abs(hd)
        assert row.EH == pytest.approx(gauss.bond(row.T, y), rel=1e-8)
