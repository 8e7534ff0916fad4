"""Martingale-duality optimal portfolios for general utilities.

For horizon ``T`` the optimal terminal wealth is ``I(λ̂H_T)`` where ``λ̂``
solves the budget equation ``E[H_T I(λ̂H_T)] = x``. The time-0 dollar
positions split into

    myopic   π^M = (Σᵀ)⁻¹θ(y) · E[−H J(λ̂H)]
    hedging  π^H = (Σᵀ)⁻¹Λᵀ · E[−H L_T (I + J)(λ̂H)]

with ``J(z) = z I′(z)``. All expectations are empirical means over one
ensemble, and ``λ̂`` is calibrated on that same ensemble.

Standard errors account for ``λ̂`` being estimated. With per-path budget
terms ``g_i = H_i I(λ̂H_i)`` and an estimator ``f̄ = mean(f_i)``, the reported
standard error is that of the influence samples ``f_i − κ(g_i − x)`` where
``κ = (∂f̄/∂log λ) / (∂ḡ/∂log λ)``. This is the delta method applied to the
pair of equations defining the estimator; it gives exactly zero for
estimators that the budget constraint pins down, such as the myopic term of
a power utility.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import brentq

from .model import QtsmModel
from .montecarlo import McEstimate, PathEnsemble, estimate
from .utility import Utility

Array = NDArray[np.float64]

BUDGET_RTOL = 1e-10
MAX_DECADES = 1000
_DLOG = 1e-5


class CalibrationError(RuntimeError):
    """The budget equation could not be solved on the ensemble."""


class EnsembleMismatchError(ValueError):
    """Inputs refer to different ensembles or initial states."""


class DBoundViolation(AssertionError):
    """The empirical difference bound failed."""


@dataclass(frozen=True)
class CalibratedMultiplier:
    lambda_hat: float
    budget_residual: float
    iterations: int
    ensemble_id: str
    x: float


def _budget(utility: Utility, H: Array, lam: float) -> float:
    return float(np.mean(H * utility.inverse_marginal(lam * H)))


def find_lambda_hat(utility: Utility, ensemble: PathEnsemble, x: float) -> CalibratedMultiplier:
    """Solve ``mean(H·I(λH)) = x`` for ``λ`` on the ensemble.

    The budget is strictly decreasing in ``λ``. A bracket in ``log λ`` is grown
    by decades from ``λ = 1/x`` and Brent's method refines the root to
    ``1e−10`` relative budget accuracy.
    """
    if not x > 0:
        raise ValueError("initial wealth must be positive")
    H = ensemble.H
    ll0 = -np.log(x)
    count = [0]

    def f(ll: float) -> float:
        count[0] += 1
        return _budget(utility, H, np.exp(ll)) / x - 1.0

    lo = hi = ll0
    flo = fhi = f(ll0)
    step = np.log(10.0)
    k = 0
    while flo < 0:
        k += 1
        if k > MAX_DECADES:
            raise CalibrationError("bracket expansion exceeded 1000 decades")
        hi, fhi = lo, flo
        lo -= step
        flo = f(lo)
    while fhi > 0:
        k += 1
        if k > MAX_DECADES:
            raise CalibrationError("bracket expansion exceeded 1000 decades")
        lo, flo = hi, fhi
        hi += step
        fhi = f(hi)
    if flo == 0.0:
        root = lo
    elif fhi == 0.0:
        root = hi
    else:
        root = brentq(f, lo, hi, xtol=1e-15, rtol=1e-15, maxiter=200)
    lam = float(np.exp(root))
    resid = _budget(utility, H, lam) - x
    if not abs(resid) <= BUDGET_RTOL * x:
        raise CalibrationError(f"budget residual {resid:.3e} above tolerance", )
    return CalibratedMultiplier(lam, float(resid), count[0], ensemble.id, float(x))


def _lambda(utility: Utility, ensemble: PathEnsemble, x: float, lam: CalibratedMultiplier | None):
    if lam is None:
        return find_lambda_hat(utility, ensemble, x)
    if lam.ensemble_id != ensemble.id or lam.x != x:
        raise EnsembleMismatchError("multiplier was calibrated on another ensemble or wealth")
    return lam


def _check_y(model: QtsmModel, ensemble: PathEnsemble, y) -> Array:
    y0 = np.asarray(ensemble.y0, dtype=np.float64)
    if y is not None:
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if y.shape != y0.shape or not np.array_equal(y, y0):
            raise EnsembleMismatchError("evaluation point differs from the ensemble's initial factor")
    if ensemble.model_hash != model.fingerprint():
        raise EnsembleMismatchError("ensemble was simulated under another model")
    if ensemble.measure != "physical":
        raise EnsembleMismatchError("portfolio evaluation needs a physical-measure ensemble")
    return y0


def adjusted_estimate(
    samples: Callable[[Sequence[float]], Array],
    utilities: Sequence[Utility],
    lams: Sequence[float],
    H: Array,
    x: float,
) -> McEstimate:
    """Mean of ``samples(lams)`` with a standard error corrected for calibrated multipliers.

    ``samples`` maps a list of multipliers to per-path values ``(N,)`` or
    ``(N, k)``. Each multiplier ``lams[j]`` solves the budget equation of
    ``utilities[j]``.
    """
    lams = [float(v) for v in lams]
    base = np.asarray(samples(lams), dtype=np.float64)
    adj = base.copy()
    for j, (u, lam) in enumerate(zip(utilities, lams)):
        up = list(lams)
        dn = list(lams)
        up[j] = lam * np.exp(_DLOG)
        dn[j] = lam * np.exp(-_DLOG)
        dfbar = (np.asarray(samples(up)).mean(axis=0) - np.asarray(samples(dn)).mean(axis=0)) / (2 * _DLOG)
        z = lam * H
        g = H * u.inverse_marginal(z)
        dg = float(np.mean(H * u.J(z)))
        kappa = dfbar / dg
        resid = g - x
        adj = adj - (resid[:, None] * kappa if base.ndim == 2 else resid * kappa)
    est = estimate(adj)
    return McEstimate(base.mean(axis=0), est.se, est.npaths)


@dataclass(frozen=True)
class FeedbackEstimate:
    value: Array
    se: Array
    lambda_hat: float


def _myopic_samples(utility: Utility, H: Array):
    return lambda lams: -H * utility.J(lams[0] * H)


def _hedging_samples(utility: Utility, H: Array, L: Array):
    def fn(lams):
        z = lams[0] * H
        w = -H * (utility.inverse_marginal(z) + utility.J(z))
        return L * w[:, None]

    return fn


def myopic_feedback(
    utility: Utility,
    model: QtsmModel,
    ensemble: PathEnsemble,
    x: float,
    y=None,
    lam: CalibratedMultiplier | None = None,
) -> FeedbackEstimate:
    """Myopic dollar positions ``(Σᵀ)⁻¹θ(y)·mean(−H J(λ̂H))``."""
    y0 = _check_y(model, ensemble, y)
    lam = _lambda(utility, ensemble, x, lam)
    H = ensemble.H
    est = adjusted_estimate(_myopic_samples(utility, H), [utility], [lam.lambda_hat], H, x)
    direction = model.sigma_inv_t() @ model.theta(y0)
    return FeedbackEstimate(direction * est.mean, np.abs(direction) * est.se, lam.lambda_hat)


def hedging_feedback(
    utility: Utility,
    model: QtsmModel,
    ensemble: PathEnsemble,
    x: float,
    y=None,
    lam: CalibratedMultiplier | None = None,
) -> FeedbackEstimate:
    """Hedging dollar positions ``(Σᵀ)⁻¹Λᵀ·mean(−H L_T (I + J)(λ̂H))``."""
    y0 = _check_y(model, ensemble, y)
    lam = _lambda(utility, ensemble, x, lam)
    H = ensemble.H
    M = model.sigma_inv_t() @ model.Lambda.T
    base = _hedging_samples(utility, H, ensemble.L)

    def mapped(lams):
        return base(lams) @ M.T

    est = adjusted_estimate(mapped, [utility], [lam.lambda_hat], H, x)
    return FeedbackEstimate(np.asarray(est.mean), np.asarray(est.se), lam.lambda_hat)


@dataclass(frozen=True)
class PortfolioDecomposition:
    myopic: Array
    myopic_se: Array
    hedging: Array
    hedging_se: Array
    total: Array
    total_se: Array
    inputs: dict = field(default_factory=dict)


def decompose(
    utility: Utility,
    model: QtsmModel,
    ensemble: PathEnsemble,
    x: float,
    y=None,
) -> PortfolioDecomposition:
    """Myopic, hedging and total dollar positions with standard errors.

    The total's standard error comes from the per-path sum of both terms,
    so it accounts for their correlation.
    """
    y0 = _check_y(model, ensemble, y)
    lam = find_lambda_hat(utility, ensemble, x)
    H = ensemble.H
    Sinv = model.sigma_inv_t()
    dir_m = Sinv @ model.theta(y0)
    M = Sinv @ model.Lambda.T
    my = _myopic_samples(utility, H)
    hd = _hedging_samples(utility, H, ensemble.L)
    est_m = adjusted_estimate(lambda l: my(l)[:, None] * dir_m[None, :], [utility], [lam.lambda_hat], H, x)
    est_h = adjusted_estimate(lambda l: hd(l) @ M.T, [utility], [lam.lambda_hat], H, x)
    est_t = adjusted_estimate(
        lambda l: my(l)[:, None] * dir_m[None, :] + hd(l) @ M.T, [utility], [lam.lambda_hat], H, x
    )
    return PortfolioDecomposition(
        myopic=np.asarray(est_m.mean),
        myopic_se=np.asarray(est_m.se),
        hedging=np.asarray(est_h.mean),
        hedging_se=np.asarray(est_h.se),
        total=np.asarray(est_t.mean),
        total_se=np.asarray(est_t.se),
        inputs={
            "T": ensemble.grid.T,
            "x": float(x),
            "y": y0.tolist(),
            "utility": utility.label,
            "ensemble": ensemble.id,
            "lambda_hat": lam.lambda_hat,
        },
    )


def terminal_wealth_gap(
    utility1: Utility,
    utility2: Utility,
    ensemble: PathEnsemble,
    x: float,
    lam1: CalibratedMultiplier | None = None,
    lam2: CalibratedMultiplier | None = None,
) -> McEstimate:
    """``mean(H |I₁(λ̂¹H) − I₂(λ̂²H)|)`` with a calibration-aware standard error."""
    l1 = _lambda(utility1, ensemble, x, lam1)
    l2 = _lambda(utility2, ensemble, x, lam2)
    H = ensemble.H

    def fn(lams):
        return H * np.abs(utility1.inverse_marginal(lams[0] * H) - utility2.inverse_marginal(lams[1] * H))

    if l1.lambda_hat == l2.lambda_hat and np.array_equal(fn([l1.lambda_hat, l2.lambda_hat]), np.zeros_like(H)):
        return McEstimate(0.0, 0.0, H.size)
    return adjusted_estimate(fn, [utility1, utility2], [l1.lambda_hat, l2.lambda_hat], H, x)


@dataclass(frozen=True)
class DBoundReport:
    lhs: float
    rhs: float
    K: float
    alpha: float
    q: float
    lambda_hat: float
    holds: bool


def d_bound_check(
    utility1: Utility,
    utility2: Utility,
    ensemble: PathEnsemble,
    x: float,
    K: float,
    alpha: float,
    q: float,
    raise_on_violation: bool = True,
) -> DBoundReport:
    """Check ``|mean(H d(λ̂¹H))| ≤ K(mean(H) + (λ̂¹)^α mean(H^{1+α}))``.

    ``d = I₁ − I₂``. The inequality follows pathwise from
    ``|d(z)| ≤ K(1 + z^α)``, so on a consistent ``(K, α)`` it holds exactly on
    the empirical measure. ``q`` is recorded for reporting.
    """
    l1 = find_lambda_hat(utility1, ensemble, x)
    H = ensemble.H
    z = l1.lambda_hat * H
    lhs = abs(float(np.mean(H * (utility1.inverse_marginal(z) - utility2.inverse_marginal(z)))))
    rhs = K * (float(np.mean(H)) + l1.lambda_hat**alpha * float(np.mean(H ** (1.0 + alpha))))
    holds = lhs <= rhs * (1.0 + 1e-12)
    rep = DBoundReport(lhs, rhs, float(K), float(alpha), float(q), l1.lambda_hat, bool(holds))
    if raise_on_violation and not holds:
        raise DBoundViolation(f"|E[H d]| = {lhs:.6e} exceeds bound {rhs:.6e} (K={K}, alpha={alpha})")
    return rep
