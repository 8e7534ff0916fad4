"""Closed-form analytics built on Riccati solutions.

Three exponential-quadratic systems share the template of
:mod:`qtsm_turnpike.riccati`:

* bond prices ``F(T, y) = exp(−α − βᵀy − ½yᵀCy)``,
* the CRRA value function ``V = x^p/p · exp(−½yᵀPy − qᵀy − k)``,
* the moment ``E[H_T^γ]``, which is itself exponential-quadratic because
  ``H^γ`` is a Girsanov density times ``exp(−∫ρ)`` with a quadratic ``ρ``.

``E[H_T^γ]`` for ``γ ∈ (0, 1)`` is read off the CRRA value function with
``p = γ/(γ−1)``; the direct moment system is kept as an independent check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .model import QtsmModel
from .riccati import (
    DEFAULT_STEPS_PER_UNIT,
    AreLimit,
    CompanionCoeffs,
    RiccatiSolution,
    RiccatiSpec,
    are_limit,
    solve_system,
)
from .utility import Log, Power, Utility

Array = NDArray[np.float64]


class DomainError(ValueError):
    """Parameter outside the supported range."""


# ----------------------------------------------------------------------
# System builders
# ----------------------------------------------------------------------


def bond_system(model: QtsmModel, T: float) -> tuple[RiccatiSpec, CompanionCoeffs]:
    """Zero-coupon bond system (C, β, α) under the risk-neutral dynamics."""
    spec = RiccatiSpec(quad=model.LLt, lin=model.B_tilde, src=model.R2, T=T)
    return spec, CompanionCoeffs(drift=model.b_tilde, source=model.r1, scalar_source=model.r0)


def crra_system(model: QtsmModel, p: float, T: float) -> tuple[RiccatiSpec, CompanionCoeffs]:
    """CRRA value-function system (P, q, k) for ``p < 1`` (``p = 0`` is log)."""
    if not p < 1.0:
        raise DomainError("CRRA exponent must be below 1")
    if p > 0.0:
        raise DomainError("only p <= 0 is supported (the system may blow up for 0 < p < 1)")
    qe = p / (p - 1.0)
    LLt = model.LLt
    K0 = LLt / (1.0 - p)
    K1 = model.B - qe * model.Lambda @ model.A
    src = qe * model.A.T @ model.A - p * model.R2
    spec = RiccatiSpec(quad=K0, lin=K1, src=0.5 * (src + src.T), T=T)
    co = CompanionCoeffs(
        drift=model.b - qe * model.Lambda @ model.a,
        source=qe * model.A.T @ model.a - p * model.r1,
        scalar_source=0.5 * qe * float(model.a @ model.a) - p * model.r0,
        diffusion=LLt,
    )
    return spec, co


def moment_system(model: QtsmModel, gamma: float, T: float) -> tuple[RiccatiSpec, CompanionCoeffs]:
    """Direct system for ``E[H_T^γ] = exp(−α^γ − (β^γ)ᵀy − ½yᵀC^γy)``.

    Under the measure with density ``exp(−γ∫θᵀdW − ½γ²∫|θ|²)`` the factor
    has drift ``(b − γΛa) + (B − γΛA)y`` and ``H^γ`` discounts at
    ``γr + ½γ(1−γ)|θ|²``.
    """
    _check_gamma(gamma)
    g, c = gamma, gamma * (1.0 - gamma)
    src = g * model.R2 + c * model.A.T @ model.A
    spec = RiccatiSpec(quad=model.LLt, lin=model.B - g * model.Lambda @ model.A, src=0.5 * (src + src.T), T=T)
    co = CompanionCoeffs(
        drift=model.b - g * model.Lambda @ model.a,
        source=g * model.r1 + c * model.A.T @ model.a,
        scalar_source=g * model.r0 + 0.5 * c * float(model.a @ model.a),
    )
    return spec, co


def _check_gamma(gamma: float) -> None:
    if not 0.0 <= gamma <= 1.0:
        raise DomainError(f"gamma must lie in [0, 1], got {gamma}")


def _crra_p(gamma: float) -> float:
    return gamma / (gamma - 1.0)


# ----------------------------------------------------------------------
# Horizon curves
# ----------------------------------------------------------------------


def _aligned(horizons: Array, steps_per_unit: int) -> bool:
    n = horizons * steps_per_unit
    return bool(np.all(np.abs(n - np.round(n)) < 1e-9 * np.maximum(1.0, n)))


def _solve_horizons(builder, horizons, steps_per_unit: int):
    """``(α, β, C)`` at ``t = 0`` for each horizon, solving once when possible."""
    horizons = np.atleast_1d(np.asarray(horizons, dtype=np.float64))
    if np.any(horizons < 0):
        raise DomainError("horizons must be nonnegative")
    m = builder(0.0)[0].m
    alphas = np.zeros(horizons.size)
    betas = np.zeros((horizons.size, m))
    Cs = np.zeros((horizons.size, m, m))
    Tmax = float(horizons.max()) if horizons.size else 0.0
    if Tmax == 0.0:
        return alphas, betas, Cs
    if _aligned(horizons, steps_per_unit):
        spec, co = builder(Tmax)
        sol = solve_system(spec, co, steps_per_unit)
        for i, T in enumerate(horizons):
            if T == 0.0:
                continue
            C, b, a = sol.at_tau(T)
            alphas[i], betas[i], Cs[i] = a, b, C
    else:
        for i, T in enumerate(horizons):
            if T == 0.0:
                continue
            spec, co = builder(T)
            sol = solve_system(spec, co, steps_per_unit)
            C, b, a = sol.at(0.0)
            alphas[i], betas[i], Cs[i] = a, b, C
    return alphas, betas, Cs


def _expquad(alpha, beta, C, y) -> Array:
    y = np.asarray(y, dtype=np.float64)
    return alpha + beta @ y + 0.5 * np.einsum("i,...ij,j->...", y, C, y)


@dataclass(frozen=True)
class BondCurve:
    """Zero-coupon bond coefficients at ``t = 0`` for several horizons."""

    horizons: Array
    alpha0: Array
    beta0: Array
    C0: Array

    def price(self, T: float, y) -> float:
        i = int(np.argmin(np.abs(self.horizons - T)))
        if abs(self.horizons[i] - T) > 1e-12 * max(1.0, T):
            raise DomainError(f"horizon {T} not on this curve")
        return float(np.exp(-_expquad(self.alpha0[i], self.beta0[i], self.C0[i], y)))

    def prices(self, y) -> Array:
        return np.exp(-_expquad(self.alpha0, self.beta0, self.C0, y))


def bond_curve(model: QtsmModel, horizons, steps_per_unit: int = DEFAULT_STEPS_PER_UNIT) -> BondCurve:
    horizons = np.atleast_1d(np.asarray(horizons, dtype=np.float64))
    a, b, C = _solve_horizons(lambda T: bond_system(model, T), horizons, steps_per_unit)
    return BondCurve(horizons, a, b, C)


def bond_price(model: QtsmModel, T: float, y, steps_per_unit: int = DEFAULT_STEPS_PER_UNIT) -> float:
    """Zero-coupon bond price ``E[H_T]`` at ``t = 0`` for initial factor ``y``."""
    if T == 0:
        return 1.0
    return bond_curve(model, [T], steps_per_unit).price(T, y)


def eh_gamma_curve(
    model: QtsmModel, gamma: float, horizons, y, steps_per_unit: int = DEFAULT_STEPS_PER_UNIT
) -> Array:
    """``E[H_T^γ]`` for each horizon, via the CRRA value function for ``γ ∈ (0, 1)``."""
    _check_gamma(gamma)
    horizons = np.atleast_1d(np.asarray(horizons, dtype=np.float64))
    if gamma == 0.0:
        return np.ones(horizons.size)
    if gamma == 1.0:
        return bond_curve(model, horizons, steps_per_unit).prices(y)
    p = _crra_p(gamma)
    k, q, P = _solve_horizons(lambda T: crra_system(model, p, T), horizons, steps_per_unit)
    return np.exp(-_expquad(k, q, P, y) / (1.0 - p))


def eh_gamma_closed_form(
    model: QtsmModel, gamma: float, T: float, y, steps_per_unit: int = DEFAULT_STEPS_PER_UNIT
) -> float:
    """``E[H_T^γ]`` for ``γ ∈ [0, 1]``.

    ``γ = 0`` gives 1, ``γ = 1`` the bond price, and for ``γ ∈ (0, 1)``
    ``exp(−(½yᵀP(0;T)y + q(0;T)ᵀy + k(0;T))/(1−p))`` with ``p = γ/(γ−1)``.
    """
    _check_gamma(gamma)
    if T == 0:
        return 1.0
    return float(eh_gamma_curve(model, gamma, [T], y, steps_per_unit)[0])


def eh_gamma_direct(
    model: QtsmModel, gamma: float, horizons, y, steps_per_unit: int = DEFAULT_STEPS_PER_UNIT
) -> Array:
    """``E[H_T^γ]`` from :func:`moment_system`; an independent route to the same values."""
    _check_gamma(gamma)
    a, b, C = _solve_horizons(lambda T: moment_system(model, gamma, T), horizons, steps_per_unit)
    return np.exp(-_expquad(a, b, C, y))


def long_run_yield(model: QtsmModel) -> AreLimit:
    """Fixed point of the bond system; ``scalar_rate`` is the asymptotic yield.

    ``E[H_T]`` decays like ``exp(−scalar_rate·T)`` for large ``T``.
    """
    spec, co = bond_system(model, 1.0)
    return are_limit(spec, co)


# ----------------------------------------------------------------------
# CRRA feedback
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class CrraFeedback:
    """Optimal CRRA dollar positions split into myopic and hedging parts."""

    myopic: Array
    hedging: Array

    @property
    def total(self) -> Array:
        return self.myopic + self.hedging


def crra_exponent(utility: Utility | float) -> float:
    if isinstance(utility, Log):
        return 0.0
    if isinstance(utility, Power):
        return utility.p
    if isinstance(utility, (int, float)):
        return float(utility)
    raise DomainError("crra_feedback needs a Power or Log utility")


def crra_solution(
    model: QtsmModel, p: float, T: float, steps_per_unit: int = DEFAULT_STEPS_PER_UNIT
) -> RiccatiSolution:
    spec, co = crra_system(model, p, T)
    return solve_system(spec, co, steps_per_unit)


def crra_feedback(
    model: QtsmModel,
    utility: Utility | float,
    t: float,
    T: float,
    x: float,
    y,
    steps_per_unit: int = DEFAULT_STEPS_PER_UNIT,
) -> CrraFeedback:
    """Optimal dollar positions ``x/(1−p)·(Σᵀ)⁻¹[θ(y) − Λᵀ(P(t;T)y + q(t;T))]``."""
    if not x > 0:
        raise DomainError("wealth must be positive")
    p = crra_exponent(utility)
    y = np.asarray(y, dtype=np.float64)
    Sinv = model.sigma_inv_t()
    scale = x / (1.0 - p)
    myopic = scale * Sinv @ model.theta(y)
    if T - t <= 0:
        return CrraFeedback(myopic, np.zeros(model.n))
    sol = crra_solution(model, p, T - t, steps_per_unit)
    P, q, _ = sol.at(0.0)
    hedging = -scale * Sinv @ model.Lambda.T @ (P @ y + q)
    return CrraFeedback(myopic, hedging)


# ----------------------------------------------------------------------
# Myopic measures
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class MyopicMeasureCoeffs:
    """Time-dependent factor drift ``g(t) + K(t)y`` under the myopic measure ``Q^γ_T``."""

    gamma: float
    T: float
    tgrid: Array
    drift_intercept: Array
    drift_slope: Array
    Lambda: Array
    C: Array
    beta: Array

    def at(self, t) -> tuple[Array, Array]:
        """Linear interpolation of ``(g(t), K(t))`` on the Riccati grid."""
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        m = self.drift_intercept.shape[1]
        g = np.stack([np.interp(t, self.tgrid, self.drift_intercept[:, i]) for i in range(m)], axis=-1)
        K = np.empty((t.size, m, m))
        for i in range(m):
            for j in range(m):
                K[:, i, j] = np.interp(t, self.tgrid, self.drift_slope[:, i, j])
        return g, K

    def expected_L(self, t_index: int, y) -> Array:
        """``γ·E^{Q^γ}[L_T] = β^γ(t) + C^γ(t)y`` at grid node ``t_index``."""
        return self.beta[t_index] + self.C[t_index] @ np.asarray(y, dtype=np.float64)


def myopic_measure_coeffs(
    model: QtsmModel, gamma: float, T: float, steps_per_unit: int = DEFAULT_STEPS_PER_UNIT
) -> MyopicMeasureCoeffs:
    """Drift coefficients of the factor under the myopic measure of order ``γ``.

    ``K(t) = B − γΛA − ΛΛᵀC^γ(t;T)`` and ``g(t) = b − γΛa − ΛΛᵀβ^γ(t;T)``
    where ``(C^γ, β^γ)`` is ``(0, 0)`` for ``γ = 0``, the bond pair for
    ``γ = 1`` and ``(1−γ)(P, q)`` with ``p = γ/(γ−1)`` in between.
    """
    _check_gamma(gamma)
    m = model.m
    N = max(1, int(np.ceil(T * steps_per_unit - 1e-9)))
    if gamma == 0.0 or T == 0.0:
        tgrid = np.linspace(0.0, T, N + 1)
        C = np.zeros((N + 1, m, m))
        beta = np.zeros((N + 1, m))
    elif gamma == 1.0:
        spec, co = bond_system(model, T)
        sol = solve_system(spec, co, steps_per_unit)
        tgrid, C, beta = sol.tgrid, sol.Cpath, sol.betapath
    else:
        sol = crra_solution(model, _crra_p(gamma), T, steps_per_unit)
        tgrid = sol.tgrid
        C = (1.0 - gamma) * sol.Cpath
        beta = (1.0 - gamma) * sol.betapath
    LLt = model.LLt
    slope = model.B - gamma * model.Lambda @ model.A - np.einsum("ij,tjk->tik", LLt, C)
    intercept = model.b - gamma * model.Lambda @ model.a - beta @ LLt.T
    if gamma == 0.0:
        slope = np.broadcast_to(model.B, slope.shape).copy()
        intercept = np.broadcast_to(model.b, intercept.shape).copy()
    return MyopicMeasureCoeffs(
        gamma=float(gamma),
        T=float(T),
        tgrid=tgrid,
        drift_intercept=intercept,
        drift_slope=slope,
        Lambda=model.Lambda,
        C=C,
        beta=beta,
    )
