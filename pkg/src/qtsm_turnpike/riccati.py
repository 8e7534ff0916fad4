"""Terminal-value matrix Riccati systems and their companion linear equations.

All systems are integrated in backward time ``τ = T − t`` where they become
initial-value problems starting from zero:

    dC/dτ = −C·quad·C + linᵀC + C·lin + src
    dβ/dτ = (lin − quad·C)ᵀβ + C·drift + source
    dα/dτ = ½ tr(diffusion·C) − ½ βᵀ·quad·β + driftᵀβ + scalar_source

The bond system, the CRRA value-function system and the myopic-measure
system are all instances of this template (see :mod:`qtsm_turnpike.pricing`).
Because the coefficients are constant, the solution for horizon ``T`` at time
``t`` only depends on ``τ``; one integration up to the largest horizon serves
every shorter horizon.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba as nb
import numpy as np
from numpy.typing import NDArray
from scipy.integrate import solve_ivp

Array = NDArray[np.float64]

DEFAULT_STEPS_PER_UNIT = 2000
STABILITY_TOL = 1e-10
PSD_TOL = 1e-9


class RiccatiSolverError(RuntimeError):
    """The integrator failed or produced a path violating the solution invariants."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class AreConvergenceError(RiccatiSolverError):
    """Long-horizon integration did not reach a fixed point within the horizon cap."""


def is_stable(M, tol: float = STABILITY_TOL) -> tuple[bool, float]:
    """Return ``(max Re eig(M) < −tol, max Re eig(M))``.

    Examples
    --------
    >>> is_stable([[-2.0, 1.0], [0.0, -3.0]])
    (True, -2.0)
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"square matrix required, got shape {M.shape}")
    max_re = float(np.max(np.linalg.eigvals(M).real))
    return bool(max_re < -tol), max_re


def _sym(M: Array) -> Array:
    return 0.5 * (M + M.T)


@dataclass(frozen=True)
class RiccatiSpec:
    """Coefficients of ``dC/dτ = −C·quad·C + linᵀC + C·lin + src``."""

    quad: Array
    lin: Array
    src: Array
    T: float

    def __post_init__(self):
        quad = np.atleast_2d(np.asarray(self.quad, dtype=np.float64))
        lin = np.atleast_2d(np.asarray(self.lin, dtype=np.float64))
        src = np.atleast_2d(np.asarray(self.src, dtype=np.float64))
        m = lin.shape[0]
        for name, M in (("quad", quad), ("lin", lin), ("src", src)):
            if M.shape != (m, m):
                raise ValueError(f"{name}: expected shape {(m, m)}, got {M.shape}")
        if np.max(np.abs(src - src.T)) > 1e-12 * max(1.0, np.max(np.abs(src))):
            raise ValueError("src must be symmetric")
        if np.linalg.eigvalsh(_sym(src))[0] < -1e-10:
            raise ValueError("src must be positive semidefinite")
        if not self.T >= 0:
            raise ValueError("horizon T must be nonnegative")
        object.__setattr__(self, "quad", _sym(quad))
        object.__setattr__(self, "lin", lin)
        object.__setattr__(self, "src", _sym(src))
        object.__setattr__(self, "T", float(self.T))

    @property
    def m(self) -> int:
        return self.lin.shape[0]

    def rhs(self, C: Array) -> Array:
        """``dC/dτ`` at ``C``, symmetrized."""
        return _sym(-C @ self.quad @ C + self.lin.T @ C + C @ self.lin + self.src)


@dataclass(frozen=True)
class CompanionCoeffs:
    """Source terms of the linear companion equations.

    ``diffusion`` multiplies ``C`` inside the trace; it defaults to ``quad``
    (as in the bond system) but differs for the CRRA system.
    """

    drift: Array
    source: Array
    scalar_source: float = 0.0
    diffusion: Array | None = None

    def resolved(self, spec: RiccatiSpec) -> "CompanionCoeffs":
        m = spec.m
        drift = np.asarray(self.drift, dtype=np.float64).reshape(m)
        source = np.asarray(self.source, dtype=np.float64).reshape(m)
        diff = spec.quad if self.diffusion is None else np.asarray(self.diffusion, dtype=np.float64)
        if diff.shape != (m, m):
            raise ValueError("diffusion has the wrong shape")
        return CompanionCoeffs(drift, source, float(self.scalar_source), diff)


@dataclass
class RiccatiSolution:
    """Grid solution of a terminal-value Riccati system.

    Arrays are indexed by ascending calendar time ``tgrid`` on ``[0, T]``; the
    terminal node ``tgrid[-1] = T`` carries the exact zero terminal data.
    """

    tgrid: Array
    Cpath: Array
    betapath: Array | None = None
    scalarpath: Array | None = None
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> float:
        return float(self.tgrid[-1])

    @property
    def h(self) -> float:
        return float(self.tgrid[1] - self.tgrid[0]) if self.tgrid.size > 1 else 0.0

    def at_tau(self, tau: float) -> tuple[Array, Array | None, float | None]:
        """Values at backward time ``tau`` (must coincide with a grid node)."""
        j = self._node(self.T - tau)
        beta = None if self.betapath is None else self.betapath[j]
        scalar = None if self.scalarpath is None else float(self.scalarpath[j])
        return self.Cpath[j], beta, scalar

    def at(self, t: float) -> tuple[Array, Array | None, float | None]:
        """Values at calendar time ``t`` (must coincide with a grid node)."""
        return self.at_tau(self.T - t)

    def _node(self, t: float) -> int:
        j = int(round((t - self.tgrid[0]) / self.h)) if self.h > 0 else 0
        if not 0 <= j < self.tgrid.size or abs(self.tgrid[j] - t) > 1e-9 * max(1.0, self.T):
            raise ValueError(f"t={t} is not a node of the solution grid")
        return j

    def to_rows(self) -> list[list[float]]:
        """Rows ``(t, vec(C) row-major, β, scalar)`` for CSV export."""
        rows = []
        m = self.Cpath.shape[1]
        for j, t in enumerate(self.tgrid):
            row = [float(t)] + self.Cpath[j].reshape(-1).tolist()
            row += (self.betapath[j].tolist() if self.betapath is not None else [0.0] * m)
            row.append(float(self.scalarpath[j]) if self.scalarpath is not None else 0.0)
            rows.append(row)
        return rows

    def header(self, names: tuple[str, str, str] = ("C", "beta", "alpha")) -> list[str]:
        m = self.Cpath.shape[1]
        cols = ["t"] + [f"{names[0]}_{i}{j}" for i in range(m) for j in range(m)]
        cols += [f"{names[1]}_{i}" for i in range(m)]
        return cols + [names[2]]


def _nsteps(T: float, steps_per_unit: int) -> int:
    return max(1, int(np.ceil(T * steps_per_unit - 1e-9)))


@nb.njit(cache=True)
def _rhs_nb(C, quad, lin, src, out):
    m = C.shape[0]
    CQ = C @ quad
    R = -(CQ @ C) + lin.T @ C + C @ lin + src
    for i in range(m):
        for j in range(m):
            out[i, j] = 0.5 * (R[i, j] + R[j, i])


@nb.njit(cache=True)
def _rk4_path(quad, lin, src, h, N):
    m = quad.shape[0]
    Cs = np.zeros((N + 1, m, m))
    C = np.zeros((m, m))
    k1 = np.empty((m, m))
    k2 = np.empty((m, m))
    k3 = np.empty((m, m))
    k4 = np.empty((m, m))
    for j in range(N):
        _rhs_nb(C, quad, lin, src, k1)
        _rhs_nb(C + 0.5 * h * k1, quad, lin, src, k2)
        _rhs_nb(C + 0.5 * h * k2, quad, lin, src, k3)
        _rhs_nb(C + h * k3, quad, lin, src, k4)
        Cn = C + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        C = 0.5 * (Cn + Cn.T)
        Cs[j + 1] = C
    return Cs


@nb.njit(cache=True)
def _companion_path(Ctau, quad, lin, src, diff, drift, source, s0, h):
    N = Ctau.shape[0] - 1
    m = quad.shape[0]
    betas = np.zeros((N + 1, m))
    scal = np.zeros(N + 1)
    beta = np.zeros(m)
    alpha = 0.0
    r0 = np.empty((m, m))
    r1 = np.empty((m, m))
    for j in range(N):
        C0 = Ctau[j]
        C1 = Ctau[j + 1]
        _rhs_nb(C0, quad, lin, src, r0)
        _rhs_nb(C1, quad, lin, src, r1)
        Cm = 0.5 * (C0 + C1) + (h / 8.0) * (r0 - r1)
        ks = np.empty((4, m))
        As = np.empty(4)
        b = beta.copy()
        for s in range(4):
            C = C0 if s == 0 else (C1 if s == 3 else Cm)
            if s == 1 or s == 2:
                b = beta + 0.5 * h * ks[s - 1]
            elif s == 3:
                b = beta + h * ks[2]
            ks[s] = (lin - quad @ C).T @ b + C @ drift + source
            As[s] = 0.5 * np.trace(diff @ C) - 0.5 * (b @ (quad @ b)) + drift @ b + s0
        beta = beta + (h / 6.0) * (ks[0] + 2 * ks[1] + 2 * ks[2] + ks[3])
        alpha = alpha + (h / 6.0) * (As[0] + 2 * As[1] + 2 * As[2] + As[3])
        betas[j + 1] = beta
        scal[j + 1] = alpha
    return betas, scal


def _rk4_matrix(spec: RiccatiSpec, C: Array, h: float) -> Array:
    k1 = spec.rhs(C)
    k2 = spec.rhs(C + 0.5 * h * k1)
    k3 = spec.rhs(C + 0.5 * h * k2)
    k4 = spec.rhs(C + h * k3)
    return _sym(C + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4))


def solve_terminal_riccati(
    spec: RiccatiSpec,
    steps_per_unit: int = DEFAULT_STEPS_PER_UNIT,
    method: str = "rk4",
    rtol: float = 1e-12,
    atol: float = 1e-14,
) -> RiccatiSolution:
    """Integrate the matrix Riccati equation backward from ``C(T) = 0``.

    Parameters
    ----------
    spec : RiccatiSpec
    steps_per_unit : int
        Grid resolution; the step is ``T / ceil(T·steps_per_unit)``.
    method : {"rk4", "adaptive"}
        ``"rk4"`` is the classical fixed-step fourth-order scheme. ``"adaptive"``
        integrates with an error-controlled Dormand–Prince 8(5,3) method and
        reports the values on the same grid.

    Returns
    -------
    RiccatiSolution
        C-path only; pass it to :func:`solve_companion_linear` for β and α.

    Raises
    ------
    RiccatiSolverError
        If the path leaves the positive semidefinite cone, becomes non-finite,
        or the adaptive integrator fails.
    """
    N = _nsteps(spec.T, steps_per_unit)
    h = spec.T / N
    m = spec.m
    taus = np.arange(N + 1) * h
    Cs = np.zeros((N + 1, m, m))
    if method == "rk4":
        Cs = _rk4_path(spec.quad, np.ascontiguousarray(spec.lin), spec.src, h, N)
    elif method == "adaptive":
        if spec.T > 0:

            def f(_tau, c):
                return spec.rhs(c.reshape(m, m)).reshape(-1)

            res = solve_ivp(f, (0.0, spec.T), np.zeros(m * m), method="DOP853", t_eval=taus, rtol=rtol, atol=atol)
            if not res.success:
                raise RiccatiSolverError(f"adaptive integration failed: {res.message}", {"status": res.status})
            Cs = np.array([_sym(c.reshape(m, m)) for c in res.y.T])
            Cs[0] = 0.0
    else:
        raise ValueError(f"unknown method {method!r}")
    if not np.all(np.isfinite(Cs)):
        bad = int(np.argmax(~np.all(np.isfinite(Cs.reshape(N + 1, -1)), axis=1)))
        raise RiccatiSolverError("non-finite Riccati solution", {"tau": float(taus[bad])})
    min_eig = float(np.min(np.linalg.eigvalsh(Cs))) if m > 0 else 0.0
    if min_eig < -PSD_TOL:
        raise RiccatiSolverError("Riccati path left the PSD cone", {"min_eigenvalue": min_eig})
    # store in ascending calendar time: node j ↔ t = j·h, τ = T − t
    tgrid = np.arange(N + 1) * h
    tgrid[-1] = spec.T
    return RiccatiSolution(
        tgrid=tgrid,
        Cpath=Cs[::-1].copy(),
        meta={"method": method, "nsteps": N, "h": h, "min_eigenvalue": min_eig, "spec": spec},
    )


def solve_companion_linear(
    spec: RiccatiSpec,
    solution: RiccatiSolution,
    coeffs: CompanionCoeffs,
) -> RiccatiSolution:
    """Solve the linear companion equations for ``β`` and the scalar term.

    The equations are integrated with the same fixed-step RK4 scheme on the
    grid of ``solution``. Values of ``C`` between nodes come from cubic
    Hermite interpolation using the Riccati right-hand side, which keeps the
    scheme fourth order.

    Returns
    -------
    RiccatiSolution
        A copy of ``solution`` with ``betapath`` and ``scalarpath`` filled.
    """
    meta_spec = solution.meta.get("spec")
    if meta_spec is not None and meta_spec is not spec:
        same = (
            np.array_equal(meta_spec.quad, spec.quad)
            and np.array_equal(meta_spec.lin, spec.lin)
            and np.array_equal(meta_spec.src, spec.src)
            and meta_spec.T == spec.T
        )
        if not same:
            raise ValueError("solution was computed for a different RiccatiSpec")
    co = coeffs.resolved(spec)
    N = solution.tgrid.size - 1
    m = spec.m
    if solution.Cpath.shape != (N + 1, m, m):
        raise ValueError("grid mismatch between solution and spec")
    Ctau = solution.Cpath[::-1]
    h = solution.h
    quad, lin, diff = spec.quad, spec.lin, co.diffusion
    drift, source, s0 = co.drift, co.source, co.scalar_source

    betas, scal = _companion_path(
        np.ascontiguousarray(Ctau), quad, np.ascontiguousarray(lin), spec.src,
        np.ascontiguousarray(diff), drift, source, float(s0), h,
    )  # fmt: skip
    return RiccatiSolution(
        tgrid=solution.tgrid,
        Cpath=solution.Cpath,
        betapath=betas[::-1].copy(),
        scalarpath=scal[::-1].copy(),
        meta=dict(solution.meta, companion=co),
    )


def solve_system(
    spec: RiccatiSpec,
    coeffs: CompanionCoeffs | None = None,
    steps_per_unit: int = DEFAULT_STEPS_PER_UNIT,
) -> RiccatiSolution:
    """Convenience wrapper: Riccati path followed by the companion equations."""
    sol = solve_terminal_riccati(spec, steps_per_unit)
    if coeffs is None:
        return sol
    return solve_companion_linear(spec, sol, coeffs)


def loewner_monotone(solution: RiccatiSolution, npoints: int = 50, tol: float = 1e-9) -> tuple[bool, float]:
    """Check ``C(t₂) ⪯ C(t₁)`` for ``t₁ ≤ t₂`` on ``npoints`` evenly spread nodes.

    Returns ``(holds, worst)`` where ``worst`` is the most negative eigenvalue
    of ``C(t₁) − C(t₂)`` over consecutive pairs of the sub-grid.
    """
    idx = np.unique(np.linspace(0, solution.tgrid.size - 1, npoints).round().astype(int))
    worst = np.inf
    for i, j in zip(idx[:-1], idx[1:]):
        D = _sym(solution.Cpath[i] - solution.Cpath[j])
        worst = min(worst, float(np.linalg.eigvalsh(D)[0]))
    return bool(worst >= -tol), float(worst)


@dataclass(frozen=True)
class AreLimit:
    """Long-horizon fixed point of a Riccati system and its certificates."""

    Cinf: Array
    betainf: Array
    residual: float
    beta_residual: float
    closed_loop_max_realpart: float
    horizon_used: float
    scalar_rate: float


def are_limit(
    spec: RiccatiSpec,
    coeffs: CompanionCoeffs | None = None,
    step: float = 0.01,
    tol: float = 1e-10,
    horizon_cap: float = 500.0,
) -> AreLimit:
    """Integrate ``(C, β)`` forward in ``τ`` until ``‖dC/dτ‖∞, ‖dβ/dτ‖∞ < tol``.

    The RK4 step does not change the fixed point, so a coarser step than the
    grid solver is used. ``scalar_rate`` is the limiting growth rate of the
    scalar term, ``dα/dτ`` at the fixed point.

    Raises
    ------
    AreConvergenceError
        When no fixed point is reached before ``horizon_cap``; the exception's
        diagnostics carry a trace of the residual norm.
    """
    m = spec.m
    co = (coeffs or CompanionCoeffs(np.zeros(m), np.zeros(m))).resolved(spec)
    quad, lin = spec.quad, spec.lin

    def fb(C, beta):
        return (lin - quad @ C).T @ beta + C @ co.drift + co.source

    C = np.zeros((m, m))
    beta = np.zeros(m)
    tau = 0.0
    trace = []
    nsteps = int(np.ceil(horizon_cap / step))
    for k in range(nsteps):
        rC = spec.rhs(C)
        rb = fb(C, beta)
        res = max(float(np.max(np.abs(rC))), float(np.max(np.abs(rb))))
        if k % 100 == 0:
            trace.append((tau, res))
        if res < tol:
            break
        Cn = _rk4_matrix(spec, C, step)
        Cm = 0.5 * (C + Cn) + (step / 8.0) * (rC - spec.rhs(Cn))
        k1 = rb
        k2 = fb(Cm, beta + 0.5 * step * k1)
        k3 = fb(Cm, beta + 0.5 * step * k2)
        k4 = fb(Cn, beta + step * k3)
        beta = beta + (step / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        C = Cn
        tau += step
    else:
        raise AreConvergenceError(
            f"no fixed point within horizon {horizon_cap}", {"residual_trace": trace}
        )
    residual = float(np.max(np.abs(spec.rhs(C))))
    beta_res = float(np.max(np.abs(fb(C, beta))))
    _, cl = is_stable(lin - quad @ C)
    rate = 0.5 * np.trace(co.diffusion @ C) - 0.5 * beta @ quad @ beta + co.drift @ beta + co.scalar_source
    return AreLimit(
        Cinf=C,
        betainf=beta,
        residual=residual,
        beta_residual=beta_res,
        closed_loop_max_realpart=cl,
        horizon_used=tau,
        scalar_rate=float(rate),
    )
