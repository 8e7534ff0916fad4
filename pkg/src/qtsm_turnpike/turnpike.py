"""Turnpike rate experiments.

An experiment compares a general utility ``U₁`` with a power or log
reference ``U₂`` over a grid of horizons. For every horizon both investors
are calibrated on one shared ensemble and the distances between their
strategies are measured:

* ``myopic``: ``|π̂^{1,M} − π̂^{2,M}|``
* ``hedging``: ``|π̂^{1,H} − π̂^{2,H}|``
* ``wealth_gap``: ``E[H_T |X̂¹_T − X̂²_T|]``
* ``proportions``: ``sup_x |π̂¹(x)/x − π̂²(x)/x|`` over a wealth grid

Each gap is then regressed on ``E[H_T]`` in log-log coordinates and the
slope is compared with the predicted exponent.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import stats

from .model import QtsmModel, validate
from .montecarlo import McEstimate, PathEnsemble, simulate_functionals
from .portfolio import (
    CalibratedMultiplier,
    adjusted_estimate,
    d_bound_check,
    find_lambda_hat,
    terminal_wealth_gap,
)
from .pricing import bond_curve, long_run_yield
from .utility import (
    LinearSharing,
    ParetoCollective,
    Power,
    Utility,
    UtilityDomainError,
    estimate_diff_bound,
    reference_exponent,
    same_preferences,
    theoretical_alpha,
)

Array = NDArray[np.float64]
log = logging.getLogger(__name__)

COMPONENTS = ("myopic", "hedging", "wealth_gap", "proportions")
NOISE_FACTOR = 3.0
MIN_ROWS = 4


class InsufficientSignalError(ValueError):
    """Too few horizons have a gap clearly above its noise level."""


class ExperimentRefused(ValueError):
    """The model does not meet the preconditions of a rate experiment."""


@dataclass(frozen=True)
class ExperimentConfig:
    """Inputs of a rate experiment.

    ``xgrid`` is only used by the ``proportions`` component; by default it
    holds five log-spaced wealth levels on ``[x/10, x]``.
    """

    model: QtsmModel
    u1: Utility
    u2: Utility
    x: float
    y: Sequence[float]
    Tgrid: Sequence[float]
    npaths: int
    steps_per_unit: int
    seed: int
    components: tuple[str, ...] = ("myopic", "hedging", "wealth_gap")
    threads: int = 1
    tolerance: float = 0.2
    beta: float | None = None
    xgrid: Sequence[float] | None = None

    def __post_init__(self):
        T = np.asarray(self.Tgrid, dtype=np.float64)
        if T.ndim != 1 or T.size < 5 or np.any(np.diff(T) <= 0) or T[0] <= 0:
            raise ValueError("Tgrid must hold at least 5 ascending positive horizons")
        if not self.x > 0:
            raise ValueError("initial wealth must be positive")
        unknown = set(self.components) - set(COMPONENTS)
        if unknown:
            raise ValueError(f"unknown components {sorted(unknown)}")
        reference_exponent(self.u2)
        object.__setattr__(self, "Tgrid", tuple(float(t) for t in T))
        object.__setattr__(self, "y", tuple(float(v) for v in np.asarray(self.y, dtype=np.float64).reshape(-1)))
        object.__setattr__(self, "components", tuple(c for c in COMPONENTS if c in self.components))

    @property
    def wealth_grid(self) -> Array:
        if self.xgrid is not None:
            return np.asarray(self.xgrid, dtype=np.float64)
        return np.logspace(np.log10(self.x / 10.0), np.log10(self.x), 5)


# ----------------------------------------------------------------------
# Theory
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class Theory:
    exponent: float
    alpha: float
    q: float
    supremum: bool
    note: str


def _gammas(exponents: Sequence[float]) -> tuple[float, float]:
    return 1.0 - exponents[-2], 1.0 - exponents[-1]


def exponent_from_alpha(alpha: float, q: float) -> float:
    """``1 − α/(q−1)`` for ``α`` in ``(q−1, 0]``."""
    if not (q - 1.0 < alpha <= 0.0):
        raise UtilityDomainError(f"alpha={alpha} outside ({q - 1.0}, 0]")
    return 1.0 - alpha / (q - 1.0)


def theory_for(u1: Utility, u2: Utility, beta: float | None = None) -> Theory:
    """Predicted exponent for the pair, with the ``(α, q)`` it comes from."""
    p2 = reference_exponent(u2)
    q = p2 / (p2 - 1.0)
    alpha = theoretical_alpha(u1, u2, beta)
    generic = exponent_from_alpha(alpha, q)
    if isinstance(u1, ParetoCollective) and len(u1.exponents) > 1 and u1.exponents[-1] == p2:
        g1, g2 = _gammas(u1.exponents)
        return Theory((g1 - g2) / g1, alpha, q, False, "pareto")
    if isinstance(u1, LinearSharing) and len(u1.exponents) > 1 and u1.exponents[-1] == p2:
        g1, g2 = _gammas(u1.exponents)
        return Theory(min(1.0, g1 - g2), alpha, q, True, "linear sharing, open-interval supremum")
    return Theory(generic, alpha, q, False, "generic")


def theoretical_exponent(u1: Utility, u2: Utility, beta: float | None = None) -> float:
    """Predicted convergence exponent ``s`` with ``gap = O(E[H_T]^s)``.

    Examples
    --------
    >>> theoretical_exponent(ParetoCollective((0.5, 0.5), (-2.0, -1.0)), Power(-1.0))
    0.3333333333333333
    """
    return theory_for(u1, u2, beta).exponent


# ----------------------------------------------------------------------
# Rate fit
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class RateFit:
    slope: float
    halfwidth: float
    intercept: float
    n_used: int
    n_dropped: int


def fit_rate(EH, gap, se=None, noise_factor: float = NOISE_FACTOR) -> RateFit:
    """OLS slope of ``log gap`` on ``log EH`` with a 95% half-width.

    Rows with ``gap ≤ noise_factor·se`` are dropped first. At least four
    rows must remain.
    """
    EH = np.asarray(EH, dtype=np.float64)
    gap = np.asarray(gap, dtype=np.float64)
    se = np.zeros_like(gap) if se is None else np.asarray(se, dtype=np.float64)
    keep = np.isfinite(gap) & (gap > noise_factor * se) & (gap > 0) & (EH > 0)
    n = int(keep.sum())
    if n < MIN_ROWS:
        raise InsufficientSignalError(f"only {n} of {gap.size} rows exceed {noise_factor:g}x their standard error")
    xs = np.log(EH[keep])
    ys = np.log(gap[keep])
    res = stats.linregress(xs, ys)
    half = float(stats.t.ppf(0.975, n - 2) * res.stderr)
    return RateFit(float(res.slope), half, float(res.intercept), n, int(gap.size - n))


def verdict_for(slope: float, theory: float, tolerance: float) -> str:
    """``PASS`` near the theory, ``STEEPER`` for faster decay, ``FAIL`` otherwise.

    The predicted exponents are upper-bound rates, so a clearly steeper
    empirical decay is flagged rather than counted as a failure.
    """
    if abs(slope - theory) <= tolerance:
        return "PASS"
    if slope > theory + tolerance:
        return "STEEPER"
    return "FAIL"


# ----------------------------------------------------------------------
# Per-horizon gaps
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class GapRow:
    T: float
    EH: float
    gaps: dict[str, McEstimate]
    lambda1: float
    lambda2: float
    d_lhs: float
    d_rhs: float
    d_holds: bool
    holder_ok: bool


def _myopic_gap(model, y, u1, u2, H, x, l1, l2) -> McEstimate:
    direction = model.sigma_inv_t() @ model.theta(y)

    def fn(lams):
        return H * (u2.J(lams[1] * H) - u1.J(lams[0] * H))

    est = adjusted_estimate(fn, [u1, u2], [l1, l2], H, x)
    norm = float(np.linalg.norm(direction))
    return McEstimate(abs(float(est.mean)) * norm, float(est.se) * norm, est.npaths)


def _hedging_vectors(model, u1, u2, H, L):
    M = model.sigma_inv_t() @ model.Lambda.T

    def fn(lams):
        z1 = lams[0] * H
        z2 = lams[1] * H
        w = H * (u2.inverse_marginal(z2) + u2.J(z2) - u1.inverse_marginal(z1) - u1.J(z1))
        return (L * w[:, None]) @ M.T

    return fn


def _norm_estimate(fn, utilities, lams, H, x) -> McEstimate:
    """Norm of a vector mean; its standard error is taken along the mean's direction."""
    mean = np.asarray(fn(lams)).mean(axis=0)
    norm = float(np.linalg.norm(mean))
    if norm == 0.0:
        return McEstimate(0.0, 0.0, H.size)
    unit = mean / norm
    est = adjusted_estimate(lambda l: np.asarray(fn(l)) @ unit, utilities, lams, H, x)
    return McEstimate(norm, float(est.se), est.npaths)


def _total_vectors(model, y, u1, u2, H, L):
    direction = model.sigma_inv_t() @ model.theta(y)
    hedge = _hedging_vectors(model, u1, u2, H, L)

    def fn(lams):
        my = H * (u2.J(lams[1] * H) - u1.J(lams[0] * H))
        return my[:, None] * direction[None, :] + hedge(lams)

    return fn


def proportion_gap_at(model, y, u1, u2, ensemble: PathEnsemble, xgrid) -> tuple[McEstimate, float]:
    """Largest ``|π̂¹(x)/x − π̂²(x)/x|`` over ``xgrid`` and the wealth attaining it."""
    H = ensemble.H
    fn = _total_vectors(model, y, u1, u2, H, ensemble.L)
    best, best_x = None, float("nan")
    for xv in np.asarray(xgrid, dtype=np.float64):
        l1 = find_lambda_hat(u1, ensemble, xv).lambda_hat
        l2 = find_lambda_hat(u2, ensemble, xv).lambda_hat
        est = _norm_estimate(fn, [u1, u2], [l1, l2], H, xv)
        est = McEstimate(est.mean / xv, est.se / xv, est.npaths)
        if best is None or est.mean > best.mean:
            best, best_x = est, float(xv)
    return best, best_x


def holder_holds(H: Array, q: float, alpha: float, rtol: float = 1e-12) -> bool:
    """Empirical ``E[H^{1+α}] ≤ E[H^q]^{α/(q−1)} E[H]^{1−α/(q−1)}``."""
    k = alpha / (q - 1.0)
    lhs = float(np.mean(H ** (1.0 + alpha)))
    rhs = float(np.mean(H**q)) ** k * float(np.mean(H)) ** (1.0 - k)
    return lhs <= rhs * (1.0 + rtol)


def _horizon_row(cfg: ExperimentConfig, ens: PathEnsemble, EH: float, u1n: Utility, K: float, th: Theory) -> GapRow:
    model, x = cfg.model, cfg.x
    y = np.asarray(cfg.y)
    u1, u2 = cfg.u1, cfg.u2
    H = ens.H
    lam1: CalibratedMultiplier = find_lambda_hat(u1, ens, x)
    lam2: CalibratedMultiplier = find_lambda_hat(u2, ens, x)
    l1, l2 = lam1.lambda_hat, lam2.lambda_hat
    gaps: dict[str, McEstimate] = {}
    if "myopic" in cfg.components:
        gaps["myopic"] = _myopic_gap(model, y, u1, u2, H, x, l1, l2)
    if "hedging" in cfg.components:
        gaps["hedging"] = _norm_estimate(_hedging_vectors(model, u1, u2, H, ens.L), [u1, u2], [l1, l2], H, x)
    if "wealth_gap" in cfg.components:
        gaps["wealth_gap"] = terminal_wealth_gap(u1, u2, ens, x, lam1, lam2)
    if "proportions" in cfg.components:
        gaps["proportions"] = proportion_gap_at(model, y, u1, u2, ens, cfg.wealth_grid)[0]
    db = d_bound_check(u1n, u2, ens, x, K, th.alpha, th.q, raise_on_violation=False)
    return GapRow(
        T=ens.grid.T,
        EH=EH,
        gaps=gaps,
        lambda1=l1,
        lambda2=l2,
        d_lhs=db.lhs,
        d_rhs=db.rhs,
        d_holds=db.holds,
        holder_ok=holder_holds(H, th.q, th.alpha),
    )


# ----------------------------------------------------------------------
# Experiment
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class ComponentFit:
    component: str
    slope: float
    halfwidth: float
    n_used: int
    points_dropped: int
    verdict: str
    reason: str = ""


@dataclass
class TurnpikeReport:
    config: ExperimentConfig
    theory: Theory
    rows: list[GapRow] = field(default_factory=list)
    fits: dict[str, ComponentFit] = field(default_factory=dict)
    K: float = float("nan")
    incomplete: bool = False
    error: str = ""

    @property
    def theoretical_exponent(self) -> float:
        return self.theory.exponent

    @property
    def points_dropped(self) -> dict[str, int]:
        return {k: f.points_dropped for k, f in self.fits.items()}

    @property
    def verdict(self) -> str:
        """Verdict of the first requested component."""
        if self.incomplete:
            return "incomplete"
        for c in COMPONENTS:
            if c in self.fits:
                return self.fits[c].verdict
        return "degenerate"

    @property
    def primary(self) -> ComponentFit | None:
        for c in COMPONENTS:
            if c in self.fits:
                return self.fits[c]
        return None

    def rates_agree(self, a: str = "myopic", b: str = "hedging") -> bool:
        fa, fb = self.fits.get(a), self.fits.get(b)
        if fa is None or fb is None or not np.isfinite(fa.slope) or not np.isfinite(fb.slope):
            return False
        return abs(fa.slope - fb.slope) <= fa.halfwidth + fb.halfwidth

    def m_proxy(self) -> Array:
        """Running minimum over horizons of ``|E_N[H d(λ̂¹H)]|``."""
        return np.minimum.accumulate(np.array([r.d_lhs for r in self.rows]))

    def summary(self) -> str:
        f = self.primary
        slope = "nan" if f is None else f"{f.slope:.4f}"
        return f"slope={slope}, theory={self.theory.exponent:.4f}, verdict={self.verdict}"


def _fit_component(name: str, rows: list[GapRow], theory: Theory, tol: float) -> ComponentFit:
    EH = [r.EH for r in rows]
    gap = [r.gaps[name].mean for r in rows]
    se = [r.gaps[name].se for r in rows]
    try:
        fit = fit_rate(EH, gap, se)
    except InsufficientSignalError as exc:
        nan = float("nan")
        return ComponentFit(name, nan, nan, 0, len(rows), "insufficient-signal", str(exc))
    verdict = verdict_for(fit.slope, theory.exponent, tol)
    if theory.supremum:
        verdict = "PASS" if fit.slope <= theory.exponent + tol else "STEEPER"
    return ComponentFit(name, fit.slope, fit.halfwidth, fit.n_used, fit.n_dropped, verdict)


def check_preconditions(cfg: ExperimentConfig, theory: Theory) -> None:
    """Refuse models with non-decaying bond prices or failing assumptions."""
    lr = long_run_yield(cfg.model)
    if not lr.scalar_rate > 0:
        raise ExperimentRefused(f"long-run bond yield {lr.scalar_rate:.3e} is not positive")
    gammas = sorted({theory.q, 1.0 + theory.alpha} - {0.0})
    rep = validate(cfg.model, gammas)
    if not rep.passed:
        raise ExperimentRefused("model fails: " + "; ".join(c.description for c in rep.failed()))


def run_experiment(cfg: ExperimentConfig, ensembles: dict[float, PathEnsemble] | None = None) -> TurnpikeReport:
    """Simulate one shared driver, measure every gap at every horizon and fit rates.

    ``ensembles`` may supply precomputed physical ensembles keyed by
    horizon; they must match the configuration.
    """
    if same_preferences(cfg.u1, cfg.u2):
        theory = Theory(1.0, 0.0, reference_exponent(cfg.u2) / (reference_exponent(cfg.u2) - 1.0), False, "identical")
        rep = TurnpikeReport(cfg, theory)
        for c in cfg.components:
            rep.fits[c] = ComponentFit(c, float("nan"), float("nan"), 0, 0, "degenerate", "identical preferences")
        return rep
    theory = theory_for(cfg.u1, cfg.u2, cfg.beta)
    check_preconditions(cfg, theory)
    db = estimate_diff_bound(cfg.u1, cfg.u2, alpha=theory.alpha)
    u1n = cfg.u1.scaled(db.scale)
    rep = TurnpikeReport(cfg, theory, K=db.K)
    if ensembles is None:
        ensembles = simulate_functionals(
            cfg.model, cfg.Tgrid, cfg.steps_per_unit, cfg.npaths, cfg.seed, cfg.y, threads=cfg.threads
        )
    horizons = sorted(ensembles)
    EH = bond_curve(cfg.model, horizons).prices(np.asarray(cfg.y))

    def work(i: int) -> GapRow:
        return _horizon_row(cfg, ensembles[horizons[i]], float(EH[i]), u1n, db.K, theory)

    try:
        if cfg.threads > 1:
            with ThreadPoolExecutor(max_workers=cfg.threads) as ex:
                rep.rows = list(ex.map(work, range(len(horizons))))
        else:
            rep.rows = [work(i) for i in range(len(horizons))]
    except Exception as exc:  # noqa: BLE001 - reported as an incomplete run
        log.error("experiment aborted: %s", exc)
        rep.incomplete = True
        rep.error = f"{type(exc).__name__}: {exc}"
        return rep
    for c in cfg.components:
        rep.fits[c] = _fit_component(c, rep.rows, theory, cfg.tolerance)
    return rep


def uniform_proportion_gap(cfg: ExperimentConfig, xgrid, ensembles: dict[float, PathEnsemble] | None = None):
    """Per-horizon supremum over ``xgrid`` of the total proportion gap.

    Returns a list of ``(T, estimate, argmax_x)``; one ensemble per horizon
    is reused for every wealth level.
    """
    xgrid = np.asarray(xgrid, dtype=np.float64)
    if xgrid.ndim != 1 or xgrid.size < 1 or np.any(xgrid <= 0):
        raise ValueError("xgrid must hold positive wealth levels")
    if ensembles is None:
        ensembles = simulate_functionals(
            cfg.model, cfg.Tgrid, cfg.steps_per_unit, cfg.npaths, cfg.seed, cfg.y, threads=cfg.threads
        )
    y = np.asarray(cfg.y)
    out = []
    for T in sorted(ensembles):
        est, xs = proportion_gap_at(cfg.model, y, cfg.u1, cfg.u2, ensembles[T], xgrid)
        out.append((T, est, xs))
    return out


__all__ = [
    "COMPONENTS",
    "ComponentFit",
    "ExperimentConfig",
    "ExperimentRefused",
    "GapRow",
    "InsufficientSignalError",
    "RateFit",
    "Theory",
    "TurnpikeReport",
    "exponent_from_alpha",
    "fit_rate",
    "holder_holds",
    "run_experiment",
    "theoretical_exponent",
    "theory_for",
    "uniform_proportion_gap",
    "verdict_for",
]
