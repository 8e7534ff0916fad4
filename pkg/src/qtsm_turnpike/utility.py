"""Utility functions seen through their inverse marginal utility.

Every utility exposes

* ``U(x)``, ``marginal(x) = U′(x)``
* ``inverse_marginal(z) = I(z)``, the inverse of ``U′``
* ``J(z) = z·I′(z)``, which equals ``−ART(I(z))``
* ``risk_tolerance(x) = −U′(x)/U″(x)``

A positive ``scale`` ``c`` represents the utility ``c·U``. Scaling leaves the
optimal strategy unchanged while ``I_{cU}(z) = I_U(z/c)``.

The collective utilities both reduce to solving equations of the form
``Σ_i exp(c_i + e_i s) = target`` with all ``e_i < 0``. The left side is
log-convex and decreasing in ``s``, so Newton's method started from a lower
bracket converges monotonically; see :func:`solve_expsum`.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numba as nb
import numpy as np
from numpy.typing import NDArray

Array = NDArray[np.float64]


class UtilityDomainError(ValueError):
    """Raised for non-positive arguments or invalid utility parameters."""


def _positive(name: str, v) -> Array:
    arr = np.asarray(v, dtype=np.float64)
    if np.any(~(arr > 0)):
        raise UtilityDomainError(f"{name} must be positive")
    return arr


def _out(arr: Array, like):
    return float(arr) if np.ndim(like) == 0 else arr


@nb.njit(cache=True)
def _expsum_kernel(c, e, lt, out, tol, maxiter):
    k = c.shape[0]
    logk = np.log(k)
    terms = np.empty(k)
    for idx in range(lt.shape[0]):
        t = lt[idx]
        lo = -np.inf
        hi = -np.inf
        for i in range(k):
            lo = max(lo, (t - c[i]) / e[i])
            hi = max(hi, (t - logk - c[i]) / e[i])
        s = lo
        for _ in range(maxiter):
            mx = -np.inf
            for i in range(k):
                terms[i] = c[i] + e[i] * s
                mx = max(mx, terms[i])
            tot = 0.0
            slope = 0.0
            for i in range(k):
                w = np.exp(terms[i] - mx)
                tot += w
                slope += w * e[i]
            f = mx + np.log(tot) - t
            new = s - f / (slope / tot)
            new = min(max(new, lo), hi)
            done = abs(new - s) <= tol * max(1.0, abs(new))
            s = new
            if done:
                break
        out[idx] = s


def solve_expsum(c: Array, e: Array, log_target, tol: float = 1e-15, maxiter: int = 100) -> Array:
    """Solve ``logsumexp(c + e·s) = log_target`` for ``s`` elementwise.

    Parameters
    ----------
    c, e : (k,) arrays
        Offsets and slopes; every ``e_i`` must be negative.
    log_target : array_like
        Right-hand sides.

    Returns
    -------
    s : array with the shape of ``log_target``

    Notes
    -----
    Each single term equals the target at ``s_i = (log_target − c_i)/e_i``, and
    the sum dominates every term, so the root lies above ``max_i s_i``. Every
    term is below ``target/k`` once ``s ≥ max_i (log_target − log k − c_i)/e_i``,
    which bounds the root from above. Starting Newton at the lower bound of a
    convex decreasing function gives monotone convergence; iterates are
    clipped to the bracket as a safeguard.
    """
    c = np.ascontiguousarray(c, dtype=np.float64)
    e = np.ascontiguousarray(e, dtype=np.float64)
    if np.any(e >= 0):
        raise UtilityDomainError("solve_expsum needs strictly negative slopes")
    lt = np.asarray(log_target, dtype=np.float64)
    flat = np.ascontiguousarray(lt.reshape(-1))
    out = np.empty_like(flat)
    _expsum_kernel(c, e, flat, out, tol, maxiter)
    return out.reshape(lt.shape)


# ----------------------------------------------------------------------
# Variants
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class Utility:
    """Common interface. Subclasses implement the unscaled ``_I``, ``_J`` etc."""

    name: str = field(default="", kw_only=True)
    scale: float = field(default=1.0, kw_only=True)

    # subclass hooks (unscaled utility)
    def _U(self, x: Array) -> Array:  # pragma: no cover - abstract
        raise NotImplementedError

    def _marginal(self, x: Array) -> Array:  # pragma: no cover - abstract
        raise NotImplementedError

    def _I(self, z: Array) -> Array:  # pragma: no cover - abstract
        raise NotImplementedError

    def _J(self, z: Array) -> Array:  # pragma: no cover - abstract
        raise NotImplementedError

    def _art(self, x: Array) -> Array:  # pragma: no cover - abstract
        raise NotImplementedError

    # public API ---------------------------------------------------------
    def U(self, x):
        return _out(self.scale * self._U(_positive("x", x)), x)

    def marginal(self, x):
        return _out(self.scale * self._marginal(_positive("x", x)), x)

    def inverse_marginal(self, z):
        return _out(self._I(_positive("z", z) / self.scale), z)

    def J(self, z):
        """``z·I′(z)``; always negative."""
        return _out(self._J(_positive("z", z) / self.scale), z)

    def risk_tolerance(self, x):
        return _out(self._art(_positive("x", x)), x)

    def scaled(self, c: float) -> "Utility":
        """The utility ``c·U`` (``c > 0``)."""
        if not c > 0:
            raise UtilityDomainError("scale must be positive")
        return replace(self, scale=self.scale * float(c))

    @property
    def label(self) -> str:
        return self.name or self.kind

    @property
    def kind(self) -> str:  # pragma: no cover - abstract
        raise NotImplementedError


def _q_of(p: float) -> float:
    return p / (p - 1.0)


@dataclass(frozen=True)
class Power(Utility):
    """``U(x) = x^p/p`` with ``p < 1``, ``p ≠ 0``."""

    p: float = -1.0

    def __post_init__(self):
        if not (self.p < 1.0) or self.p == 0.0:
            raise UtilityDomainError("Power needs p < 1 and p != 0 (use Log for p = 0)")

    kind = "power"

    @property
    def q(self) -> float:
        return _q_of(self.p)

    def _U(self, x):
        return x**self.p / self.p

    def _marginal(self, x):
        return x ** (self.p - 1.0)

    def _I(self, z):
        return z ** (1.0 / (self.p - 1.0))

    def _J(self, z):
        e = 1.0 / (self.p - 1.0)
        return e * z**e

    def _art(self, x):
        return x / (1.0 - self.p)


@dataclass(frozen=True)
class Log(Utility):
    """``U(x) = log x``."""

    kind = "log"
    p = 0.0
    q = 0.0

    def _U(self, x):
        return np.log(x)

    def _marginal(self, x):
        return 1.0 / x

    def _I(self, z):
        return 1.0 / z

    def _J(self, z):
        return -1.0 / z

    def _art(self, x):
        return np.asarray(x, dtype=np.float64).copy()


def _check_exponents(p: Sequence[float]) -> Array:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1 or p.size < 1:
        raise UtilityDomainError("exponents must be a nonempty vector")
    if np.any(np.diff(p) <= 0) or p[-1] > 0:
        raise UtilityDomainError("exponents must satisfy p_1 < ... < p_n <= 0")
    return p


def _check_simplex(name: str, v: Sequence[float], size: int) -> Array:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (size,):
        raise UtilityDomainError(f"{name} must have length {size}")
    if np.any(v <= 0) or abs(v.sum() - 1.0) > 1e-12:
        raise UtilityDomainError(f"{name} must be positive and sum to 1")
    return v


def _tuple(v) -> tuple[float, ...]:
    return tuple(float(x) for x in np.asarray(v, dtype=np.float64).reshape(-1))


@dataclass(frozen=True)
class ParetoCollective(Utility):
    """Pareto-optimal collective utility of power/log agents.

    The inverse marginal is the sum of the agents' inverse marginals,
    ``Ĩ(z) = Σ_i I_i(z/β_i)`` with ``I_i(z) = z^{1/(p_i−1)}``.
    """

    weights: tuple[float, ...] = (0.5, 0.5)
    exponents: tuple[float, ...] = (-2.0, -1.0)

    kind = "pareto"

    def __post_init__(self):
        p = _check_exponents(self.exponents)
        _check_simplex("weights", self.weights, p.size)
        object.__setattr__(self, "weights", _tuple(self.weights))
        object.__setattr__(self, "exponents", _tuple(self.exponents))

    @property
    def _e(self) -> Array:
        return 1.0 / (np.asarray(self.exponents) - 1.0)

    @property
    def q_values(self) -> Array:
        return np.array([_q_of(p) for p in self.exponents])

    def _terms(self, z):
        z = np.asarray(z, dtype=np.float64)
        beta = np.asarray(self.weights)
        return (z[..., None] / beta) ** self._e

    def _I(self, z):
        return self._terms(z).sum(axis=-1)

    def _J(self, z):
        return (self._terms(z) * self._e).sum(axis=-1)

    def _marginal(self, x):
        # Ĩ(z) = Σ exp(−e_i log β_i + e_i log z) = x, solved for log z
        e = self._e
        c = -e * np.log(np.asarray(self.weights))
        return np.exp(solve_expsum(c, e, np.log(x)))

    def _U(self, x):
        z = self._marginal(x)
        xi = self._terms(z)
        beta = np.asarray(self.weights)
        p = np.asarray(self.exponents)
        ui = np.where(p == 0.0, np.log(xi), xi ** np.where(p == 0, 1.0, p) / np.where(p == 0, 1.0, p))
        return (ui * beta).sum(axis=-1)

    def _art(self, x):
        return -self._J(self._marginal(x))


@dataclass(frozen=True)
class LinearSharing(Utility):
    """Collective utility under a linear sharing rule.

    Agent ``i`` receives the share ``α_i x`` and has Pareto weight ``β_i``, so
    ``U(x) = Σ β_i U_i(α_i x)`` and ``U′(x) = Σ w_i x^{p_i−1}`` with marginal
    weights ``w_i = β_i α_i^{p_i}``. Build from sharing data with
    :meth:`from_sharing`, or pass ``w`` directly.
    """

    w: tuple[float, ...] = (1.0, 1.0)
    exponents: tuple[float, ...] = (-1.0, 0.0)
    proportions: tuple[float, ...] | None = None
    weights: tuple[float, ...] | None = None

    kind = "linear"

    def __post_init__(self):
        p = _check_exponents(self.exponents)
        w = np.asarray(self.w, dtype=np.float64)
        if w.shape != p.shape or np.any(w <= 0):
            raise UtilityDomainError("w must be positive with one entry per exponent")
        object.__setattr__(self, "w", _tuple(w))
        object.__setattr__(self, "exponents", _tuple(p))

    @classmethod
    def from_sharing(cls, proportions, weights, exponents, **kw) -> "LinearSharing":
        p = _check_exponents(exponents)
        alpha = _check_simplex("proportions", proportions, p.size)
        beta = _check_simplex("weights", weights, p.size)
        w = beta * alpha**p
        return cls(w=_tuple(w), exponents=_tuple(p), proportions=_tuple(alpha), weights=_tuple(beta), **kw)

    def _powers(self, x, shift):
        x = np.asarray(x, dtype=np.float64)
        p = np.asarray(self.exponents)
        return np.asarray(self.w) * x[..., None] ** (p + shift)

    def _marginal(self, x):
        return self._powers(x, -1.0).sum(axis=-1)

    def _U(self, x):
        x = np.asarray(x, dtype=np.float64)
        p = np.asarray(self.exponents)
        w = np.asarray(self.w)
        safe_p = np.where(p == 0, 1.0, p)
        # Σ β_i U_i(α_i x) up to an additive constant for the log agents
        terms = np.where(p == 0, w * np.log(x[..., None]), w * x[..., None] ** p / safe_p)
        return terms.sum(axis=-1)

    def _art(self, x):
        p = np.asarray(self.exponents)
        num = self._powers(x, -1.0).sum(axis=-1)
        den = (self._powers(x, -2.0) * (1.0 - p)).sum(axis=-1)
        return num / den

    def _I(self, z):
        p = np.asarray(self.exponents)
        return np.exp(solve_expsum(np.log(np.asarray(self.w)), p - 1.0, np.log(z)))

    def _J(self, z):
        return -self._art(self._I(z))


# ----------------------------------------------------------------------
# Pair analysis
# ----------------------------------------------------------------------


def reference_exponent(u: Utility) -> float:
    """``p`` of a Power/Log reference utility."""
    if isinstance(u, Log):
        return 0.0
    if isinstance(u, Power):
        return u.p
    raise UtilityDomainError("reference utility must be Power or Log")


def same_preferences(u1: Utility, u2: Utility) -> bool:
    """True when ``u1`` and ``u2`` differ at most by a positive scale factor."""
    return replace(u1, scale=1.0, name="") == replace(u2, scale=1.0, name="")


def normalization_scale(u1: Utility, u2: Utility) -> float:
    """Factor ``c`` such that ``c·u1`` and ``u2`` share the same small-z leading term.

    With this factor, ``I₁(z) − I₂(z)`` is of lower order than ``I₂(z)`` as
    ``z → 0``, which is the normalization under which the difference bound is
    stated. Strategies are unaffected by the factor.
    """
    p_ref = reference_exponent(u2)
    if isinstance(u1, ParetoCollective) and u1.exponents[-1] == p_ref:
        return u2.scale / (u1.scale * u1.weights[-1])
    if isinstance(u1, LinearSharing) and u1.exponents[-1] == p_ref:
        return u2.scale / (u1.scale * u1.w[-1])
    if isinstance(u1, (Power, Log)) and reference_exponent(u1) == p_ref:
        return u2.scale / u1.scale
    return 1.0


def linear_sharing_beta_interval(u1: LinearSharing) -> tuple[float, float]:
    """Open interval of admissible ``β`` for the linear-sharing difference bound."""
    p = u1.exponents
    if len(p) < 2:
        return (0.0, 1.0)
    return (max(0.0, 1.0 + p[-2] - p[-1]), 1.0)


def theoretical_alpha(u1: Utility, u2: Utility, beta: float | None = None) -> float:
    """Exponent ``α`` in the bound ``|d(z)| ≤ K(1 + z^α)`` for supported pairs.

    * identical preferences: ``α = 0``
    * Pareto vs Power(p_n): ``α = q_{n−1} − 1``
    * LinearSharing vs Power(p_n): ``α = β(q_n − 1)`` for ``β`` in the admissible
      open interval (default: its midpoint)
    """
    if same_preferences(u1, u2):
        return 0.0
    p_ref = reference_exponent(u2)
    q_ref = _q_of(p_ref)
    if isinstance(u1, ParetoCollective) and u1.exponents[-1] == p_ref and len(u1.exponents) > 1:
        return _q_of(u1.exponents[-2]) - 1.0
    if isinstance(u1, LinearSharing) and u1.exponents[-1] == p_ref:
        lo, hi = linear_sharing_beta_interval(u1)
        if beta is None:
            beta = 0.5 * (lo + hi)
        if not lo < beta < hi:
            raise UtilityDomainError(f"beta must lie in ({lo}, {hi})")
        return beta * (q_ref - 1.0)
    raise UtilityDomainError(
        f"no known difference-bound exponent for the pair ({u1.label}, {u2.label}); pass alpha explicitly"
    )


@dataclass(frozen=True)
class DiffBoundEstimate:
    """Grid estimate of ``K`` in ``|d(z)|, |z d′(z)| ≤ K(1 + z^α)``.

    ``max_violation`` is the largest value of ``max(|d|, |z d′|) − K(1+z^α)``
    on the grid, so it is ``≤ 0`` by construction of ``K``. ``tail_growth`` is
    the largest outward log-slope of the ratio ``max(|d|,|zd′|)/(1+z^α)`` over
    the outermost decade at either end of the grid. A clearly positive value
    means the ratio is still growing at the edge, so no finite ``K`` works
    beyond the grid; ``feasible`` is false in that case.
    """

    alpha: float
    K: float
    zgrid: Array
    max_violation: float
    tail_growth: float
    feasible: bool
    scale: float


TAIL_GROWTH_TOL = 0.05


def default_zgrid() -> Array:
    return np.logspace(-6.0, 6.0, 200)


def diff_bound_ratio(u1: Utility, u2: Utility, zgrid: Array, alpha: float) -> Array:
    d = np.abs(u1.inverse_marginal(zgrid) - u2.inverse_marginal(zgrid))
    zd = np.abs(u1.J(zgrid) - u2.J(zgrid))
    return np.maximum(d, zd) / (1.0 + zgrid**alpha)


def estimate_diff_bound(
    u1: Utility,
    u2: Utility,
    zgrid: Array | None = None,
    alpha: float | None = None,
    beta: float | None = None,
    normalize: bool = True,
) -> DiffBoundEstimate:
    """Smallest grid-feasible ``K`` for the theoretical (or given) ``α``.

    ``u2`` must be a Power or Log reference. With ``normalize`` the general
    utility is first rescaled by :func:`normalization_scale`; the factor used
    is reported in ``scale``.
    """
    reference_exponent(u2)
    z = default_zgrid() if zgrid is None else np.asarray(zgrid, dtype=np.float64)
    if z.ndim != 1 or z.size < 3 or np.any(np.diff(z) <= 0):
        raise UtilityDomainError("zgrid must be ascending with at least 3 points")
    if np.log10(z[-1] / z[0]) < 8.0:
        raise UtilityDomainError("zgrid must span at least 8 decades")
    c = normalization_scale(u1, u2) if normalize else 1.0
    v1 = u1.scaled(c)
    if alpha is None:
        alpha = theoretical_alpha(u1, u2, beta)
    ratio = diff_bound_ratio(v1, u2, z, alpha)
    K = float(np.max(ratio))
    bound = K * (1.0 + z**alpha)
    d = np.abs(v1.inverse_marginal(z) - u2.inverse_marginal(z))
    zd = np.abs(v1.J(z) - u2.J(z))
    max_violation = float(np.max(np.maximum(d, zd) - bound))
    growth = _tail_growth(z, ratio)
    return DiffBoundEstimate(
        alpha=float(alpha),
        K=K,
        zgrid=z,
        max_violation=max_violation,
        tail_growth=growth,
        feasible=bool(np.isfinite(K) and growth <= TAIL_GROWTH_TOL),
        scale=c,
    )


def _tail_growth(z: Array, ratio: Array) -> float:
    if not np.any(ratio > 0):
        return 0.0
    lz = np.log10(z)
    lr = np.log(np.maximum(ratio, np.finfo(float).tiny))
    left = lz <= lz[0] + 1.0
    right = lz >= lz[-1] - 1.0
    growth = []
    for mask, sign in ((left, -1.0), (right, 1.0)):
        if mask.sum() >= 2 and np.any(ratio[mask] > 0):
            slope = np.polyfit(lz[mask] * np.log(10.0), lr[mask], 1)[0]
            growth.append(sign * slope)
    return float(max(growth)) if growth else 0.0


# ----------------------------------------------------------------------
# Construction from config tables
# ----------------------------------------------------------------------


def utility_from_mapping(name: str, data: Mapping) -> Utility:
    """Build a utility from a config table with a ``kind`` key.

    Supported kinds: ``power`` (``p``), ``log``, ``pareto`` (``weights``,
    ``exponents``), ``linear`` (``proportions``, ``weights``, ``exponents``, or
    ``w`` and ``exponents``). An optional ``scale`` multiplies the utility.
    """
    kind = str(data.get("kind", "")).lower()
    scale = float(data.get("scale", 1.0))
    if kind == "power":
        return Power(p=float(data["p"]), name=name, scale=scale)
    if kind == "log":
        return Log(name=name, scale=scale)
    if kind == "pareto":
        return ParetoCollective(
            weights=tuple(data["weights"]), exponents=tuple(data["exponents"]), name=name, scale=scale
        )
    if kind == "linear":
        if "w" in data:
            return LinearSharing(w=tuple(data["w"]), exponents=tuple(data["exponents"]), name=name, scale=scale)
        return LinearSharing.from_sharing(
            data["proportions"], data["weights"], data["exponents"], name=name, scale=scale
        )
    raise UtilityDomainError(f"utility {name!r}: unknown kind {kind!r}")
