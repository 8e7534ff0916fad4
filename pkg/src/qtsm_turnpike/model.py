"""Quadratic term-structure market model and its standing-assumption checks.

The market has ``m`` Gaussian factors and ``n`` risky assets:

    r(y)     = r0 + r1ᵀy + ½ yᵀR2y
    θ(y)     = a + Ay
    μ(y)     = Σθ(y) + 1·r(y)
    dY_t     = (b + BY_t) dt + Λ dW_t

All coefficients are stored as float64 numpy arrays and the dataclass is
frozen, so a model can be shared between worker threads.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np
from numpy.typing import NDArray

from .riccati import is_stable

Array = NDArray[np.float64]

PSD_TOL = -1e-10
SYMMETRY_RTOL = 1e-8
DEFAULT_COND_CAP = 1e12


class ModelStructureError(ValueError):
    """Raised when model coefficients have inconsistent shapes or values.

    The offending field name is stored in ``field``.
    """

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def _as_vector(name: str, value, size: int | None = None) -> Array:
    arr = np.atleast_1d(np.asarray(value, dtype=np.float64))
    if arr.ndim != 1:
        raise ModelStructureError(name, f"expected a vector, got shape {arr.shape}")
    if size is not None and arr.shape[0] != size:
        raise ModelStructureError(name, f"expected length {size}, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise ModelStructureError(name, "non-finite entries")
    return arr


def _as_matrix(name: str, value, shape: tuple[int, int]) -> Array:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0 and shape == (1, 1):
        arr = arr.reshape(1, 1)
    if arr.ndim == 1 and shape[0] == 1 and arr.shape[0] == shape[1]:
        arr = arr.reshape(shape)
    if arr.shape != shape:
        raise ModelStructureError(name, f"expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ModelStructureError(name, "non-finite entries")
    return arr


@dataclass(frozen=True)
class QtsmModel:
    """Coefficients of a quadratic term-structure model.

    Parameters
    ----------
    r0 : float
        Short-rate intercept.
    r1 : (m,) array
        Linear short-rate loading.
    R2 : (m, m) array
        Quadratic short-rate loading. Symmetrized on construction; an
        asymmetry above ``1e-8`` relative raises :class:`ModelStructureError`.
    a, A : (n,) and (n, m) arrays
        Market price of risk ``θ(y) = a + Ay``.
    b, B : (m,) and (m, m) arrays
        Factor drift ``b + By``.
    Lambda : (m, n) array
        Factor diffusion.
    Sigma : (n, n) array
        Asset volatility matrix.
    """

    r0: float
    r1: Array
    R2: Array
    a: Array
    A: Array
    b: Array
    B: Array
    Lambda: Array
    Sigma: Array
    m: int = field(init=False)
    n: int = field(init=False)

    def __post_init__(self) -> None:
        r1 = _as_vector("r1", self.r1)
        m = r1.shape[0]
        a = _as_vector("a", self.a)
        n = a.shape[0]
        R2 = _as_matrix("R2", self.R2, (m, m))
        scale = max(1.0, float(np.max(np.abs(R2))))
        if np.max(np.abs(R2 - R2.T)) > SYMMETRY_RTOL * scale:
            raise ModelStructureError("R2", "matrix is not symmetric")
        R2 = 0.5 * (R2 + R2.T)
        values = {
            "r0": float(self.r0),
            "r1": r1,
            "R2": R2,
            "a": a,
            "A": _as_matrix("A", self.A, (n, m)),
            "b": _as_vector("b", self.b, m),
            "B": _as_matrix("B", self.B, (m, m)),
            "Lambda": _as_matrix("Lambda", self.Lambda, (m, n)),
            "Sigma": _as_matrix("Sigma", self.Sigma, (n, n)),
        }
        if not np.isfinite(values["r0"]):
            raise ModelStructureError("r0", "non-finite value")
        for key, val in values.items():
            if isinstance(val, np.ndarray):
                val.setflags(write=False)
            object.__setattr__(self, key, val)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "n", n)

    # ------------------------------------------------------------------
    @classmethod
    def from_mapping(cls, data: Mapping) -> "QtsmModel":
        """Build a model from a nested mapping (for example a parsed TOML table)."""
        required = ("r0", "r1", "R2", "a", "A", "b", "B", "Lambda", "Sigma")
        missing = [k for k in required if k not in data]
        if missing:
            raise ModelStructureError(missing[0], "missing from model table")
        return cls(**{k: data[k] for k in required})

    def to_mapping(self) -> dict:
        """Plain-python representation (lists), suitable for JSON or TOML."""
        out = {"r0": self.r0}
        for key in ("r1", "R2", "a", "A", "b", "B", "Lambda", "Sigma"):
            out[key] = getattr(self, key).tolist()
        return out

    def fingerprint(self) -> str:
        """SHA-256 of the coefficient values, stable across runs."""
        payload = json.dumps(self.to_mapping(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()

    # Derived risk-neutral coefficients ----------------------------------
    @property
    def B_tilde(self) -> Array:
        """Risk-neutral mean-reversion matrix ``B − ΛA``."""
        return self.B - self.Lambda @ self.A

    @property
    def b_tilde(self) -> Array:
        """Risk-neutral drift intercept ``b − Λa``."""
        return self.b - self.Lambda @ self.a

    @property
    def LLt(self) -> Array:
        """Factor instantaneous covariance ``ΛΛᵀ``."""
        return self.Lambda @ self.Lambda.T

    def sigma_inv_t(self) -> Array:
        """``(Σᵀ)⁻¹``, used to map factor-space terms into asset positions."""
        return np.linalg.inv(self.Sigma.T)

    # Market functions ----------------------------------------------------
    def short_rate(self, y) -> float | Array:
        """Short rate ``r(y)``; ``y`` may be ``(m,)`` or a batch ``(..., m)``."""
        y = np.asarray(y, dtype=np.float64)
        quad = 0.5 * np.einsum("...i,ij,...j->...", y, self.R2, y)
        return self.r0 + y @ self.r1 + quad

    def theta(self, y) -> Array:
        """Market price of risk ``θ(y) = a + Ay`` (batch-aware)."""
        y = np.asarray(y, dtype=np.float64)
        return self.a + y @ self.A.T

    def rate_lower_bound(self) -> float:
        """``r0 − ½ r1ᵀ pinv(R2) r1``; a global lower bound when R2 is positive definite."""
        return float(self.r0 - 0.5 * self.r1 @ np.linalg.pinv(self.R2) @ self.r1)


@dataclass(frozen=True)
class MarketValues:
    r: float
    theta: Array
    mu: Array


def eval_market(model: QtsmModel, y) -> MarketValues:
    """Evaluate ``(r, θ, μ)`` at a single factor value ``y``."""
    y = _as_vector("y", y, model.m)
    r = float(model.short_rate(y))
    theta = model.theta(y)
    mu = model.Sigma @ theta + r * np.ones(model.n)
    return MarketValues(r=r, theta=theta, mu=mu)


# ----------------------------------------------------------------------
# Validation
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class AssumptionCheck:
    """Outcome of one standing-assumption check."""

    key: str
    description: str
    passed: bool
    evidence: dict


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[AssumptionCheck, ...]
    gamma_set: tuple[float, ...]
    notes: tuple[str, ...] = ()

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failed(self) -> list[AssumptionCheck]:
        return [c for c in self.checks if not c.passed]

    def lines(self) -> list[str]:
        out = []
        for c in self.checks:
            verdict = "PASS" if c.passed else "FAIL"
            ev = ", ".join(f"{k}={_fmt_evidence(v)}" for k, v in c.evidence.items())
            out.append(f"[{verdict}] ({c.key}) {c.description}: {ev}")
        out.extend(f"note: {n}" for n in self.notes)
        return out


def _fmt_evidence(v) -> str:
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt_evidence(x) for x in v) + "]"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


GROWTH_NOTE = (
    "growth and regularity conditions on the coefficients are not checked "
    "numerically: θ is affine and r is quadratic with constant Jacobians, so they hold by construction"
)


def validate(
    model: QtsmModel,
    gamma_set: Iterable[float] = (),
    cond_cap: float = DEFAULT_COND_CAP,
) -> ValidationReport:
    """Check the four standing assumptions of the model.

    (i) Σ invertible, with condition number below ``cond_cap``.
    (ii) R2 positive semidefinite (minimum eigenvalue ≥ −1e−10).
    (iii) R2 = 0, or γ(1−γ)AᵀA + γR2 positive definite for every γ in
    ``gamma_set``.
    (iv) every eigenvalue of B has real part < −1e−10.

    The function is deterministic and side-effect free.
    """
    gammas = tuple(sorted(float(g) for g in set(gamma_set)))
    checks = []

    sv = np.linalg.svd(model.Sigma, compute_uv=False)
    cond = float(sv[0] / sv[-1]) if sv[-1] > 0 else float("inf")
    checks.append(
        AssumptionCheck(
            "i",
            "Sigma invertible",
            bool(np.isfinite(cond) and cond < cond_cap),
            {"condition_number": cond, "cap": cond_cap},
        )
    )

    eig_r2 = np.linalg.eigvalsh(model.R2)
    checks.append(
        AssumptionCheck(
            "ii",
            "R2 positive semidefinite",
            bool(eig_r2[0] >= PSD_TOL),
            {"min_eigenvalue": float(eig_r2[0])},
        )
    )

    r2_zero = not np.any(model.R2)
    per_gamma = []
    ok3 = True
    if not r2_zero:
        AtA = model.A.T @ model.A
        for g in gammas:
            M = g * (1.0 - g) * AtA + g * model.R2
            lam = float(np.linalg.eigvalsh(0.5 * (M + M.T))[0])
            per_gamma.append((g, lam))
            ok3 &= lam > -PSD_TOL
    checks.append(
        AssumptionCheck(
            "iii",
            "R2 = 0 or gamma(1-gamma)A'A + gamma R2 positive definite",
            bool(ok3),
            {
                "R2_zero": r2_zero,
                "min_eigenvalue_by_gamma": [f"{g:.6g}:{lam:.6g}" for g, lam in per_gamma],
            },
        )
    )

    stable, max_re = is_stable(model.B)
    checks.append(
        AssumptionCheck(
            "iv",
            "B stable (all eigenvalues with negative real part)",
            stable,
            {"max_real_part": max_re},
        )
    )
    return ValidationReport(tuple(checks), gammas, (GROWTH_NOTE,))
