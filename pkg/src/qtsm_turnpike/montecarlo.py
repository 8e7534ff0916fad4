"""Exact-in-law factor simulation and state-price-density functionals.

The factor is an Ornstein–Uhlenbeck process, so each grid step is sampled
exactly: ``Y_{k+1} = E·Y_k + mvec + ξ_k`` with ``(ΔW_k, ξ_k)`` jointly Gaussian.
The joint covariance comes from Van Loan's block matrix exponential applied
to the augmented state ``(W, Y)``. Only the integral functionals carry a
discretization error:

* ``∫r dt`` and ``∫|θ|² dt`` by the trapezoid rule,
* ``∫θᵀdW`` by left-point Itô sums,
* ``L_T = ∫ e^{Bᵀu}[(r₁ + R₂Y_u) + Aᵀθ(Y_u)] du + ∫ e^{Bᵀu}AᵀdW_u`` with the
  same two rules.

Simulation runs in fixed chunks of consecutive paths, with the Gaussian
draws taken from :mod:`qtsm_turnpike.rng`. Chunks are independent and write
to disjoint slices, so any number of worker threads gives identical output.
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numba as nb
import numpy as np
from numpy.typing import NDArray
from scipy.linalg import expm

from .model import QtsmModel
from .pricing import MyopicMeasureCoeffs
from .rng import fill_chunk, split_seed

Array = NDArray[np.float64]
log = logging.getLogger(__name__)

CHUNK = 512

MODE_Y = 0
MODE_DISCOUNT = 1
MODE_FULL = 2


class DegenerateEstimateError(ValueError):
    """All importance weights are zero."""


@dataclass(frozen=True)
class SimGrid:
    T: float
    nsteps: int

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError("horizon must be positive")
        if int(self.nsteps) != self.nsteps or self.nsteps < 2:
            raise ValueError("nsteps must be an integer >= 2")
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "nsteps", int(self.nsteps))

    @property
    def dt(self) -> float:
        return self.T / self.nsteps

    @property
    def times(self) -> Array:
        return np.arange(self.nsteps + 1) * self.dt

    @classmethod
    def from_rate(cls, T: float, steps_per_unit: int) -> "SimGrid":
        n = T * steps_per_unit
        if abs(n - round(n)) > 1e-9 * max(1.0, n):
            raise ValueError(f"T={T} is not a multiple of 1/{steps_per_unit}")
        return cls(T, int(round(n)))


@dataclass
class Functionals:
    """Per-path functionals at one horizon.

    ``stoch_int_theta``, ``int_theta_sq`` and ``L`` are ``None`` for
    ensembles simulated without the physical Brownian motion.
    """

    int_r: Array
    Y_T: Array
    stoch_int_theta: Array | None = None
    int_theta_sq: Array | None = None
    L: Array | None = None

    @property
    def H(self) -> Array:
        if self.stoch_int_theta is None:
            raise ValueError("state-price density needs physical-measure functionals")
        return np.exp(-self.int_r - self.stoch_int_theta - 0.5 * self.int_theta_sq)

    @property
    def discount(self) -> Array:
        return np.exp(-self.int_r)


@dataclass
class PathEnsemble:
    """Simulated paths and their functionals.

    ``Y`` (``(npaths, nsteps+1, m)``) and ``dW`` (``(npaths, nsteps, n)``)
    are kept only when requested; functionals are always available after
    the fused simulation or :func:`attach_functionals`.
    """

    npaths: int
    seed: int
    grid: SimGrid
    y0: Array
    measure: str
    model_hash: str
    Y: Array | None = None
    dW: Array | None = None
    functionals: Functionals | None = None
    Y_last: Array | None = field(default=None, repr=False)
    _H: Array | None = field(default=None, repr=False)

    @property
    def id(self) -> str:
        key = f"{self.seed}|{self.npaths}|{self.grid.T!r}|{self.grid.nsteps}|{self.measure}|{self.model_hash}|{self.y0.tolist()}"
        return hashlib.sha256(key.encode()).hexdigest()[:16]

    @property
    def H(self) -> Array:
        if self._H is None:
            if self.functionals is None:
                raise ValueError("ensemble has no functionals")
            self._H = self.functionals.H
        return self._H

    @property
    def L(self) -> Array:
        if self.functionals is None or self.functionals.L is None:
            raise ValueError("ensemble has no L_T")
        return self.functionals.L

    @property
    def Y_T(self) -> Array:
        if self.functionals is not None:
            return self.functionals.Y_T
        if self.Y is not None:
            return self.Y[:, -1, :]
        if self.Y_last is not None:
            return self.Y_last
        raise ValueError("ensemble has no terminal factor values")


# ----------------------------------------------------------------------
# Transition moments
# ----------------------------------------------------------------------


def sqrt_psd(M: Array, what: str = "covariance") -> Array:
    """Symmetric square root after clipping negative eigenvalues at zero."""
    M = 0.5 * (M + M.T)
    w, V = np.linalg.eigh(M)
    scale = max(1.0, float(np.max(np.abs(w)))) if w.size else 1.0
    if w.size and w[0] < -1e-12 * scale:
        log.warning("%s not positive semidefinite (min eigenvalue %.3e); clipped at 0", what, w[0])
    w = np.clip(w, 0.0, None)
    return (V * np.sqrt(w)) @ V.T


def transition(K: Array, g: Array, Lam: Array, dt: float, with_dw: bool):
    """Exact one-step law of ``dY = (g + KY)dt + Λ dW`` over ``dt``.

    Returns ``(E, mvec, noise)`` where ``noise`` maps ``d`` standard normals to
    ``(ΔW, ξ)`` (``with_dw``) or to ``ξ`` alone. With ``with_dw`` the first
    ``n`` outputs are exactly ``√dt·z``.
    """
    m, n = Lam.shape
    E = expm(K * dt)
    aug = np.zeros((m + 1, m + 1))
    aug[:m, :m] = K
    aug[:m, m] = g
    mvec = expm(aug * dt)[:m, m]
    # augmented state (W, Y): drift F, diffusion G
    d = n + m
    F = np.zeros((d, d))
    F[n:, n:] = K
    G = np.vstack([np.eye(n), Lam])
    vl = np.zeros((2 * d, 2 * d))
    vl[:d, :d] = -F
    vl[:d, d:] = G @ G.T
    vl[d:, d:] = F.T
    X = expm(vl * dt)
    cov = X[d:, d:].T @ X[:d, d:]
    cov = 0.5 * (cov + cov.T)
    Cyw = cov[n:, :n]
    Cyy = cov[n:, n:]
    if not with_dw:
        return E, mvec, sqrt_psd(Cyy, "transition covariance")
    s = np.sqrt(dt)
    noise = np.zeros((d, d))
    noise[:n, :n] = s * np.eye(n)
    noise[n:, :n] = Cyw / s
    noise[n:, n:] = sqrt_psd(Cyy - Cyw @ Cyw.T / dt, "conditional transition covariance")
    return E, mvec, noise


def _exp_bt(B: Array, grid: SimGrid) -> Array:
    """``exp(Bᵀ t_k)`` at every grid node."""
    m = B.shape[0]
    step = expm(B.T * grid.dt)
    out = np.empty((grid.nsteps + 1, m, m))
    out[0] = np.eye(m)
    for k in range(grid.nsteps):
        out[k + 1] = out[k] @ step
    return out


# ----------------------------------------------------------------------
# Fused kernel
# ----------------------------------------------------------------------


@nb.njit(nogil=True, cache=True)
def _chunk_kernel(
    k0, k1, path0, nc, nsteps, dt, y0, E, mv, Ln, nw, mode,
    r0, r1, R2, a, A, cL, ML, EB, GA, snaps,
    o_int_r, o_sit, o_its, o_L, o_Y, store, Ypath, dWpath,
):  # fmt: skip
    m = y0.shape[0]
    d = Ln.shape[1]
    tv = E.shape[0] > 1
    words = np.empty((d + 1, nc), dtype=np.uint64)
    z = np.empty((d, nc))
    noise = np.empty((d, nc))
    Y = np.empty((m, nc))
    Yn = np.empty((m, nc))
    r_prev = np.empty(nc)
    t2_prev = np.empty(nc)
    g_prev = np.empty((m, nc))
    th = np.empty(nc)
    int_r = np.zeros(nc)
    sit = np.zeros(nc)
    its = np.zeros(nc)
    Lacc = np.zeros((m, nc))
    nth = a.shape[0]
    for i in range(nc):
        for j in range(m):
            Y[j, i] = y0[j]
    half = 0.5 * dt
    if mode >= MODE_DISCOUNT:
        _rate_theta(Y, nc, r0, r1, R2, a, A, r_prev, t2_prev, mode)
        if mode == MODE_FULL:
            _gvec(Y, nc, cL, ML, EB[0], g_prev)
    if store:
        for i in range(nc):
            for j in range(m):
                Ypath[path0 + i, 0, j] = Y[j, i]
    isnap = 0
    for k in range(nsteps):
        s = k if tv else 0
        fill_chunk(k0, k1, k, path0, nc, d, words, z)
        for r in range(d):
            for i in range(nc):
                noise[r, i] = 0.0
            for c in range(d):
                lrc = Ln[s, r, c]
                if lrc != 0.0:
                    for i in range(nc):
                        noise[r, i] += lrc * z[c, i]
        if mode == MODE_FULL:
            # left-point Itô sums with θ(Y_k) and exp(Bᵀt_k)Aᵀ
            for l in range(nth):
                for i in range(nc):
                    th[i] = a[l]
                for j in range(m):
                    alj = A[l, j]
                    for i in range(nc):
                        th[i] += alj * Y[j, i]
                for i in range(nc):
                    sit[i] += th[i] * noise[l, i]
                for j in range(m):
                    gjl = GA[k, j, l]
                    for i in range(nc):
                        Lacc[j, i] += gjl * noise[l, i]
        for j in range(m):
            for i in range(nc):
                Yn[j, i] = mv[s, j] + noise[nw + j, i]
            for c in range(m):
                ejc = E[s, j, c]
                for i in range(nc):
                    Yn[j, i] += ejc * Y[c, i]
        for j in range(m):
            for i in range(nc):
                Y[j, i] = Yn[j, i]
        if mode >= MODE_DISCOUNT:
            # trapezoid terms at t_{k+1}; th reused for r, z[0] for |θ|²
            _rate_theta(Y, nc, r0, r1, R2, a, A, th, z[0], mode)
            for i in range(nc):
                int_r[i] += half * (r_prev[i] + th[i])
                r_prev[i] = th[i]
            if mode == MODE_FULL:
                for i in range(nc):
                    its[i] += half * (t2_prev[i] + z[0, i])
                    t2_prev[i] = z[0, i]
                _gvec(Y, nc, cL, ML, EB[k + 1], Yn)
                for j in range(m):
                    for i in range(nc):
                        Lacc[j, i] += half * (g_prev[j, i] + Yn[j, i])
                        g_prev[j, i] = Yn[j, i]
        if store:
            for i in range(nc):
                for j in range(m):
                    Ypath[path0 + i, k + 1, j] = Y[j, i]
                for l in range(nw):
                    dWpath[path0 + i, k, l] = noise[l, i]
        if isnap < snaps.shape[0] and k + 1 == snaps[isnap]:
            for i in range(nc):
                o_int_r[isnap, path0 + i] = int_r[i]
                o_sit[isnap, path0 + i] = sit[i]
                o_its[isnap, path0 + i] = its[i]
                for j in range(m):
                    o_L[isnap, path0 + i, j] = Lacc[j, i]
                    o_Y[isnap, path0 + i, j] = Y[j, i]
            isnap += 1


@nb.njit(inline="always", cache=True)
def _rate_theta(Y, nc, r0, r1, R2, a, A, r_out, t2_out, mode):
    m = Y.shape[0]
    for i in range(nc):
        r_out[i] = r0
        t2_out[i] = 0.0
    for j in range(m):
        for i in range(nc):
            r_out[i] += r1[j] * Y[j, i]
        for c in range(m):
            h = 0.5 * R2[j, c]
            if h != 0.0:
                for i in range(nc):
                    r_out[i] += h * Y[j, i] * Y[c, i]
    if mode == MODE_FULL:
        for l in range(a.shape[0]):
            for i in range(nc):
                acc = a[l]
                for j in range(m):
                    acc += A[l, j] * Y[j, i]
                t2_out[i] += acc * acc


@nb.njit(inline="always", cache=True)
def _gvec(Y, nc, cL, ML, EBk, out):
    """``exp(Bᵀt)(c_L + M_L y)`` for every path of the chunk."""
    m = Y.shape[0]
    for j in range(m):
        for i in range(nc):
            out[j, i] = 0.0
    for c in range(m):
        for i in range(nc):
            v = cL[c]
            for e in range(m):
                v += ML[c, e] * Y[e, i]
            for j in range(m):
                out[j, i] += EBk[j, c] * v


def _run_chunks(fn: Callable[[int, int], None], npaths: int, threads: int) -> None:
    starts = list(range(0, npaths, CHUNK))
    sizes = [min(CHUNK, npaths - s) for s in starts]
    if threads <= 1 or len(starts) == 1:
        for s, n in zip(starts, sizes):
            fn(s, n)
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        list(pool.map(fn, starts, sizes))


def _model_arrays(model: QtsmModel):
    cL = model.r1 + model.A.T @ model.a
    ML = model.R2 + model.A.T @ model.A
    return (
        float(model.r0),
        np.ascontiguousarray(model.r1),
        np.ascontiguousarray(model.R2),
        np.ascontiguousarray(model.a),
        np.ascontiguousarray(model.A),
        np.ascontiguousarray(cL),
        np.ascontiguousarray(0.5 * (ML + ML.T)),
    )


def _simulate(
    *,
    model: QtsmModel,
    K_g_steps: tuple[Array, Array, Array],
    grid: SimGrid,
    snaps: Array,
    npaths: int,
    seed: int,
    y0: Array,
    with_dw: bool,
    mode: int,
    store_paths: bool,
    threads: int,
    n: int,
):
    E, mv, Ln = K_g_steps
    k0, k1 = split_seed(seed)
    m = y0.size
    nsnap = snaps.size
    o_int_r = np.zeros((nsnap, npaths))
    o_sit = np.zeros((nsnap, npaths))
    o_its = np.zeros((nsnap, npaths))
    o_L = np.zeros((nsnap, npaths, m))
    o_Y = np.zeros((nsnap, npaths, m))
    nw = n if with_dw else 0
    if store_paths:
        Ypath = np.empty((npaths, grid.nsteps + 1, m))
        dWpath = np.empty((npaths, grid.nsteps, max(nw, 1)))
    else:
        Ypath = np.empty((1, 1, m))
        dWpath = np.empty((1, 1, 1))
    r0, r1, R2, a, A, cL, ML = _model_arrays(model)
    if mode == MODE_FULL:
        EB = _exp_bt(model.B, grid)
        GA = np.ascontiguousarray(EB @ model.A.T)
    else:
        EB = np.zeros((1, m, m))
        GA = np.zeros((1, m, n))

    def work(start: int, size: int) -> None:
        _chunk_kernel(
            k0, k1, start, size, grid.nsteps, grid.dt, y0, E, mv, Ln, nw, mode,
            r0, r1, R2, a, A, cL, ML, EB, GA, snaps,
            o_int_r, o_sit, o_its, o_L, o_Y, store_paths, Ypath, dWpath,
        )  # fmt: skip

    _run_chunks(work, npaths, threads)
    paths = (Ypath, dWpath[:, :, :nw]) if store_paths else (None, None)
    return o_int_r, o_sit, o_its, o_L, o_Y, paths


def _constant_steps(K, g, Lam, dt, with_dw):
    E, mv, Ln = transition(K, g, Lam, dt, with_dw)
    return E[None].copy(), mv[None].copy(), np.ascontiguousarray(Ln[None])


def _snap_indices(horizons: Sequence[float], steps_per_unit: int) -> tuple[np.ndarray, SimGrid]:
    hs = np.asarray(sorted(set(float(h) for h in horizons)))
    grids = [SimGrid.from_rate(h, steps_per_unit) for h in hs]
    return np.array([g.nsteps for g in grids], dtype=np.int64), grids[-1]


def _check_inputs(npaths: int, seed: int, y0, m: int) -> Array:
    if int(npaths) != npaths or npaths < 2:
        raise ValueError("npaths must be an integer >= 2")
    split_seed(seed)
    y0 = np.ascontiguousarray(np.asarray(y0, dtype=np.float64).reshape(-1))
    if y0.size != m or not np.all(np.isfinite(y0)):
        raise ValueError(f"y0 must be a finite vector of length {m}")
    return y0


def simulate_functionals(
    model: QtsmModel,
    horizons: Sequence[float],
    steps_per_unit: int,
    npaths: int,
    seed: int,
    y0,
    threads: int = 1,
    store_paths: bool = False,
) -> dict[float, PathEnsemble]:
    """Physical-measure simulation with ``H_T`` and ``L_T`` at every horizon.

    One driver is simulated to the largest horizon and every shorter horizon
    reads its functionals from the same paths (common random numbers).
    """
    y0 = _check_inputs(npaths, seed, y0, model.m)
    snaps, grid = _snap_indices(horizons, steps_per_unit)
    steps = _constant_steps(model.B, model.b, model.Lambda, grid.dt, True)
    int_r, sit, its, L, Y, (Yp, dWp) = _simulate(
        model=model, K_g_steps=steps, grid=grid, snaps=snaps, npaths=npaths, seed=seed, y0=y0,
        with_dw=True, mode=MODE_FULL, store_paths=store_paths, threads=threads, n=model.n,
    )  # fmt: skip
    out = {}
    mh = model.fingerprint()
    for i, ns in enumerate(snaps):
        g = SimGrid(ns * grid.dt, int(ns))
        f = Functionals(int_r=int_r[i], Y_T=Y[i], stoch_int_theta=sit[i], int_theta_sq=its[i], L=L[i])
        ens = PathEnsemble(npaths, seed, g, y0, "physical", mh, functionals=f)
        if store_paths:
            ens.Y = Yp[:, : ns + 1]
            ens.dW = dWp[:, :ns]
        out[g.T] = ens
    return out


def simulate_discount(
    model: QtsmModel,
    horizons: Sequence[float],
    steps_per_unit: int,
    npaths: int,
    seed: int,
    y0,
    threads: int = 1,
) -> dict[float, PathEnsemble]:
    """Risk-neutral simulation of ``exp(−∫r dt)`` (bond-price Monte Carlo).

    Only the factor innovations are drawn, one normal per factor and step.
    """
    y0 = _check_inputs(npaths, seed, y0, model.m)
    snaps, grid = _snap_indices(horizons, steps_per_unit)
    steps = _constant_steps(model.B_tilde, model.b_tilde, model.Lambda, grid.dt, False)
    int_r, _, _, _, Y, _ = _simulate(
        model=model, K_g_steps=steps, grid=grid, snaps=snaps, npaths=npaths, seed=seed, y0=y0,
        with_dw=False, mode=MODE_DISCOUNT, store_paths=False, threads=threads, n=model.n,
    )  # fmt: skip
    mh = model.fingerprint()
    out = {}
    for i, ns in enumerate(snaps):
        g = SimGrid(ns * grid.dt, int(ns))
        out[g.T] = PathEnsemble(
            npaths, seed, g, y0, "risk_neutral", mh, functionals=Functionals(int_r=int_r[i], Y_T=Y[i])
        )
    return out


def simulate_factor(
    source: QtsmModel | MyopicMeasureCoeffs,
    grid: SimGrid,
    npaths: int,
    seed: int,
    y0,
    model: QtsmModel | None = None,
    threads: int = 1,
    store_paths: bool = True,
) -> PathEnsemble:
    """Factor paths ``Y`` and Brownian increments ``dW``.

    ``source`` is either a model (physical dynamics, exact constant-coefficient
    steps) or myopic-measure coefficients (piecewise-frozen exact steps with
    the drift evaluated at each interval midpoint). ``dW`` are the increments
    of the Brownian motion driving ``Y`` under that measure.
    """
    if isinstance(source, QtsmModel):
        model = source
        steps = _constant_steps(model.B, model.b, model.Lambda, grid.dt, True)
        measure = "physical"
        Lam = model.Lambda
    else:
        if model is None:
            raise ValueError("myopic simulation needs the model for bookkeeping")
        if abs(source.T - grid.T) > 1e-12 * max(1.0, grid.T):
            raise ValueError("myopic coefficients were computed for a different horizon")
        Lam = np.asarray(source.Lambda)
        mids = (np.arange(grid.nsteps) + 0.5) * grid.dt
        gs, Ks = source.at(mids)
        Es, mvs, Lns = [], [], []
        for g, K in zip(gs, Ks):
            E, mv, Ln = transition(K, g, Lam, grid.dt, True)
            Es.append(E)
            mvs.append(mv)
            Lns.append(Ln)
        steps = (np.array(Es), np.array(mvs), np.ascontiguousarray(np.array(Lns)))
        measure = f"myopic({source.gamma:.12g})"
    y0 = _check_inputs(npaths, seed, y0, model.m)
    snaps = np.array([grid.nsteps], dtype=np.int64)
    _, _, _, _, Y, (Yp, dWp) = _simulate(
        model=model, K_g_steps=steps, grid=grid, snaps=snaps, npaths=npaths, seed=seed, y0=y0,
        with_dw=True, mode=MODE_Y, store_paths=store_paths, threads=threads, n=Lam.shape[1],
    )  # fmt: skip
    return PathEnsemble(npaths, seed, grid, y0, measure, model.fingerprint(), Y=Yp, dW=dWp, Y_last=Y[0])


# ----------------------------------------------------------------------
# Functionals from stored paths
# ----------------------------------------------------------------------


def attach_functionals(ensemble: PathEnsemble, model: QtsmModel) -> PathEnsemble:
    """Compute ``∫r``, ``∫θᵀdW``, ``∫|θ|²``, ``H_T`` and ``L_T`` from stored paths."""
    if ensemble.Y is None or ensemble.dW is None:
        raise ValueError("ensemble has no stored paths")
    if ensemble.measure != "physical":
        raise ValueError("functionals are defined for physical-measure paths")
    Y, dW = ensemble.Y, ensemble.dW
    dt = ensemble.grid.dt
    r = model.short_rate(Y)
    th = model.theta(Y)
    th2 = np.sum(th * th, axis=-1)
    int_r = 0.5 * dt * (r[:, :-1] + r[:, 1:]).sum(axis=1)
    its = 0.5 * dt * (th2[:, :-1] + th2[:, 1:]).sum(axis=1)
    sit = np.einsum("nkl,nkl->n", th[:, :-1], dW)
    EB = _exp_bt(model.B, ensemble.grid)
    cL = model.r1 + model.A.T @ model.a
    ML = model.R2 + model.A.T @ model.A
    g = np.einsum("kjc,nkc->nkj", EB, cL + Y @ ML.T)
    L = 0.5 * dt * (g[:, :-1] + g[:, 1:]).sum(axis=1)
    L += np.einsum("kjl,nkl->nj", EB[:-1] @ model.A.T, dW)
    f = Functionals(int_r=int_r, Y_T=Y[:, -1].copy(), stoch_int_theta=sit, int_theta_sq=its, L=L)
    return replace(ensemble, functionals=f, _H=None)


# ----------------------------------------------------------------------
# Estimators
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class McEstimate:
    mean: float | Array
    se: float | Array
    npaths: int

    def __iter__(self):
        return iter((self.mean, self.se))


def estimate(samples, weights=None) -> McEstimate:
    """Sample mean and standard error, optionally self-normalized by ``weights``.

    Without weights the standard error uses the ``n−1`` sample variance. With
    weights the estimate is ``Σwx/Σw`` and its delta-method standard error is
    ``sqrt(Σw²(x−m)²)/Σw``. Samples may be ``(N,)`` or ``(N, k)``.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.shape[0] < 1:
        raise ValueError("need at least one sample")
    N = x.shape[0]
    if weights is None:
        mean = x.mean(axis=0)
        se = x.std(axis=0, ddof=1) / np.sqrt(N) if N > 1 else np.zeros_like(mean)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != (N,) or np.any(w < 0):
            raise ValueError("weights must be nonnegative with one entry per sample")
        sw = w.sum()
        if not sw > 0:
            raise DegenerateEstimateError("all weights are zero")
        wb = w.reshape((N,) + (1,) * (x.ndim - 1))
        mean = (wb * x).sum(axis=0) / sw
        se = np.sqrt(((wb * (x - mean)) ** 2).sum(axis=0)) / sw
    if np.ndim(mean) == 0:
        return McEstimate(float(mean), float(se), N)
    return McEstimate(mean, se, N)


# ----------------------------------------------------------------------
# Discretization study
# ----------------------------------------------------------------------


@dataclass(frozen=True)
class ConvergenceRow:
    nsteps: int
    mean: float
    se: float
    bias: float
    flagged: bool


@dataclass(frozen=True)
class ConvergenceReport:
    rows: tuple[ConvergenceRow, ...]
    richardson_limit: float
    order: float

    def bias_ratios(self) -> Array:
        """Successive ``|bias(n)| / |bias(2n)|``."""
        b = np.array([abs(r.bias) for r in self.rows])
        with np.errstate(divide="ignore", invalid="ignore"):
            return b[:-1] / b[1:]


FUNCTIONALS: dict[str, Callable[[PathEnsemble], Array]] = {
    "H": lambda e: e.H,
    "L": lambda e: e.L[:, 0],
    "int_r": lambda e: e.functionals.int_r,
    "discount": lambda e: e.functionals.discount,
}


def coarsen(ensemble: PathEnsemble, factor: int) -> PathEnsemble:
    """Paths on a grid ``factor`` times coarser, sharing the same Brownian path."""
    if ensemble.Y is None or ensemble.dW is None:
        raise ValueError("ensemble has no stored paths")
    ns = ensemble.grid.nsteps
    if ns % factor:
        raise ValueError("ladder levels must divide the finest step count")
    Y = ensemble.Y[:, ::factor]
    dW = ensemble.dW.reshape(ensemble.npaths, ns // factor, factor, -1).sum(axis=2)
    return replace(ensemble, grid=SimGrid(ensemble.grid.T, ns // factor), Y=Y, dW=dW, functionals=None, _H=None)


def convergence_study(
    model: QtsmModel,
    functional: str | Callable[[PathEnsemble], Array],
    ladder: Sequence[int],
    T: float,
    npaths: int,
    seed: int,
    y0,
    order: float = 2.0,
    threads: int = 1,
) -> ConvergenceReport:
    """Functional means along a ladder of step counts on one set of Brownian paths.

    The finest level is simulated and coarser levels reuse its factor values
    at their nodes with summed Brownian increments, so all levels share the
    same driving noise. The Richardson limit uses the two finest levels and
    the assumed quadrature ``order``; a level is flagged when its estimated
    bias exceeds a third of its standard error.
    """
    fn = FUNCTIONALS[functional] if isinstance(functional, str) else functional
    ladder = sorted(int(n) for n in ladder)
    finest = ladder[-1]
    ens = simulate_factor(model, SimGrid(T, finest), npaths, seed, y0, threads=threads)
    means, ses = [], []
    for n in ladder:
        e = attach_functionals(coarsen(ens, finest // n), model)
        est = estimate(fn(e))
        means.append(est.mean)
        ses.append(est.se)
    if len(ladder) >= 2:
        ratio = (ladder[-1] / ladder[-2]) ** order
        limit = means[-1] + (means[-1] - means[-2]) / (ratio - 1.0)
    else:
        limit = means[-1]
    rows = tuple(
        ConvergenceRow(n, float(mu), float(se), float(mu - limit), bool(abs(mu - limit) > se / 3.0))
        for n, mu, se in zip(ladder, means, ses)
    )
    return ConvergenceReport(rows, float(limit), order)
