"""Command-line front end.

Every subcommand reads one TOML config. The global flags override the
``[run]`` table, and the effective config is written to ``manifest.json``
together with the SHA-256 of every output file. Exit codes: 0 on success,
1 when a check or verdict fails, 2 when the command line or config cannot
be parsed.
"""

from __future__ import annotations

import argparse
import copy
import logging
import os
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io
from .model import ModelStructureError, QtsmModel, validate
from .montecarlo import estimate, simulate_discount, simulate_functionals
from .plotting import bond_plot, rate_plot
from .portfolio import decompose
from .pricing import bond_curve, bond_system, crra_exponent, crra_feedback, crra_system, moment_system
from .riccati import are_limit, solve_system
from .turnpike import (
    COMPONENTS,
    ExperimentConfig,
    ExperimentRefused,
    TurnpikeReport,
    fit_rate,
    run_experiment,
    theory_for,
)
from .utility import Log, Power, UtilityDomainError

OUT_ENV = "QTSM_TURNPIKE_OUT"
DEFAULT_OUT = "qtsm_out"
RUN_DEFAULTS = {"seed": 20240601, "paths": 100_000, "steps_per_unit": 20, "threads": 1}

log = logging.getLogger("qtsm_turnpike")


class UsageError(Exception):
    """Bad input detected after argument parsing; maps to exit code 2."""


# ----------------------------------------------------------------------
# Argument parsing
# ----------------------------------------------------------------------


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=Path, default=d, help="TOML config file")
    parser.add_argument("--seed", type=int, default=d, help="64-bit RNG seed")
    parser.add_argument("--paths", type=int, default=d, help="Monte Carlo paths")
    parser.add_argument("--steps-per-unit", dest="steps_per_unit", type=int, default=d, help="time steps per year")
    parser.add_argument("--threads", type=int, default=d, help="worker threads (results do not depend on it)")
    parser.add_argument("--out", type=Path, default=d, help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qtsm-turnpike", description="Turnpike experiments in quadratic term-structure models")
    _global_flags(p, suppress=False)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    sv = sub.add_parser("validate", parents=[common], help="check the model assumptions")
    sv.add_argument("--gamma", type=_floats, help="exponents for the positivity check (default: from the pairs)")

    sr = sub.add_parser("riccati", parents=[common], help="solve a Riccati system and its long-horizon limit")
    sr.add_argument("--system", choices=("bond", "crra", "moment"))
    sr.add_argument("--p", type=float, help="CRRA exponent for --system crra")
    sr.add_argument("--gamma", type=float, help="moment order for --system moment")
    sr.add_argument("--T", type=float)

    sb = sub.add_parser("bond", parents=[common], help="zero-coupon bond prices")
    sb.add_argument("--horizons", type=_floats)
    sb.add_argument("--mc", action="store_true", help="add Monte Carlo columns using --paths or [run].paths")

    sp = sub.add_parser("portfolio", parents=[common], help="myopic and hedging positions")
    sp.add_argument("--utility")
    sp.add_argument("--T", type=float)
    sp.add_argument("--x", type=float)

    st = sub.add_parser("turnpike", parents=[common], help="rate experiment for one utility pair")
    st.add_argument("--pair")

    sc = sub.add_parser("collective", parents=[common], help="Pareto and linear sharing rules against one reference")
    sc.add_argument("--pareto")
    sc.add_argument("--linear")
    sc.add_argument("--reference")
    return p


# ----------------------------------------------------------------------
# Shared plumbing
# ----------------------------------------------------------------------


class Context:
    def __init__(self, args: argparse.Namespace):
        if args.config is None:
            raise UsageError("--config is required")
        self.args = args
        self.cfg = io.load_config(args.config)
        run = dict(RUN_DEFAULTS)
        run.update(self.cfg.get("run", {}))
        for key in RUN_DEFAULTS:
            v = getattr(args, key, None)
            if v is not None:
                run[key] = v
        if run["threads"] < 1 or run["paths"] < 2 or run["steps_per_unit"] < 1:
            raise UsageError("threads >= 1, paths >= 2 and steps-per-unit >= 1 are required")
        if not 0 <= int(run["seed"]) < 2**64:
            raise UsageError("seed must be an unsigned 64-bit integer")
        self.run = run
        self.effective = copy.deepcopy(self.cfg)
        self.effective["run"] = dict(run)
        out = args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT
        self.out = Path(out)
        self.files: list[Path] = []
        self.t0 = time.perf_counter()

    @property
    def model(self) -> QtsmModel:
        return io.model_from_config(self.cfg)

    def section(self, name: str) -> dict:
        s = self.cfg.get(name, {})
        if not isinstance(s, dict):
            raise io.ConfigError(f"[{name}] must be a table")
        return s

    def outdir(self) -> Path:
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out

    def csv(self, name: str, header, rows) -> Path:
        path = io.write_csv(self.outdir() / name, header, rows)
        self.files.append(path)
        return path

    def add(self, path: Path) -> None:
        self.files.append(path)

    def manifest(self, command: str) -> Path:
        return io.write_manifest(
            self.outdir(), self.effective, self.run["seed"], self.files, time.perf_counter() - self.t0, command
        )


# ----------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------


def _pair_gammas(ctx: Context) -> list[float]:
    utils = io.utilities_from_config(ctx.cfg)
    out: set[float] = set()
    for pid, pair in ctx.section("pairs").items():
        try:
            th = theory_for(io.get_utility(utils, pair["u1"]), io.get_utility(utils, pair["u2"]), pair.get("beta"))
        except UtilityDomainError:
            continue
        out.update({th.q, 1.0 + th.alpha})
    out.discard(0.0)
    return sorted(out)


def cmd_validate(ctx: Context) -> int:
    gammas = ctx.args.gamma if ctx.args.gamma is not None else ctx.section("validate").get("gamma")
    if gammas is None:
        gammas = _pair_gammas(ctx)
    rep = validate(ctx.model, gammas)
    for line in rep.lines():
        print(line)
    print("model: PASS" if rep.passed else "model: FAIL")
    return 0 if rep.passed else 1


def cmd_riccati(ctx: Context) -> int:
    sec = ctx.section("riccati")
    system = ctx.args.system or sec.get("system", "bond")
    T = float(ctx.args.T if ctx.args.T is not None else sec.get("T", 10.0))
    model = ctx.model
    if system == "bond":
        spec, co = bond_system(model, T)
    elif system == "crra":
        p = ctx.args.p if ctx.args.p is not None else sec.get("p")
        if p is None:
            raise UsageError("--system crra needs --p or [riccati].p")
        spec, co = crra_system(model, float(p), T)
    else:
        g = ctx.args.gamma if ctx.args.gamma is not None else sec.get("gamma")
        if g is None:
            raise UsageError("--system moment needs --gamma or [riccati].gamma")
        spec, co = moment_system(model, float(g), T)
    sol = solve_system(spec, co, int(sec.get("steps_per_unit", 2000)))
    stride = max(1, int(sec.get("stride", 100)))
    rows = sol.to_rows()
    keep = rows[::stride]
    if keep[-1] is not rows[-1]:
        keep.append(rows[-1])
    ctx.csv("riccati.csv", sol.header(), keep)
    lim = are_limit(spec, co)
    ctx.csv(
        "riccati_limit.csv",
        ["quantity", "value"],
        [["C_inf_" + str(i) + str(j), lim.Cinf[i, j]] for i in range(spec.m) for j in range(spec.m)]
        + [["beta_inf_" + str(i), lim.betainf[i]] for i in range(spec.m)]
        + [
            ["are_residual", lim.residual],
            ["closed_loop_max_real_part", lim.closed_loop_max_realpart],
            ["scalar_rate", lim.scalar_rate],
        ],
    )
    ctx.manifest("riccati")
    print(
        f"system={system} T={T:g}: ARE residual={lim.residual:.3e}, "
        f"closed-loop max real part={lim.closed_loop_max_realpart:.6g}, rate={lim.scalar_rate:.6g}"
    )
    return 0


def cmd_bond(ctx: Context) -> int:
    sec = ctx.section("bond")
    horizons = ctx.args.horizons if ctx.args.horizons is not None else sec.get("horizons", [1.0, 5.0, 10.0])
    horizons = sorted(float(h) for h in horizons)
    if any(h < 0 for h in horizons):
        raise UsageError("horizons must be nonnegative")
    y = np.asarray(sec.get("y", [0.0] * ctx.model.m), dtype=np.float64)
    model = ctx.model
    pos = [h for h in horizons if h > 0]
    closed = dict(zip(pos, bond_curve(model, pos).prices(y))) if pos else {}
    closed.update({h: 1.0 for h in horizons if h == 0})
    with_mc = ctx.args.mc or ctx.args.paths is not None or bool(sec.get("mc", False))
    header = ["T", "closed_form"]
    rows = []
    if with_mc:
        header += ["mc_mean", "mc_se"]
        ens = {}
        if pos:
            ens = simulate_discount(
                model, pos, ctx.run["steps_per_unit"], ctx.run["paths"], ctx.run["seed"], y, threads=ctx.run["threads"]
            )
        for h in horizons:
            if h == 0:
                rows.append([h, 1.0, 1.0, 0.0])
                continue
            est = estimate(ens[h].functionals.discount)
            rows.append([h, closed[h], est.mean, est.se])
    else:
        rows = [[h, closed[h]] for h in horizons]
    ctx.csv("bond.csv", header, rows)
    T = [r[0] for r in rows]
    if with_mc:
        ctx.add(bond_plot(ctx.outdir() / "bond.svg", T, [r[1] for r in rows], [r[2] for r in rows], [r[3] for r in rows]))
    else:
        ctx.add(bond_plot(ctx.outdir() / "bond.svg", T, [r[1] for r in rows]))
    ctx.manifest("bond")
    for r in rows:
        print(",".join(io.fmt(v) for v in r))
    return 0


def cmd_portfolio(ctx: Context) -> int:
    sec = ctx.section("portfolio")
    utils = io.utilities_from_config(ctx.cfg)
    name = ctx.args.utility or sec.get("utility")
    if name is None:
        raise UsageError("--utility or [portfolio].utility is required")
    u = io.get_utility(utils, name)
    T = float(ctx.args.T if ctx.args.T is not None else sec.get("T", 5.0))
    x = float(ctx.args.x if ctx.args.x is not None else sec.get("x", 1.0))
    model = ctx.model
    y = np.asarray(sec.get("y", [0.0] * model.m), dtype=np.float64)
    ens = simulate_functionals(
        model, [T], ctx.run["steps_per_unit"], ctx.run["paths"], ctx.run["seed"], y, threads=ctx.run["threads"]
    )[T]
    dec = decompose(u, model, ens, x, y)
    closed = None
    if isinstance(u, (Power, Log)):
        closed = crra_feedback(model, crra_exponent(u), 0.0, T, x, y)
    rows = []
    for comp, val, se, cf in (
        ("myopic", dec.myopic, dec.myopic_se, None if closed is None else closed.myopic),
        ("hedging", dec.hedging, dec.hedging_se, None if closed is None else closed.hedging),
        ("total", dec.total, dec.total_se, None if closed is None else closed.total),
    ):
        for i in range(model.n):
            rows.append([name, T, x, comp, i, val[i], se[i], "" if cf is None else cf[i]])
    ctx.csv("portfolio.csv", ["utility", "T", "x", "component", "asset", "value", "se", "closed_form"], rows)
    ctx.manifest("portfolio")
    for r in rows:
        print(",".join(io.fmt(v) for v in r))
    return 0


def experiment_from_config(ctx: Context, pair_id: str | None) -> tuple[str, ExperimentConfig]:
    sec = ctx.section("turnpike")
    pairs = ctx.section("pairs")
    pair_id = pair_id or sec.get("pair")
    if pair_id is None:
        raise UsageError("--pair or [turnpike].pair is required")
    if pair_id not in pairs:
        raise io.ConfigError(f"unknown pair {pair_id!r}; defined: {sorted(pairs)}")
    pair = pairs[pair_id]
    utils = io.utilities_from_config(ctx.cfg)
    model = ctx.model
    cfg = ExperimentConfig(
        model=model,
        u1=io.get_utility(utils, pair["u1"]),
        u2=io.get_utility(utils, pair["u2"]),
        x=float(pair.get("x", sec.get("x", 1.0))),
        y=pair.get("y", sec.get("y", [0.0] * model.m)),
        Tgrid=sec.get("horizons", [2.0 * k for k in range(1, 11)]),
        npaths=int(ctx.run["paths"]),
        steps_per_unit=int(ctx.run["steps_per_unit"]),
        seed=int(ctx.run["seed"]),
        components=tuple(pair.get("components", sec.get("components", COMPONENTS[:3]))),
        threads=int(ctx.run["threads"]),
        tolerance=float(sec.get("tolerance", 0.2)),
        beta=pair.get("beta"),
        xgrid=sec.get("xgrid"),
    )
    return pair_id, cfg


def write_turnpike_outputs(ctx: Context, rep: TurnpikeReport, prefix: str = "") -> None:
    rows = []
    for r in rep.rows:
        for c in rep.config.components:
            g = r.gaps[c]
            used = bool(g.mean > 3.0 * g.se and g.mean > 0)
            rows.append([r.T, r.EH, c, g.mean, g.se, used, r.lambda1, r.lambda2, r.d_lhs, r.d_rhs, r.d_holds, r.holder_ok])
    ctx.csv(
        f"{prefix}report.csv",
        ["T", "EH", "component", "gap", "se", "used", "lambda1", "lambda2", "d_lhs", "d_rhs", "d_bound_holds", "holder_holds"],
        rows,
    )
    rates = []
    for c, f in rep.fits.items():
        rates.append([c, f.slope, f.halfwidth, rep.theory.exponent, rep.theory.supremum, f.n_used, f.points_dropped, f.verdict])
    ctx.csv(
        f"{prefix}rates.csv",
        ["component", "slope", "ci_halfwidth", "theory", "theory_is_supremum", "n_used", "points_dropped", "verdict"],
        rates,
    )
    EH = [r.EH for r in rep.rows]
    for c, f in rep.fits.items():
        if not rep.rows:
            continue
        gap = [r.gaps[c].mean for r in rep.rows]
        se = [r.gaps[c].se for r in rep.rows]
        used = [g > 3.0 * s and g > 0 for g, s in zip(gap, se)]
        intercept = float("nan")
        if np.isfinite(f.slope):
            intercept = fit_rate(EH, gap, se).intercept
        path = ctx.outdir() / f"{prefix}{c}.svg"
        ctx.add(rate_plot(path, EH, gap, se, used, f.slope, intercept, rep.theory.exponent, f"{prefix}{c}".strip("_")))


_GUIDANCE = "increase --paths or widen the horizon grid so that gaps exceed 3 standard errors"


def cmd_turnpike(ctx: Context) -> int:
    pair_id, cfg = experiment_from_config(ctx, ctx.args.pair)
    try:
        rep = run_experiment(cfg)
    except ExperimentRefused as exc:
        print(f"refused: {exc}")
        return 1
    write_turnpike_outputs(ctx, rep)
    ctx.manifest("turnpike")
    for c, f in rep.fits.items():
        print(f"{c}: slope={f.slope:.4f} +/- {f.halfwidth:.4f}, used={f.n_used}, dropped={f.points_dropped}, verdict={f.verdict}")
    if "myopic" in rep.fits and "hedging" in rep.fits and rep.verdict not in ("degenerate",):
        print(f"myopic and hedging slopes agree: {rep.rates_agree()}")
    print(rep.summary())
    if rep.verdict == "insufficient-signal":
        print(f"guidance: {_GUIDANCE}")
    if rep.incomplete:
        print(f"incomplete: {rep.error}")
    return 0 if rep.verdict in ("PASS", "STEEPER", "degenerate") else 1


def cmd_collective(ctx: Context) -> int:
    sec = ctx.section("collective")
    utils = io.utilities_from_config(ctx.cfg)
    names = {k: getattr(ctx.args, k) or sec.get(k) for k in ("pareto", "linear", "reference")}
    missing = [k for k, v in names.items() if v is None]
    if missing:
        raise UsageError(f"[collective] needs {', '.join(missing)}")
    tp = ctx.section("turnpike")
    model = ctx.model
    base = dict(
        model=model,
        u2=io.get_utility(utils, names["reference"]),
        x=float(sec.get("x", tp.get("x", 1.0))),
        y=sec.get("y", tp.get("y", [0.0] * model.m)),
        Tgrid=sec.get("horizons", tp.get("horizons", [2.0 * k for k in range(1, 11)])),
        npaths=int(ctx.run["paths"]),
        steps_per_unit=int(ctx.run["steps_per_unit"]),
        seed=int(ctx.run["seed"]),
        components=tuple(sec.get("components", ("myopic",))),
        threads=int(ctx.run["threads"]),
        tolerance=float(sec.get("tolerance", tp.get("tolerance", 0.2))),
    )
    cp = ExperimentConfig(u1=io.get_utility(utils, names["pareto"]), **base)
    cl = ExperimentConfig(u1=io.get_utility(utils, names["linear"]), beta=sec.get("beta"), **base)
    ens = simulate_functionals(model, cp.Tgrid, cp.steps_per_unit, cp.npaths, cp.seed, cp.y, threads=cp.threads)
    try:
        rp = run_experiment(cp, ens)
        rl = run_experiment(cl, ens)
    except ExperimentRefused as exc:
        print(f"refused: {exc}")
        return 1
    write_turnpike_outputs(ctx, rp, "pareto_")
    write_turnpike_outputs(ctx, rl, "linear_")
    fp, fl = rp.primary, rl.primary
    tol = cp.tolerance
    ok = fp is not None and fl is not None and np.isfinite(fp.slope) and np.isfinite(fl.slope)
    verdict = "PASS" if ok and fl.slope >= fp.slope - tol else ("insufficient-signal" if not ok else "FAIL")
    ctx.csv(
        "collective.csv",
        ["rule", "slope", "ci_halfwidth", "theory", "theory_is_supremum"],
        [
            ["pareto", fp.slope if fp else float("nan"), fp.halfwidth if fp else float("nan"), rp.theory.exponent, False],
            ["linear", fl.slope if fl else float("nan"), fl.halfwidth if fl else float("nan"), rl.theory.exponent, True],
        ],
    )
    ctx.manifest("collective")
    print(f"pareto: {rp.summary()}")
    print(f"linear: slope={fl.slope if fl else float('nan'):.4f}, supremum={rl.theory.exponent:.4f}")
    print(f"linear sharing decays at least as fast as Pareto (tolerance {tol:g}): verdict={verdict}")
    return 0 if verdict == "PASS" else 1


COMMANDS = {
    "validate": cmd_validate,
    "riccati": cmd_riccati,
    "bond": cmd_bond,
    "portfolio": cmd_portfolio,
    "turnpike": cmd_turnpike,
    "collective": cmd_collective,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        ctx = Context(args)
        return COMMANDS[args.command](ctx)
    except (io.ConfigError, UsageError, ModelStructureError, UtilityDomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
