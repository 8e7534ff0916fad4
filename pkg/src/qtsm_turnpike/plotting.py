"""Log-log SVG figures for rate experiments.

Figures are written with a fixed SVG hash salt and no date metadata, so
identical data produce byte-identical files.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

SVG_SALT = "qtsm-turnpike"


def _save(fig, path: Path) -> Path:
    with matplotlib.rc_context({"svg.hashsalt": SVG_SALT, "svg.fonttype": "none"}):
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def rate_plot(
    path: str | Path,
    EH: Sequence[float],
    gap: Sequence[float],
    se: Sequence[float],
    used: Sequence[bool],
    slope: float,
    intercept: float,
    theory: float,
    title: str,
) -> Path:
    """``log10 gap`` against ``log10 E[H_T]`` with the fitted line and a theory guide.

    The guide has the theoretical slope and passes through the fitted line at
    the centre of the used abscissae. Rows dropped by the noise filter are
    drawn as open markers.
    """
    EH = np.asarray(EH, dtype=np.float64)
    gap = np.asarray(gap, dtype=np.float64)
    se = np.asarray(se, dtype=np.float64)
    used = np.asarray(used, dtype=bool)
    pos = gap > 0
    lx = np.log10(EH)
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    ok = used & pos
    lo = np.where(ok, np.log10(np.maximum(gap - se, gap * 1e-3)), np.nan)
    hi = np.where(ok, np.log10(gap + se), np.nan)
    ly = np.where(pos, np.log10(np.where(pos, gap, 1.0)), np.nan)
    ax.errorbar(lx[ok], ly[ok], yerr=np.vstack([ly[ok] - lo[ok], hi[ok] - ly[ok]]), fmt="o", color="C0", label="estimate")
    drop = ~used & pos
    if drop.any():
        ax.plot(lx[drop], ly[drop], "o", mfc="none", color="C0", label="below noise filter")
    if np.isfinite(slope) and ok.any():
        xs = np.linspace(lx[ok].min(), lx[ok].max(), 2)
        # the fit is in natural logs; convert the intercept to base 10
        ax.plot(xs, slope * xs + intercept / np.log(10.0), "-", color="C1", label=f"fit slope {slope:.3f}")
        xc = 0.5 * (xs[0] + xs[1])
        yc = slope * xc + intercept / np.log(10.0)
        ax.plot(xs, yc + theory * (xs - xc), "--", color="0.4", label=f"theory slope {theory:.3f}")
    ax.set_xlabel(r"$\log_{10} E[H_T]$")
    ax.set_ylabel(r"$\log_{10}$ gap")
    ax.set_title(title)
    ax.legend(loc="best", fontsize="small")
    fig.tight_layout()
    return _save(fig, Path(path))


def bond_plot(path: str | Path, T, closed, mc=None, se=None) -> Path:
    """Bond prices against maturity, with Monte Carlo error bars when given."""
    fig, ax = plt.subplots(figsize=(5.5, 4.0))
    ax.plot(T, closed, "-", color="C1", label="closed form")
    if mc is not None:
        ax.errorbar(T, mc, yerr=3 * np.asarray(se), fmt="o", color="C0", label="Monte Carlo (3 SE)")
    ax.set_xlabel("maturity")
    ax.set_ylabel("price")
    ax.legend(loc="best", fontsize="small")
    fig.tight_layout()
    return _save(fig, Path(path))
