"""Optional figures for CLI reports (PNG files, non-interactive backend)."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np


def _pyplot():
    try:
        import matplotlib
    except ImportError:
        from .errors import ValidationError

        raise ValidationError("--figures needs matplotlib (install the 'figures' extra)") from None

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _save(fig, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps the bytes reproducible
    fig.savefig(path, dpi=100, metadata={"Software": None})
    fig.clf()
    return path


def spectrum_figure(rows, path: Path) -> Path:
    """Min-max values against ``k``; infinite values are drawn at the top edge."""
    plt = _pyplot()
    ks = np.array([r.k for r in rows])
    vals = np.array([r.lambda_upper for r in rows], float)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    fin = np.isfinite(vals)
    ax.plot(ks[fin], vals[fin], "o-", label=r"$\Lambda_k$")
    if (~fin).any():
        top = vals[fin].max() * 1.2 if fin.any() else 1.0
        ax.plot(ks[~fin], np.full((~fin).sum(), top), "^", color="C3", label="inf")
    ax.set_xlabel("k")
    ax.set_ylabel("min-max value")
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def continuity_figure(report, path: Path) -> Path:
    """Member values per ``k`` with the limit drawn as dashed lines, and the relative gaps."""
    plt = _pyplot()
    fig, (a, b) = plt.subplots(1, 2, figsize=(9, 3.5))
    idx = np.arange(report.values.shape[0])
    for k in range(report.k_max):
        line, = a.plot(idx, report.values[:, k], "o-", label=f"k={k + 1}")
        if math.isfinite(report.limit[k]):
            a.axhline(report.limit[k], ls="--", color=line.get_color(), lw=0.8)
            g = report.gaps[:, k]
            if np.any(g > 0):
                b.semilogy(idx[g > 0], g[g > 0], "o-", color=line.get_color(), label=f"k={k + 1}")
    a.set_xticks(idx)
    b.set_xticks(idx)
    a.set_xlabel("member index")
    a.set_ylabel("min-max value")
    a.legend(fontsize=7)
    b.set_xlabel("member index")
    b.set_ylabel("relative gap")
    fig.tight_layout()
    return _save(fig, path)


def trajectory_figure(traj, path: Path) -> Path:
    """Energy and slope along a discrete flow."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    t = traj.column("t")
    ax.plot(t, traj.column("energy"), label="energy")
    ax.plot(t, traj.column("slope"), label="slope")
    ax.set_xlabel("t")
    ax.set_yscale("symlog", linthresh=1e-6)
    ax.legend()
    fig.tight_layout()
    return _save(fig, path)


def plan_figure(plan, path: Path) -> Path:
    """Heat map of a coupling matrix."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(plan.plan, aspect="auto", interpolation="nearest", cmap="viridis")
    ax.set_xlabel("target atom")
    ax.set_ylabel("source atom")
    fig.colorbar(im, ax=ax)
    fig.tight_layout()
    return _save(fig, path)
