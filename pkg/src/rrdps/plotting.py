"""Figure rendering for session reports, sweeps and phase-lock stability runs.

Figures are drawn on standalone ``Figure`` objects with the Agg canvas so
rendering never touches pyplot's global state and works headless.
"""
from __future__ import annotations

import math
from pathlib import Path
from typing import Sequence, Union

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

STYLE = {
    "font.size": 10,
    "axes.labelsize": 10,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.0,
}


def figure_size(width: float = 6.0, height: float = None) -> tuple[float, float]:
    golden = (math.sqrt(5) - 1.0) / 2.0
    return width, height if height else width * golden


def new_figure(width: float = 6.0, height: float = None):
    import matplotlib

    with matplotlib.rc_context(STYLE):
        fig = Figure(figsize=figure_size(width, height), dpi=120)
        FigureCanvasAgg(fig)
        ax = fig.add_subplot(111)
    return fig, ax


def save(fig: Figure, path: Union[str, Path]) -> Path:
    path = Path(path)
    try:
        fig.tight_layout()
        fig.savefig(path)
    except OSError as exc:
        raise OSError(f"could not write figure {path}: {exc}") from exc
    return path


def plot_error_by_delay(report, path: Union[str, Path]) -> Path:
    """Bar chart of e_bit for every delay with the overall mean drawn across it."""
    fig, ax = new_figure()
    L = report.L
    e = np.asarray(report.e_bit_per_delay or [0.0] * L, dtype=float)
    d = np.arange(1, L)
    ax.bar(d, 100 * e[1:], width=1.0, color="tab:blue", alpha=0.7, label="per delay")
    ax.axhline(100 * report.e_bit, color="tab:red", ls="--", label=f"mean {100 * report.e_bit:.2f}%")
    ax.set_xlabel("delay d (pulses)")
    ax.set_ylabel("bit error rate (%)")
    ax.set_xlim(0, L)
    ax.set_title(f"{report.mode}: e_bit by delay, L={L}")
    ax.legend(loc="upper right")
    return save(fig, path)


def plot_sweep(rows: Sequence[dict], path: Union[str, Path]) -> Path:
    fig, ax = new_figure()
    x = np.array([r["value"] for r in rows], dtype=float)
    y = np.array([r["rate_per_round"] for r in rows], dtype=float)
    ax.plot(x, y, "o-", ms=3)
    ax.axhline(0.0, color="k", lw=0.5)
    ax.set_xlabel(rows[0]["param"] if rows else "")
    ax.set_ylabel("key bits per train")
    ax.set_title("key rate sweep")
    return save(fig, path)


def plot_visibility_traces(trace, delays: Sequence[int], path: Union[str, Path]) -> Path:
    """Effective visibility over time for selected delays, with the threshold line."""
    fig, ax = new_figure()
    hours = trace.times / 3600.0
    for d in delays:
        ax.plot(hours, 100 * trace.visibility[:, d], lw=0.6, label=f"d={d}")
    ax.axhline(100 * trace.threshold, color="k", ls="--", lw=0.8)
    ax.set_xlabel("time (h)")
    ax.set_ylabel("visibility (%)")
    ax.set_ylim(100 * trace.threshold - 4, 100.5)
    ax.legend(loc="lower left")
    return save(fig, path)
