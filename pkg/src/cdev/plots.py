"""SVG rendering of effect curves.

Plots are write-only report artifacts with a fixed 800x500 viewBox; the CSVs
next to them remain the source of truth.
"""

from __future__ import annotations

import os
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .causal import EffectCurve  # noqa: E402

_POINTS_PER_INCH = 72.0
_FIGSIZE = (800.0 / _POINTS_PER_INCH, 500.0 / _POINTS_PER_INCH)
# deterministic element ids so reruns produce identical files
matplotlib.rcParams["svg.hashsalt"] = "cdev"

_TRAIN_RANGE = (-1.0, 1.0)


def plot_effect_curves(
    curves: Sequence[EffectCurve],
    path: str | os.PathLike,
    title: str,
    ylabel: str,
) -> None:
    """One line per bit over the dose grid, training range marked by dashed
    verticals. Absent estimates leave gaps in the line."""
    fig, ax = plt.subplots(figsize=_FIGSIZE)
    try:
        for curve in curves:
            xs = list(curve.doses)
            ys = [e if e is not None else float("nan") for e in curve.estimates]
            ax.plot(xs, ys, marker=".", markersize=3, linewidth=1.2, label=f"bit {curve.bit}")
        for edge in _TRAIN_RANGE:
            ax.axvline(edge, color="gray", linestyle="--", linewidth=0.8)
        ax.set_xlabel("dose")
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        ax.legend(loc="best", fontsize=8)
        ax.grid(True, alpha=0.3)
        fig.savefig(path, format="svg", metadata={"Date": None})
    finally:
        plt.close(fig)
