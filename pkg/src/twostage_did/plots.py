"""Render event-study figures to files.

Uses the non-interactive Agg backend so figures can be written from
headless runs; nothing here opens a window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

SERIES_COLORS = ("steelblue", "#82b446", "dimgrey", "firebrick")


@dataclass
class EventStudySeries:
    """One estimator's event-study path for plotting."""

    label: str
    rel_times: list[float]
    estimates: list[float]
    ci_low: list[float] | None = None
    ci_high: list[float] | None = None


def save_event_study_figure(
    series: list[EventStudySeries],
    path: str | Path,
    title: str = "Event study",
    dpi: int = 150,
) -> Path:
    """Plot estimates against relative time and write a PNG.

    Never-treated terms (infinite relative time) are dropped from the
    plot; multiple series are dodged horizontally so their intervals do
    not overprint. A dashed vertical line sits between the last lead and
    the first lag, and a horizontal line marks zero.
    """
    path = Path(path)
    fig, ax = plt.subplots(figsize=(8, 5))
    n = max(len(series), 1)
    for i, s in enumerate(series):
        finite = [j for j, v in enumerate(s.rel_times) if math.isfinite(v)]
        if not finite:
            continue
        x = np.array([s.rel_times[j] for j in finite], dtype=float)
        x = x + (i - (n - 1) / 2) * 0.15
        est = np.array([s.estimates[j] for j in finite])
        color = SERIES_COLORS[i % len(SERIES_COLORS)]
        if s.ci_low is not None and s.ci_high is not None:
            lo = np.array([s.ci_low[j] for j in finite])
            hi = np.array([s.ci_high[j] for j in finite])
            ax.errorbar(
                x, est, yerr=[est - lo, hi - est], fmt="o", ms=4,
                color=color, ecolor=color, elinewidth=1, capsize=2, label=s.label,
            )
        else:
            ax.plot(x, est, "o", ms=4, color=color, label=s.label)
    ax.axhline(0.0, color="black", linewidth=0.8)
    ax.axvline(-0.5, color="grey", linestyle="--", linewidth=0.8)
    ax.set_xlabel("Relative time to treatment")
    ax.set_ylabel("Estimate")
    ax.set_title(title)
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=dpi)
    plt.close(fig)
    return path
