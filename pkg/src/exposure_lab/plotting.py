"""Line plots of report columns against t, written as SVG."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GOLDEN = (np.sqrt(5) - 1.0) / 2.0
FIG_WIDTH = 4.5
COLORS = ["#08589e", "#e6550d", "#31a354", "#756bb1", "#636363"]

PARAMS = {
    "axes.prop_cycle": matplotlib.cycler(color=COLORS),
    "axes.labelsize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "font.size": 9,
    "legend.fontsize": 8,
    "legend.frameon": False,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "lines.linewidth": 1.2,
    "lines.markersize": 3,
    "figure.figsize": (FIG_WIDTH, FIG_WIDTH * GOLDEN),
    # stable ids and no timestamp so reruns give identical files
    "svg.hashsalt": "exposure-lab",
    "svg.fonttype": "none",
}


def plot_series(path: str | Path, x, series: dict[str, np.ndarray], *, xlabel: str = "t",
                ylabel: str = "", title: str = "", errors: dict[str, np.ndarray] | None = None,
                mark: float | None = None) -> Path:
    """One SVG with every named series against ``x``; NaNs leave gaps."""
    path = Path(path)
    with matplotlib.rc_context(PARAMS):
        fig, ax = plt.subplots(layout="constrained")
        for name, y in series.items():
            y = np.asarray(y, dtype=float)
            line, = ax.plot(x, y, marker="o", label=name)
            if errors and name in errors:
                se = np.asarray(errors[name], dtype=float)
                ax.fill_between(x, y - 3 * se, y + 3 * se, color=line.get_color(), alpha=0.2,
                                linewidth=0)
        if mark is not None:
            ax.axvline(mark, color="0.5", linestyle=":", linewidth=1)
        ax.set_xlabel(xlabel)
        ax.set_ylabel(ylabel)
        if title:
            ax.set_title(title)
        if len(series) > 1:
            ax.legend()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
    return path


def plot_columns(report, path: str | Path, y1: str, y2: str | None = None, **kw) -> Path:
    """Plot one or two BiasReport columns against t, with 3-SE bands where available."""
    cols = [c for c in (y1, y2) if c]
    series = {c: getattr(report, c) for c in cols}
    errors = {c: getattr(report, c + "_se") for c in cols if hasattr(report, c + "_se")}
    return plot_series(path, report.t, series, errors=errors, **kw)
