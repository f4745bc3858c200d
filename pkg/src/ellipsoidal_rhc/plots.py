"""Static SVG figures of a closed-loop trace.

Every figure is a pure function of the trace CSV: the SVG writer gets a
fixed hash salt and no date, so plotting the same file twice yields the
same bytes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .harness import read_trace_csv  # noqa: E402

_RC = {"svg.hashsalt": "ellipsoidal-rhc", "svg.fonttype": "path", "path.simplify": False}
_META = {"Date": None, "Creator": None}

#: Figure name -> list of (column, label) panels.
FIGURES = {
    "lateral": [("x5", "x5 lateral position [m]")],
    "longitudinal": [("x6", "x6 relative position [m]")],
    "inputs": [("u1", "u1 steering [rad]"), ("u2", "u2 acceleration [m/s^2]")],
    "index": [("i", "ellipsoid index i"), ("s", "family s")],
}


def _figure(t, data, cols, panels, title):
    fig, axes = plt.subplots(len(panels), 1, figsize=(7.0, 2.2 * len(panels)), sharex=True, squeeze=False)
    for ax, (col, label) in zip(axes[:, 0], panels):
        y = data[:, cols.index(col)]
        if col in ("i", "s"):
            ax.step(t, y, where="post", lw=1.2)
        else:
            ax.plot(t, y, lw=1.2)
        ax.set_ylabel(label)
        ax.grid(True, lw=0.4, alpha=0.5)
    axes[-1, 0].set_xlabel("time [s]")
    axes[0, 0].set_title(title)
    fig.tight_layout()
    return fig


def plot_trace(csv_path, out_dir) -> list[Path]:
    """Write one SVG per entry of :data:`FIGURES`; returns the paths."""
    cols, _, data = read_trace_csv(csv_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t = data[:, cols.index("t")] if len(data) else np.zeros(0)
    paths = []
    with plt.rc_context(_RC):
        for name, panels in FIGURES.items():
            fig = _figure(t, data, list(cols), panels, name)
            path = out / f"{name}.svg"
            fig.savefig(path, format="svg", metadata=_META)
            plt.close(fig)
            paths.append(path)
    return paths


__all__ = ["FIGURES", "plot_trace"]
