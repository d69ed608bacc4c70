"""Figures for experiment reports.

Rendered with the Agg backend and written without software metadata, so the
same data always gives the same PNG bytes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .harness import SuccessCurve, ThresholdRow  # noqa: E402

STYLE = {
    "font.family": "DejaVu Sans",
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "lines.linewidth": 1.2,
    "savefig.dpi": 150,
}

# thinnest to thickest layer, light to dark
PROFILE_COLORS = {
    "finfet": "#1b9e77",
    "tfe1": "#fdae6b",
    "tfe2": "#fd8d3c",
    "tfe3": "#e6550d",
    "tfe4": "#a63603",
}


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata={"Software": None})
    plt.close(fig)
    return path


def plot_success_curves(curves: dict[str, SuccessCurve], path: str | Path, thresholds=(0.5, 0.9, 0.999)) -> Path:
    """Success rate over the number of traces, one line per technology."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        for name, curve in curves.items():
            ax.plot(curve.set_sizes, curve.rates, label=name, color=PROFILE_COLORS.get(name))
        for th in thresholds:
            ax.axhline(th, color="0.5", linestyle=":", linewidth=0.8)
        ax.set_xlabel("traces")
        ax.set_ylabel("success rate")
        ax.set_ylim(-0.02, 1.02)
        ax.set_xlim(0, max(int(c.set_sizes[-1]) for c in curves.values()))
        ax.legend(loc="lower right", frameon=False)
        fig.tight_layout()
        return _save(fig, Path(path))


def plot_crossings(rows: list[ThresholdRow], path: str | Path) -> Path:
    """Pooled traces-to-success per technology, grouped by threshold."""
    pooled = [r for r in rows if r.trial == "pooled"]
    thresholds = sorted({r.threshold for r in pooled})
    profiles = list(dict.fromkeys(r.profile for r in pooled))
    width = 0.8 / max(len(profiles), 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.0, 3.2))
        for j, name in enumerate(profiles):
            by_th = {r.threshold: r for r in pooled if r.profile == name}
            xs, ys, errs = [], [], []
            for i, th in enumerate(thresholds):
                r = by_th.get(th)
                if r is None or r.avg_traces is None:
                    continue
                xs.append(i + (j - (len(profiles) - 1) / 2) * width)
                ys.append(r.avg_traces)
                errs.append(r.std_traces or 0.0)
            ax.bar(xs, ys, width=width, yerr=errs, capsize=2, label=name, color=PROFILE_COLORS.get(name))
        ax.set_xticks(range(len(thresholds)), [f"{th:.1%}" for th in thresholds])
        ax.set_xlabel("success rate")
        ax.set_ylabel("traces required (mean over keys)")
        ax.legend(frameon=False, ncol=min(len(profiles), 5))
        fig.tight_layout()
        return _save(fig, Path(path))
