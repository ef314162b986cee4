"""Accuracy-vs-SNR charts written next to the metrics CSV."""

from __future__ import annotations

from pathlib import Path
from typing import List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import SweepResult, write_metrics_csv  # noqa: E402

MARKERS = "osD^v<>px*"
STYLE = {
    "font.size": 10,
    "axes.labelsize": 11,
    "legend.fontsize": 8,
    "xtick.labelsize": 9,
    "ytick.labelsize": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "svg.fonttype": "none",
    "svg.hashsalt": "deepbroadcast",
}


def new_figure(width=5.0, height=None):
    height = height or width * 0.68
    fig, ax = plt.subplots(figsize=(width, height))
    return fig, ax


def emit_plots(result: SweepResult, out_dir, fmt="svg", csv_name="metrics.csv") -> List[Path]:
    """Write ``metrics.csv`` plus one chart per (user, task) with one curve per variant.

    Legends carry the SNR-averaged value of each curve.  Returns the paths written,
    CSV first.
    """
    if not result.records:
        raise ValueError("no results to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [write_metrics_csv(result, out_dir / csv_name)]

    panels = {}
    for (variant, user, task, metric), recs in result.curves().items():
        panels.setdefault((user, task, metric), []).append((variant, recs))

    with plt.rc_context(STYLE):
        for (user, task, metric), curves in sorted(panels.items()):
            fig, ax = new_figure()
            scale = 100.0 if metric == "accuracy" else 1.0
            for k, (variant, recs) in enumerate(curves):
                xs = [r.snr_db for r in recs]
                ys = [scale * r.value for r in recs]
                avg = sum(ys) / len(ys)
                unit = "%" if metric == "accuracy" else " dB"
                ax.plot(xs, ys, marker=MARKERS[k % len(MARKERS)], ms=4, lw=1.2,
                        label=f"{variant} (avg {avg:.2f}{unit})")
            ax.set_xlabel("SNR (dB)")
            ax.set_ylabel("Accuracy (%)" if metric == "accuracy" else "PSNR (dB)")
            ax.set_title(f"user {user + 1}: {task}")
            ax.legend(loc="lower right")
            fig.tight_layout()
            path = out_dir / f"user{user + 1}_{task}_{metric}.{fmt}"
            fig.savefig(path)
            plt.close(fig)
            paths.append(path)
    return paths
