"""Matplotlib figure rendering for reports and score heatmaps.

All figures are rendered straight to files through the Agg canvas; no global
pyplot state.
"""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .evaluation import EvalReport


def save_score_heatmaps(
    grids: Sequence[np.ndarray],
    strides: Sequence[int],
    category: str,
    out_path: str | Path,
) -> Path:
    """Render per-level classification-score grids for one category."""
    fig = Figure(figsize=(3 * len(grids), 3.4))
    axes = fig.subplots(1, len(grids), squeeze=False)[0]
    for ax, grid, stride in zip(axes, grids, strides):
        im = ax.imshow(grid, vmin=0.0, vmax=max(1e-6, float(np.max(grid))), cmap="viridis")
        ax.set_title(f"stride {stride}")
        ax.set_xticks([])
        ax.set_yticks([])
        fig.colorbar(im, ax=ax, fraction=0.046)
    fig.suptitle(f"classification score: {category}")
    canvas = FigureCanvasAgg(fig)
    canvas.print_figure(str(out_path), dpi=120)
    return Path(out_path)


def save_ap_figure(report: EvalReport, out_path: str | Path) -> Path:
    """Bar chart of per-category AP50 alongside the delimited report."""
    names = list(report.per_category_ap)
    values = [100.0 * report.per_category_ap[n] for n in names]
    fig = Figure(figsize=(max(4.0, 1.1 * len(names)), 3.6))
    ax = fig.add_subplot(111)
    ax.bar(range(len(names)), values, color="tab:blue")
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("AP50 (%)")
    ax.set_ylim(0, 105)
    ax.set_title(f"per-category AP50 ({report.mode})")
    fig.tight_layout()
    canvas = FigureCanvasAgg(fig)
    canvas.print_figure(str(out_path), dpi=120)
    return Path(out_path)
