"""Figures for the report paths of the CLI (``render --png``, ``eval --figures``)."""

from __future__ import annotations

import io
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402
import numpy as np  # noqa: E402

from .core import SegmentPrediction, atomic_write_bytes  # noqa: E402
from .evalmetrics import RankedMatch  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "image.interpolation": "nearest",
}


def _save(fig, path) -> None:
    # no Software/date chunks, so identical inputs give identical bytes
    buf = io.BytesIO()
    fig.savefig(buf, format="png", metadata={"Software": None})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def _draw_boxes(ax, segments: Sequence[SegmentPrediction], color: str) -> None:
    # rows are query seconds, columns reference seconds (one cell per second)
    for s in segments:
        ax.add_patch(Rectangle((s.r_start - 0.5, s.q_start - 0.5), s.r_end - s.r_start, s.q_end - s.q_start,
                               fill=False, edgecolor=color, linewidth=1.0))


def matrix_figure(panels: Sequence[tuple[str, np.ndarray]], path, predictions: Sequence[SegmentPrediction] = (),
                  ground_truth: Sequence[SegmentPrediction] = ()) -> None:
    """One heatmap per (title, matrix) panel, with optional predicted (red) and GT (green) boxes."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 3.2), squeeze=False)
        for ax, (title, values) in zip(axes[0], panels):
            im = ax.imshow(values, cmap="viridis", vmin=min(0.0, float(np.min(values))), vmax=1.0)
            _draw_boxes(ax, ground_truth, "lime")
            _draw_boxes(ax, predictions, "red")
            ax.set_title(title)
            ax.set_xlabel("reference (s)")
            ax.set_ylabel("query (s)")
            fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        fig.tight_layout()
        _save(fig, path)


def pr_curve_figure(ranked: Sequence[RankedMatch], path, label: str = "") -> None:
    recall = np.array([0.0] + [m.recall for m in ranked])
    precision = np.array([1.0] + [m.precision for m in ranked])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.2))
        ax.step(recall, precision, where="post", color="tab:blue", label=label or None)
        ax.set_xlim(0.0, 1.02)
        ax.set_ylim(0.0, 1.02)
        ax.set_xlabel("recall")
        ax.set_ylabel("precision")
        ax.grid(alpha=0.3)
        if label:
            ax.legend(loc="lower left")
        fig.tight_layout()
        _save(fig, path)


def score_histogram_figure(ranked: Sequence[RankedMatch], path) -> None:
    tp = [m.prediction.score for m in ranked if m.is_tp]
    fp = [m.prediction.score for m in ranked if not m.is_tp]
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.0, 3.2))
        bins = np.linspace(min(tp + fp, default=0.0), max(tp + fp, default=1.0) + 1e-9, 31)
        ax.hist([fp, tp], bins=bins, stacked=True, color=["tab:red", "tab:green"], label=["FP", "TP"])
        ax.set_xlabel("prediction score")
        ax.set_ylabel("count")
        ax.legend()
        fig.tight_layout()
        _save(fig, path)
