"""Matplotlib renderings saved next to report and training outputs."""

from __future__ import annotations

from collections.abc import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .align import TrainStep
from .evaluation import METRIC_COLUMNS, MetricReport

# Stripping the Software tag keeps PNG bytes identical across library builds.
_PNG_METADATA = {"Software": ""}


def render_metric_bars(reports: Sequence[MetricReport], path: str) -> None:
    """Grouped bar chart of the seven metrics, one group per system."""
    labels = [
        "Coverage",
        "Relevance",
        "UnsafeRate",
        "EngWinRate",
        "CatalogUngrd",
        "CtxUngrd",
        "Diversity",
    ]
    fig, ax = plt.subplots(figsize=(10, 4.5))
    width = 0.8 / max(1, len(reports))
    for sys_idx, report in enumerate(reports):
        values = []
        for column in METRIC_COLUMNS:
            metric = getattr(report, column)
            values.append(0.0 if metric is None else metric.value)
        positions = [i + sys_idx * width for i in range(len(labels))]
        ax.bar(positions, values, width=width, label=report.system)
    ax.set_xticks([i + 0.4 - width / 2 for i in range(len(labels))])
    ax.set_xticklabels(labels, rotation=20, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("traffic-weighted value")
    ax.set_title("Offline metrics")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_METADATA)
    plt.close(fig)


def render_loss_curve(history: Sequence[TrainStep], path: str, title: str = "loss") -> None:
    """Loss-versus-step curve for a toy training run."""
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot([row.step for row in history], [row.loss for row in history], marker="o", ms=2)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=_PNG_METADATA)
    plt.close(fig)
