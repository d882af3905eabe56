"""Figure rendering for the CLI report paths.

Each figure is written next to its delimited data file. Rendering runs on the
Agg backend with a fixed dpi so repeated runs produce identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

from .evaluator import EvalReport  # noqa: E402
from .trainer import TrainLog  # noqa: E402

_DPI = 100


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
    return path


def save_loss_curves(path, log: TrainLog) -> Path:
    """Total and component losses over iterations."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    its = [r.iteration for r in log.records]
    for name, label in (("total", "total"), ("aclpt", "triplet (aclpt)"), ("cls_total", "classification")):
        ax.plot(its, [getattr(r.breakdown, name) for r in log.records], label=label, linewidth=1.0)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)


def save_map_curve(path, report: EvalReport) -> Path:
    """mAP against the IoU threshold grid."""
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(report.thresholds, report.map_per_threshold, marker="o", linewidth=1.2)
    ax.set_xlabel("IoU threshold")
    ax.set_ylabel("mAP")
    ax.set_ylim(-0.02, 1.02)
    ax.grid(True, alpha=0.3)
    ax.set_title(f"average mAP = {report.average_map:.3f}")
    fig.tight_layout()
    return _save(fig, path)


def save_ablation_bars(path, rows: list[tuple[str, float]]) -> Path:
    """Average mAP per ablation variant."""
    fig, ax = plt.subplots(figsize=(6, 4))
    names = [name for name, _ in rows]
    values = [v for _, v in rows]
    ax.bar(range(len(rows)), values, color="tab:blue")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names)
    ax.set_ylabel("average mAP")
    ax.set_ylim(0, 1.05)
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    return _save(fig, path)
