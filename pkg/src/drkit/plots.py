"""Figure rendering for the CLI report paths. All figures go to files."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt


def _finish(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_objective_score_figure(report_payload: Mapping, path: str | Path) -> Path:
    """Horizontal bars of per-node scores; failed nodes drawn in red."""
    nodes = report_payload["nodes"]
    paths = list(nodes)
    scores = [nodes[p]["score"] for p in paths]
    colors = ["#c0392b" if nodes[p]["failed"] else "#2e86c1" for p in paths]
    fig, ax = plt.subplots(figsize=(8, max(2.5, 0.35 * len(paths))))
    ax.barh(range(len(paths)), scores, color=colors)
    ax.set_yticks(range(len(paths)))
    ax.set_yticklabels(paths, fontsize=7)
    ax.invert_yaxis()
    ax.set_xlim(0, 1)
    ax.set_xlabel("score")
    ax.set_title(f"objective rubric scores (root = {report_payload['root_score']:.4f})")
    return _finish(fig, Path(path))


def save_advantage_figure(rollouts: Sequence[Mapping], path: str | Path) -> Path:
    """Per-rollout rewards and advantages, side by side."""
    labels = [r["rollout_id"] for r in rollouts]
    rewards = [r["R"] for r in rollouts]
    advantages = [r["A"] for r in rollouts]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, max(2.5, 0.4 * len(labels))))
    ax1.barh(range(len(labels)), rewards, color="#2e86c1")
    ax1.set_yticks(range(len(labels)))
    ax1.set_yticklabels(labels, fontsize=8)
    ax1.invert_yaxis()
    ax1.set_xlabel("reward R")
    ax2.barh(range(len(labels)), advantages, color="#8e44ad")
    ax2.set_yticks(range(len(labels)))
    ax2.set_yticklabels([])
    ax2.invert_yaxis()
    ax2.axvline(0.0, color="black", linewidth=0.8)
    ax2.set_xlabel("advantage A")
    fig.suptitle("group rewards and normalized advantages")
    return _finish(fig, Path(path))


def save_pipeline_figure(
    metrics: Mapping, batch_sizes: Sequence[int], path: str | Path
) -> Path:
    """Batch sizes over emission order plus final pipeline counters."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    if batch_sizes:
        ax1.bar(range(len(batch_sizes)), batch_sizes, color="#2e86c1")
    ax1.set_xlabel("batch index")
    ax1.set_ylabel("samples")
    ax1.set_title("emitted batches")
    counter_names = ["batches_emitted", "timeouts", "reissues", "failed_samples"]
    values = [metrics.get(name, 0) for name in counter_names]
    ax2.bar(range(len(counter_names)), values, color="#8e44ad")
    ax2.set_xticks(range(len(counter_names)))
    ax2.set_xticklabels(counter_names, rotation=20, fontsize=8)
    ax2.set_title("pipeline counters")
    return _finish(fig, Path(path))


def save_validation_figure(tree_stats: Mapping, path: str | Path) -> Path:
    """Layer widths of a rubric tree with the complexity bounds marked."""
    widths = tree_stats["layer_widths"]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(range(1, len(widths) + 1), widths, color="#2e86c1")
    ax.axhline(3.5, color="gray", linestyle="--", linewidth=0.8)
    ax.axhline(11.5, color="gray", linestyle="--", linewidth=0.8)
    ax.set_xlabel("depth layer")
    ax.set_ylabel("nodes")
    ax.set_title(
        f"rubric layer widths (depth={tree_stats['depth']}, "
        f"max_breadth={tree_stats['max_breadth']})"
    )
    return _finish(fig, Path(path))
