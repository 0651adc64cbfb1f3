"""Matplotlib figure rendering for the report paths.

Everything draws to files through the Agg backend so runs stay headless and
byte-reproducible.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_CMAP = plt.get_cmap("tab20")


def _label_image(labels: np.ndarray) -> np.ndarray:
    rgb = np.zeros(labels.shape + (3,))
    for v in np.unique(labels):
        rgb[labels == v] = _CMAP(int(v) % 20)[:3]
    return rgb


def render_cluster_figure(
    sam_clusters: np.ndarray,
    clip_clusters: np.ndarray,
    gt_cells: np.ndarray | None,
    path: str | Path,
    title: str = "",
) -> None:
    """Side-by-side cluster maps of the two feature streams (plus ground
    truth when available)."""
    panels = [("spatial features", sam_clusters), ("image-text features", clip_clusters)]
    if gt_cells is not None:
        panels.append(("ground truth", gt_cells))
    fig, axes = plt.subplots(1, len(panels), figsize=(3.2 * len(panels), 3.4))
    if len(panels) == 1:
        axes = [axes]
    for ax, (name, labels) in zip(axes, panels):
        ax.imshow(_label_image(labels), interpolation="nearest")
        ax.set_title(name, fontsize=10)
        ax.set_xticks([])
        ax.set_yticks([])
    if title:
        fig.suptitle(title, fontsize=11)
    fig.tight_layout()
    fig.savefig(str(path), dpi=120)
    plt.close(fig)


def render_pq_figure(report: dict, path: str | Path) -> None:
    """Per-category PQ bars plus the aggregate PQ/SQ/RQ/mIoU lines."""
    per_cat = report["per_category"]
    cats = [info for info in per_cat.values() if info["gt_present"]]
    names = [c["name"] for c in cats]
    pqs = [c["pq"] for c in cats]
    colors = ["#4878d0" if c["is_seen"] else "#ee854a" for c in cats]

    fig, ax = plt.subplots(figsize=(max(4.0, 0.6 * len(names) + 2.0), 3.6))
    if names:
        ax.bar(range(len(names)), pqs, color=colors)
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax.set_ylim(0.0, 1.05)
    ax.set_ylabel("PQ")
    totals = report["totals"]
    summary = (f"PQ {totals['PQ']:.3f}  SQ {totals['SQ']:.3f}  "
               f"RQ {totals['RQ']:.3f}  mIoU {totals.get('mIoU', float('nan')):.3f}")
    ax.set_title(summary, fontsize=10)
    handles = [plt.Rectangle((0, 0), 1, 1, color="#4878d0"),
               plt.Rectangle((0, 0), 1, 1, color="#ee854a")]
    ax.legend(handles, ["seen", "unseen"], fontsize=8, loc="upper right")
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    fig.tight_layout()
    fig.savefig(str(path), dpi=120)
    plt.close(fig)
