"""SVG figures for evaluation manifests and held-out-scenario curves."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import KS  # noqa: E402

# fixed ids and no timestamp, so identical data gives identical bytes
_RC = {
    "svg.hashsalt": "recinstruct",
    "svg.fonttype": "none",
    "font.size": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
_METADATA = {"Date": None, "Creator": None}


def _save(fig, path: str | os.PathLike) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    fig.savefig(tmp, format="svg", metadata=_METADATA, bbox_inches="tight")
    plt.close(fig)
    os.replace(tmp, path)
    return path


def plot_curve(rows: Sequence[Mapping], path: str | os.PathLike, *, title: str = "") -> Path:
    """Metric per training subset, absent points left as gaps."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(6.0, 3.6))
        xs = list(range(len(rows)))
        for metric, style in (("hr@1", "o-"), ("hr@5", "s-"), ("ndcg@5", "^--")):
            ys = [r["metrics"][metric] if r.get("metrics") else float("nan") for r in rows]
            ax.plot(xs, ys, style, label=metric.upper(), markersize=4)
        ax.set_xticks(xs)
        ax.set_xticklabels([r["subset_id"] for r in rows], rotation=30, ha="right")
        ax.set_ylim(0, 1)
        ax.set_xlabel("training subset")
        ax.set_ylabel("score on held-out scenario")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False, loc="best")
        ax.grid(axis="y", alpha=0.3)
        return _save(fig, path)


def plot_metrics(manifests: Sequence[Mapping], path: str | os.PathLike, *, title: str = "") -> Path:
    """Grouped bars of HR@K and NDCG@K, one group per manifest."""
    names = [f"hr@{k}" for k in KS] + [f"ndcg@{k}" for k in KS]
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(max(4.0, 1.4 * len(manifests) + 2), 3.6))
        width = 0.8 / len(names)
        for j, name in enumerate(names):
            xs = [i + (j - (len(names) - 1) / 2) * width for i in range(len(manifests))]
            ax.bar(xs, [m["metrics"][name] for m in manifests], width, label=name.upper())
        ax.set_xticks(range(len(manifests)))
        ax.set_xticklabels([f"{m['scenario']}\n{m['pool_kind']}" for m in manifests], fontsize=8)
        ax.set_ylim(0, 1)
        ax.set_ylabel("metric")
        if title:
            ax.set_title(title)
        ax.legend(frameon=False, ncol=2, fontsize=8)
        return _save(fig, path)
