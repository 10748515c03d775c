"""Figures for reports: per-level bars, loss curves, ablation grid, mask panels.

Every function writes a file and returns its path; nothing is shown
interactively, so the module forces the non-GUI Agg backend.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "savefig.bbox": "tight",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    plt.close(fig)
    return path


def level_bars(series: dict, path, title: str = "IoU per occlusion level") -> Path:
    """Grouped bars; ``series`` maps a method name to ``{level: IoU or None}``."""
    with plt.rc_context(STYLE):
        names = list(series)
        levels = list(next(iter(series.values())))
        x = np.arange(len(levels))
        width = 0.8 / max(len(names), 1)
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        for k, name in enumerate(names):
            vals = [np.nan if series[name].get(lv) is None else 100 * series[name][lv] for lv in levels]
            ax.bar(x + (k - (len(names) - 1) / 2) * width, vals, width, label=name)
        ax.set_xticks(x, levels)
        ax.set_ylabel("mean IoU (%)")
        ax.set_ylim(0, 100)
        ax.set_title(title)
        ax.legend(frameon=False)
        return _save(fig, path)


def loss_curves(records, path, smooth: int = 25) -> Path:
    """Per-term training curves from a sequence of ``RunRecord``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(5.5, 3.2))
        its = np.array([r.iteration for r in records])
        names = list(records[0].terms) + ["total"] if records else []
        for name in names:
            vals = np.array([r.total if name == "total" else r.terms[name] for r in records])
            if smooth > 1 and len(vals) >= smooth:
                vals = np.convolve(vals, np.ones(smooth) / smooth, mode="valid")
                xs = its[smooth - 1:]
            else:
                xs = its
            ax.plot(xs, vals, lw=1.2 if name == "total" else 0.9, label=name,
                    color="black" if name == "total" else None)
        ax.set_xlabel("iteration")
        ax.set_ylabel("loss")
        ax.set_yscale("log")
        ax.legend(frameon=False, ncol=2)
        return _save(fig, path)


def ablation_chart(rows: Sequence[dict], path) -> Path:
    """Mean and FG-3 IoU for each toggle combination.

    Each row is ``{"label": str, "mean": float, "FG-3": float or None}``.
    """
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.0, 3.0))
        x = np.arange(len(rows))
        mean = [100 * r["mean"] for r in rows]
        fg3 = [np.nan if r.get("FG-3") is None else 100 * r["FG-3"] for r in rows]
        ax.bar(x - 0.2, mean, 0.4, label="mean")
        ax.bar(x + 0.2, fg3, 0.4, label="FG-3")
        ax.set_xticks(x, [r["label"] for r in rows], rotation=30, ha="right")
        ax.set_ylabel("mean IoU (%)")
        ax.set_ylim(0, 100)
        ax.legend(frameon=False)
        return _save(fig, path)


def mask_panels(image: np.ndarray, instances: Sequence[dict], path,
                max_rows: Optional[int] = 6) -> Path:
    """One row per instance: image, GT amodal, m_v, m_a, m_r, fused.

    Each entry of ``instances`` has the arrays ``gt``, ``m_v``, ``m_a``, ``m_r``,
    ``fused`` and optionally a ``title``.
    """
    instances = list(instances)[:max_rows] if max_rows else list(instances)
    cols = ("image", "gt", "m_v", "m_a", "m_r", "fused")
    with plt.rc_context(STYLE):
        n = max(len(instances), 1)
        fig, axes = plt.subplots(n, len(cols), figsize=(1.4 * len(cols), 1.4 * n), squeeze=False)
        for r, inst in enumerate(instances):
            for c, name in enumerate(cols):
                ax = axes[r, c]
                if name == "image":
                    ax.imshow(image)
                    if inst.get("title"):
                        ax.set_ylabel(inst["title"], fontsize=7)
                else:
                    ax.imshow(np.asarray(inst[name], dtype=float), cmap="gray", vmin=0, vmax=1)
                if r == 0:
                    ax.set_title(name)
                ax.set_xticks([])
                ax.set_yticks([])
                for spine in ax.spines.values():
                    spine.set_visible(False)
        return _save(fig, path)
