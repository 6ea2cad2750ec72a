"""Static SVG figures: sweep line charts and confusion-matrix heatmaps.

Output is byte-stable: the SVG carries no date and element ids come from a
fixed hash salt.
"""

from __future__ import annotations

import io
from typing import List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from ._files import atomic_write_text  # noqa: E402
from .errors import EmptyInputError  # noqa: E402

_RC = {
    "svg.hashsalt": "irregts",
    "svg.fonttype": "none",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _to_svg(fig) -> str:
    buf = io.StringIO()
    fig.savefig(buf, format="svg", metadata={"Date": None}, bbox_inches="tight")
    plt.close(fig)
    return buf.getvalue()


def sweep_chart(rows: Sequence[dict], metric: str = "accuracy", title: Optional[str] = None,
                include_differences: bool = False) -> str:
    """Metric vs. condition, one line per model, error bars from ``std``.

    ``rows`` are summary records with keys model, condition, metric, mean,
    std (as read by :func:`irregts.evaluation.read_summary_csv`). Condition
    tick labels are the CSV strings unchanged.
    """
    sel = [r for r in rows if r["metric"] == metric
           and (include_differences or " - " not in r["model"])]
    if not sel:
        raise EmptyInputError(f"no rows for metric {metric!r}")
    conditions: List[str] = []
    for r in sel:
        c = str(r["condition"])
        if c not in conditions:
            conditions.append(c)
    xpos = {c: i for i, c in enumerate(conditions)}
    models: List[str] = []
    for r in sel:
        if r["model"] not in models:
            models.append(r["model"])
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5.0, 3.4))
        for name in models:
            rs = [r for r in sel if r["model"] == name]
            x = [xpos[str(r["condition"])] for r in rs]
            ax.errorbar(x, [r["mean"] for r in rs], yerr=[r["std"] for r in rs],
                        marker="o", capsize=3, label=name)
        ax.set_xticks(range(len(conditions)))
        ax.set_xticklabels(conditions)
        ax.set_xlabel("condition")
        ax.set_ylabel(metric)
        if title:
            ax.set_title(title)
        ax.legend(frameon=False)
        return _to_svg(fig)


def confusion_heatmap(counts, class_names: Optional[Sequence[str]] = None, normalize: bool = True,
                      title: Optional[str] = None) -> str:
    """Rows are true classes, columns predicted; rows normalized to sum 1 by default."""
    counts = np.asarray(counts, dtype=np.float64)
    K = counts.shape[0]
    names = list(class_names) if class_names is not None else [str(k) for k in range(K)]
    values = counts
    if normalize:
        tot = counts.sum(axis=1, keepdims=True)
        values = np.divide(counts, tot, out=np.zeros_like(counts), where=tot > 0)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(1.0 + 0.6 * K, 0.8 + 0.6 * K))
        im = ax.imshow(values, cmap="Blues", vmin=0.0, vmax=1.0 if normalize else None)
        ax.set_xticks(range(K))
        ax.set_yticks(range(K))
        ax.set_xticklabels(names)
        ax.set_yticklabels(names)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        for i in range(K):
            for j in range(K):
                txt = f"{values[i, j]:.2f}" if normalize else str(int(counts[i, j]))
                ax.text(j, i, txt, ha="center", va="center",
                        color="white" if values[i, j] > 0.5 * values.max() else "black")
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        if title:
            ax.set_title(title)
        return _to_svg(fig)


def write_svg(path, svg: str) -> None:
    atomic_write_text(path, svg)
