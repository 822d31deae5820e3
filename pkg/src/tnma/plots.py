"""Matplotlib rendering of the report figures.

Figures are companions to the machine-readable CSV/JSON reports: effect
curves with credible bands over calendar time, and end-of-period interval
comparisons across models.  Everything renders offscreen (Agg).
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402 - backend must be set first
import numpy as np  # noqa: E402

from .posterior import EffectCurve  # noqa: E402

__all__ = ["plot_effect_curves", "plot_endpoint_comparison"]

MODEL_COLORS = {"bnma": "#1f77b4", "meta": "#ff7f0e", "tbnma": "#2ca02c"}


def plot_effect_curves(
    curves: Sequence[tuple[str, EffectCurve]],
    path: str | Path,
    truth: Optional[tuple[np.ndarray, np.ndarray]] = None,
    title: str = "",
) -> Path:
    """Credible bands of effect-over-time curves, one panel per entry.

    ``curves`` holds (panel label, curve) pairs; ``truth`` is an optional
    (years, values) series drawn dashed in every panel.
    """
    n = len(curves)
    if n == 0:
        raise ValueError("no curves to plot")
    fig, axes = plt.subplots(
        n, 1, figsize=(7.0, 2.6 * n + 0.8), sharex=True, squeeze=False
    )
    for ax, (name, curve) in zip(axes[:, 0], curves):
        color = MODEL_COLORS.get(name, "#444444")
        ax.fill_between(
            curve.years, curve.q025, curve.q975, alpha=0.25, color=color, lw=0
        )
        ax.plot(curve.years, curve.mean, color=color, lw=1.5, label="posterior mean")
        if truth is not None:
            ax.plot(truth[0], truth[1], "k--", lw=1.0, label="truth")
        ax.axhline(0.0, color="gray", lw=0.6)
        ax.set_ylabel(f"{curve.label} effect")
        ax.set_title(name, fontsize=9, loc="left")
        ax.legend(fontsize=7, loc="best")
    axes[-1, 0].set_xlabel("year")
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def plot_endpoint_comparison(
    rows: Sequence[dict], path: str | Path, title: str = ""
) -> Path:
    """Interval plot of end-of-period effects, grouped by model.

    ``rows`` are ``compare_models`` entries (model, label, mean, q025, q975).
    """
    if not rows:
        raise ValueError("no rows to plot")
    labels = sorted({r["label"] for r in rows})
    models = sorted({r["model"] for r in rows})
    offsets = np.linspace(-0.22, 0.22, len(models))
    fig, ax = plt.subplots(figsize=(7.0, 0.5 * len(labels) + 1.6))
    for model, off in zip(models, offsets):
        ys, means, lo, hi = [], [], [], []
        for r in rows:
            if r["model"] != model:
                continue
            y = labels.index(r["label"]) + off
            ys.append(y)
            means.append(r["mean"])
            lo.append(r["mean"] - r["q025"])
            hi.append(r["q975"] - r["mean"])
        ax.errorbar(
            means,
            ys,
            xerr=[lo, hi],
            fmt="o",
            ms=3.5,
            lw=1.2,
            capsize=2,
            color=MODEL_COLORS.get(model, "#444444"),
            label=model,
        )
    ax.axvline(0.0, color="gray", lw=0.6)
    ax.set_yticks(range(len(labels)), labels)
    ax.set_xlabel("end-of-period effect vs baseline")
    ax.legend(fontsize=8)
    if title:
        ax.set_title(title, fontsize=10)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path
