"""PNG figures for segmentation days, disruption shapes and model scores.

Figures are rendered through matplotlib's object API (no pyplot state), so
they are safe in headless runs and threads.
"""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from matplotlib.figure import Figure

from .data import SLOT_MINUTES, SLOTS_PER_DAY, DisruptionInterval

_PNG_META = {"Software": None}
_STYLE = {"linewidth": 1.2}


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    return path


def _hours(n: int = SLOTS_PER_DAY) -> np.ndarray:
    return np.arange(n) * SLOT_MINUTES / 60.0


def plot_segmentation_day(
    path,
    speed: np.ndarray,
    profile: np.ndarray,
    normalized: np.ndarray,
    cts: np.ndarray,
    intervals: Sequence[DisruptionInterval],
    title: str = "",
    p_threshold: float = 0.3,
    n_threshold: float = -0.3,
) -> Path:
    """Speed against profile (top) and the normalised and dilated series (bottom) for one day."""
    h = _hours(len(speed))
    fig = Figure(figsize=(8, 5))
    top, bottom = fig.subplots(2, 1, sharex=True)
    top.plot(h, profile, color="0.6", label="profile", **_STYLE)
    top.plot(h, speed, color="tab:blue", label="speed", **_STYLE)
    bottom.plot(h, normalized, color="tab:orange", label="normalised difference", **_STYLE)
    bottom.plot(h, cts, color="tab:green", label="dilated derivative", **_STYLE)
    for thr in (p_threshold, n_threshold):
        bottom.axhline(thr, color="0.4", linestyle=":", linewidth=0.8)
    for iv in intervals:
        for ax in (top, bottom):
            ax.axvspan(h[iv.enter_idx], h[iv.exit_idx], color="tab:red", alpha=0.15)
    top.set_ylabel("speed")
    bottom.set_ylabel("value")
    bottom.set_xlabel("hour of day")
    bottom.set_xlim(0, 24)
    top.legend(loc="lower left", fontsize=8)
    bottom.legend(loc="lower left", fontsize=8)
    if title:
        top.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_shapes(path, shapes: Iterable[tuple[str, np.ndarray]], title: str = "Disruption shapes") -> Path:
    """Overlay normalised shapes on a relative-time axis (minutes since entry)."""
    fig = Figure(figsize=(6, 4))
    ax = fig.subplots()
    n = 0
    for label, values in shapes:
        values = np.asarray(values, dtype=float)
        ax.plot(np.arange(values.size) * SLOT_MINUTES, values, alpha=0.7, label=label, **_STYLE)
        n += 1
    ax.set_xlabel("minutes since entry")
    ax.set_ylabel("normalised Wasserstein difference")
    ax.set_ylim(-0.05, 1.05)
    if 0 < n <= 10:
        ax.legend(fontsize=7)
    ax.set_title(title)
    fig.tight_layout()
    return _save(fig, path)


def plot_scores(path, rows: Sequence[dict], metric: str = "RMSE") -> Path:
    """Grouped bars of estimated vs reported target scores per model."""
    models = [r["model"] for r in rows]
    est = [r[f"{metric}_est"] for r in rows]
    rep = [r[f"{metric}_rep"] for r in rows]
    x = np.arange(len(models))
    fig = Figure(figsize=(6, 4))
    ax = fig.subplots()
    ax.bar(x - 0.2, est, width=0.4, label="estimated target")
    ax.bar(x + 0.2, rep, width=0.4, label="reported target")
    ax.set_xticks(x)
    ax.set_xticklabels(models)
    ax.set_ylabel(metric + (" (%)" if metric == "MAPE" else " (min)"))
    ax.legend(fontsize=8)
    fig.tight_layout()
    return _save(fig, path)
