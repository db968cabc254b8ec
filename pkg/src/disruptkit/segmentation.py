"""Disruption segmentation from a moving-window difference series.

The pipeline is: selectivity power -> min-max normalisation -> first-order
derivative -> dilation with the (1, 1, 1) kernel -> threshold state machine.
The dilation is centred (``c[i] = d[i-1] + d[i] + d[i+1]``, zero outside
the series), so the streaming detector decides slot ``i`` once reading
``i + 1`` has arrived.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import SLOT_MINUTES, SLOTS_PER_DAY, DisruptionInterval, MonthlyProfile, SpeedSeries, ValidationError
from .metrics import DEFAULT_WINDOW, METRICS, DifferenceSeries, moving_window_difference
from .profiling import tile_profile

log = logging.getLogger(__name__)

KERNEL = (1.0, 1.0, 1.0)


@dataclass(frozen=True)
class SegmentationConfig:
    """Thresholds and shaping parameters of the segmentation.

    ``lag_correction`` shifts every exit index back by ``window_size - 1``
    slots when the metric is Chebyshev: a max-type trailing window keeps
    reporting the deviation until the last disrupted reading has left it, so
    the raw exit peak trails the actual recovery by that many slots.
    """

    selectivity: float = 2.0
    p_threshold: float = 0.3
    n_threshold: float = -0.3
    window_size: int = DEFAULT_WINDOW
    metric: str = "chebyshev"
    minkowski_p: float = 3.0
    lag_correction: bool = True
    kernel: tuple = field(default=KERNEL, init=False)

    def __post_init__(self):
        if not self.selectivity > 0:
            raise ValidationError(f"selectivity must be positive, got {self.selectivity}")
        if not self.p_threshold > 0:
            raise ValidationError(f"p_threshold must be positive, got {self.p_threshold}")
        if not self.n_threshold < 0:
            raise ValidationError(f"n_threshold must be negative, got {self.n_threshold}")
        if self.window_size < 1:
            raise ValidationError("window_size must be positive")
        if self.metric not in METRICS and self.metric != "manhattan":
            raise ValidationError(f"unknown metric {self.metric!r}")
        if self.minkowski_p < 1:
            raise ValidationError("minkowski_p must be >= 1")

    @property
    def exit_lag(self) -> int:
        if self.lag_correction and self.metric == "chebyshev":
            return self.window_size - 1
        return 0

    def metric_params(self) -> dict:
        return {"p": self.minkowski_p} if self.metric == "minkowski" else {}

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("kernel")
        return d


# ---------------------------------------------------------------------------
# Pre-processing (power, normalise, derivative, dilation)


def _two_sum(a, b):
    s = a + b
    bb = s - a
    return s, (a - (s - bb)) + (b - bb)


def sum3(a, b, c):
    """a + b + c with compensated rounding; works on scalars and arrays alike."""
    s, e1 = _two_sum(a, b)
    t, e2 = _two_sum(s, c)
    return t + (e1 + e2)


def dilate(d) -> np.ndarray:
    """Same-length convolution with the (1, 1, 1) kernel, zero padded at both ends."""
    d = np.asarray(d, dtype=float)
    z = np.concatenate([[0.0], d, [0.0]])
    return sum3(z[:-2], z[1:-1], z[2:])


def derivative(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    out[1:] = x[1:] - x[:-1]
    return out


def normalize(x, bounds: tuple[float, float] | None = None) -> tuple[np.ndarray, bool]:
    """Min-max scale to [0, 1]; with frozen ``bounds`` values are clamped.

    Returns the scaled array and whether the scaling was degenerate (zero
    range), in which case the array is all zeros.
    """
    x = np.asarray(x, dtype=float)
    lo, hi = (float(np.min(x)), float(np.max(x))) if bounds is None else bounds
    if not hi > lo:
        return np.zeros_like(x), True
    out = (x - lo) / (hi - lo)
    if bounds is not None:
        out = np.clip(out, 0.0, 1.0)
    return out, False


@dataclass(frozen=True)
class Preprocessed:
    pts: np.ndarray
    nts: np.ndarray
    dts: np.ndarray
    cts: np.ndarray
    bounds: tuple[float, float]
    degenerate: bool = False


def powered(x, selectivity: float) -> np.ndarray:
    return np.asarray(x, dtype=float) ** selectivity


def power_bounds(ts, cfg: SegmentationConfig) -> tuple[float, float]:
    """Normalisation bounds of the powered series, for freezing from calibration data."""
    pts = powered(getattr(ts, "values", ts), cfg.selectivity)
    return float(pts.min()), float(pts.max())


def preprocess(ts, cfg: SegmentationConfig | None = None, bounds: tuple[float, float] | None = None) -> Preprocessed:
    cfg = cfg or SegmentationConfig()
    values = np.asarray(getattr(ts, "values", ts), dtype=float)
    if values.size < 2:
        raise ValueError("difference series needs at least two values")
    if np.any(values < 0):
        raise ValueError("difference series must be non-negative")
    pts = powered(values, cfg.selectivity)
    used = (float(pts.min()), float(pts.max())) if bounds is None else (float(bounds[0]), float(bounds[1]))
    nts, degenerate = normalize(pts, used)
    if degenerate:
        log.warning("degenerate normalisation (constant difference series); cTS is all zero")
    dts = derivative(nts)
    return Preprocessed(pts, nts, dts, dilate(dts), used, degenerate)


# ---------------------------------------------------------------------------
# Threshold state machine


def segment(
    cts, cfg: SegmentationConfig | None = None, station_id: str = "", normalized=None
) -> list[DisruptionInterval]:
    """Turn a dilated derivative series into per-day disruption intervals.

    Within a day, a crossing above ``p_threshold`` opens (or, if already open,
    re-anchors to a larger peak) and a crossing below ``n_threshold`` closes
    (or moves the close to a deeper trough). A pair is emitted when the next
    opening starts or the day ends, and only if enter precedes the exit.
    The exit lag is subtracted afterwards, never moving the exit to or before
    the entry. Nothing carries over a day boundary.

    ``metric_peak`` is the normalised difference at the entry slot when
    ``normalized`` is given, otherwise the dilated value there.
    """
    cfg = cfg or SegmentationConfig()
    c = np.asarray(cts, dtype=float)
    if c.size % SLOTS_PER_DAY:
        raise ValueError(f"cTS length {c.size} is not a multiple of {SLOTS_PER_DAY}")
    p, n, lag = cfg.p_threshold, cfg.n_threshold, cfg.exit_lag
    out: list[DisruptionInterval] = []
    days = c.reshape(-1, SLOTS_PER_DAY)
    peaks = days if normalized is None else np.asarray(normalized, dtype=float).reshape(-1, SLOTS_PER_DAY)
    for day, cd in enumerate(days):
        state, enter, exit_ = 0, None, None

        def flush():
            if enter is not None and exit_ is not None and enter < exit_:
                stop = max(int(exit_) - lag, int(enter) + 1)
                out.append(DisruptionInterval(day, int(enter), stop, float(peaks[day, enter]), station_id))

        for i in np.flatnonzero((cd > p) | (cd < n)):
            x = cd[i]
            if x > p:
                if state != 1:
                    flush()
                    state, enter, exit_ = 1, i, None
                elif x > cd[enter]:
                    enter = i
            else:
                if state != -1:
                    state, exit_ = -1, i
                elif x < cd[exit_]:
                    exit_ = i
        flush()
    return out


def interval_area(interval: DisruptionInterval, normalized) -> float:
    """Integrated normalised difference over ``[enter, exit)`` of the interval's day."""
    base = interval.day_index * SLOTS_PER_DAY
    nts = np.asarray(normalized, dtype=float)
    return float(np.sum(nts[base + interval.enter_idx : base + interval.exit_idx]))


def select_disruption_for_incident(
    intervals: Sequence[DisruptionInterval], normalized
) -> DisruptionInterval | None:
    """Largest disruption of the day by area; earliest entry wins ties."""
    best, best_area = None, -np.inf
    for iv in sorted(intervals, key=lambda iv: iv.enter_idx):
        area = interval_area(iv, normalized)
        if area > best_area:
            best, best_area = iv, area
    return best


def estimate_duration(interval: DisruptionInterval) -> int:
    return (interval.exit_idx - interval.enter_idx) * SLOT_MINUTES


# ---------------------------------------------------------------------------
# Whole-station convenience and shapes


def _tiled(profile, n: int) -> np.ndarray:
    if isinstance(profile, MonthlyProfile):
        if n % SLOTS_PER_DAY:
            raise ValidationError("series is not a whole number of days")
        return tile_profile(profile, n // SLOTS_PER_DAY)
    prof = np.asarray(profile, dtype=float)
    if prof.size != n:
        raise ValueError("tiled profile does not match the series length")
    return prof


@dataclass(frozen=True)
class StationSegmentation:
    station_id: str
    series: SpeedSeries
    difference: DifferenceSeries
    pre: Preprocessed
    intervals: tuple[DisruptionInterval, ...]

    def rows(self) -> list[dict]:
        out = []
        for iv in self.intervals:
            out.append(
                {
                    "station_id": self.station_id,
                    "day_index": iv.day_index,
                    "date": self.series.day_date(iv.day_index).isoformat(),
                    "enter_idx": iv.enter_idx,
                    "exit_idx": iv.exit_idx,
                    "est_duration_min": estimate_duration(iv),
                    "metric_peak": iv.metric_peak,
                    "area": interval_area(iv, self.pre.nts),
                }
            )
        return out


def segment_series(
    series: SpeedSeries, profile, cfg: SegmentationConfig | None = None, bounds=None
) -> StationSegmentation:
    """Run difference -> preprocess -> segment for one station."""
    cfg = cfg or SegmentationConfig()
    if not series.is_day_aligned:
        raise ValidationError(f"station {series.station_id}: series must cover whole local days")
    diff = moving_window_difference(
        series, _tiled(profile, len(series)), cfg.window_size, cfg.metric, **cfg.metric_params()
    )
    pre = preprocess(diff, cfg, bounds)
    return StationSegmentation(series.station_id, series, diff, pre, tuple(segment(pre.cts, cfg, series.station_id, pre.nts)))


@dataclass(frozen=True)
class DisruptionShape:
    values: np.ndarray
    degenerate: bool = False


def extract_disruption_shape(
    series, profile, interval: DisruptionInterval, window_size: int = DEFAULT_WINDOW
) -> DisruptionShape:
    """Day-normalised Wasserstein deviation restricted to the interval."""
    values = np.asarray(getattr(series, "values", series), dtype=float)
    end = (interval.day_index + 1) * SLOTS_PER_DAY
    if end > values.size:
        raise ValueError("interval lies outside the series")
    wd = moving_window_difference(values, _tiled(profile, values.size), window_size, "wasserstein").values
    day = wd[interval.day_index * SLOTS_PER_DAY : end]
    lo, hi = day.min(), day.max()
    if not hi > lo:
        log.warning("degenerate shape: constant Wasserstein deviation on day %d", interval.day_index)
        return DisruptionShape(np.zeros(interval.exit_idx - interval.enter_idx), True)
    return DisruptionShape((day[interval.enter_idx : interval.exit_idx] - lo) / (hi - lo))


# ---------------------------------------------------------------------------
# Output

INTERVAL_COLUMNS = (
    "station_id",
    "day_index",
    "date",
    "enter_idx",
    "exit_idx",
    "est_duration_min",
    "metric_peak",
    "area",
)


def write_intervals_csv(path, rows: Iterable[dict]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(INTERVAL_COLUMNS)
        for r in rows:
            writer.writerow([repr(r[c]) if isinstance(r[c], float) else r[c] for c in INTERVAL_COLUMNS])


def write_intervals_json(path, rows: Iterable[dict], cfg: SegmentationConfig) -> None:
    doc = {"config": cfg.to_dict(), "intervals": list(rows)}
    Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def load_intervals_csv(path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"{path}: no such file")
    out = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        needed = {"station_id", "day_index", "enter_idx", "exit_idx", "est_duration_min"}
        if reader.fieldnames is None or not needed <= set(reader.fieldnames):
            raise ValidationError(f"{path}: header must contain {', '.join(sorted(needed))}")
        for lineno, row in enumerate(reader, start=2):
            try:
                rec = {
                    "station_id": row["station_id"],
                    "day_index": int(row["day_index"]),
                    "date": row.get("date") or "",
                    "enter_idx": int(row["enter_idx"]),
                    "exit_idx": int(row["exit_idx"]),
                    "est_duration_min": int(row["est_duration_min"]),
                    "metric_peak": float(row.get("metric_peak") or 0.0),
                    "area": float(row.get("area") or 0.0),
                }
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            out.append(rec)
    return out


def write_shapes_csv(path, shapes: Iterable[tuple[str, int, DisruptionInterval, DisruptionShape]]) -> None:
    """One row per (interval, offset): station_id, day_index, enter_idx, offset, value."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["station_id", "day_index", "enter_idx", "offset", "value"])
        for sid, _, iv, shape in shapes:
            for k, x in enumerate(shape.values):
                writer.writerow([sid, iv.day_index, iv.enter_idx, k, repr(float(x))])
