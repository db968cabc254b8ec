"""Online disruption detection, one reading at a time, with no lookahead.

The detector keeps the last ``window_size`` readings in a ring buffer and
repeats the offline chain per slot: window difference, selectivity power,
normalisation against bounds frozen at calibration time, first difference,
(1, 1, 1) dilation and the threshold state machine. The dilation is centred,
so each slot is decided one reading late. Replaying a series therefore
reproduces the offline intervals computed with the same bounds.

Events are provisional: a stronger opening peak re-emits ``open`` and a
deeper closing trough re-emits ``close``. :func:`pair_events` folds an event
log back into intervals.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import SLOTS_PER_DAY, DisruptionInterval, MonthlyProfile, SpeedSeries, ValidationError
from .metrics import _ROWWISE, moving_window_difference
from .profiling import tile_profile
from .segmentation import SegmentationConfig, power_bounds, powered, sum3


class NotCalibratedError(RuntimeError):
    pass


@dataclass(frozen=True)
class Event:
    """A detector decision.

    ``slot`` is the absolute slot of the reading that triggered the decision
    (one past the decided slot). ``index`` is the day-relative slot the event
    refers to; closes carry the exit ``lag`` to subtract when pairing.
    ``magnitude`` is the normalised difference at the decided slot.
    """

    station_id: str
    slot: int
    kind: str
    magnitude: float
    day: int
    index: int
    update: bool = False
    lag: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "station_id": self.station_id,
                "slot": self.slot,
                "kind": self.kind,
                "magnitude": self.magnitude,
                "day": self.day,
                "index": self.index,
                "update": self.update,
                "lag": self.lag,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "Event":
        d = json.loads(line)
        return cls(d["station_id"], d["slot"], d["kind"], d["magnitude"], d["day"], d["index"], d.get("update", False), d.get("lag", 0))


def calibrate_bounds(profile: MonthlyProfile, calibration: SpeedSeries, cfg: SegmentationConfig) -> tuple[float, float]:
    """Freeze normalisation bounds from a historical stretch of readings."""
    if len(calibration) % SLOTS_PER_DAY:
        raise ValidationError("calibration series must cover whole days")
    diff = moving_window_difference(
        calibration, tile_profile(profile, len(calibration) // SLOTS_PER_DAY), cfg.window_size, cfg.metric,
        **cfg.metric_params(),
    )
    return power_bounds(diff, cfg)


class StreamingDetector:
    """Per-station online detector. Slot 0 is the first slot of a local day."""

    NEUTRAL, OPEN, CLOSED_PENDING = "neutral", "open", "closed-pending"

    def __init__(
        self,
        profile: MonthlyProfile,
        cfg: SegmentationConfig | None = None,
        bounds: tuple[float, float] | None = None,
        station_id: str | None = None,
    ):
        self.profile = profile
        self.cfg = cfg or SegmentationConfig()
        self.bounds = None if bounds is None else (float(bounds[0]), float(bounds[1]))
        self.station_id = profile.station_id if station_id is None else station_id
        self._metric = _ROWWISE[self.cfg.metric]
        self._params = self.cfg.metric_params()
        w = self.cfg.window_size
        self._readings: deque[float] = deque(maxlen=w)
        self._reference: deque[float] = deque(maxlen=w)
        self.slot = 0
        self._prev_norm: float | None = None
        self._d1 = 0.0  # derivative at slot - 1
        self._d2 = 0.0  # derivative at slot - 2
        self.state = self.NEUTRAL
        self._enter_peak: float | None = None
        self._exit_trough: float | None = None
        self.last_open: Event | None = None
        self.last_close: Event | None = None

    def calibrate(self, calibration: SpeedSeries) -> "StreamingDetector":
        self.bounds = calibrate_bounds(self.profile, calibration, self.cfg)
        return self

    def _normalized(self, diff: float) -> float:
        lo, hi = self.bounds
        p = float(powered([diff], self.cfg.selectivity)[0])
        if not hi > lo:
            return 0.0
        return min(max((p - lo) / (hi - lo), 0.0), 1.0)

    def push(self, reading: float, profile_value: float | None = None) -> Event | None:
        """Ingest the next reading; returns the event, if any, decided for the previous slot.

        The centred dilation at slot ``t`` needs the derivative at ``t + 1``,
        so every decision lags the newest reading by exactly one slot.
        """
        if self.bounds is None:
            raise NotCalibratedError("detector has no frozen normalisation bounds; calibrate first")
        t = self.slot
        k = t % SLOTS_PER_DAY
        ref = float(self.profile.slots[k]) if profile_value is None else float(profile_value)
        reading = ref if reading is None or np.isnan(reading) else float(reading)
        if reading < 0:
            raise ValueError("speed readings must be non-negative")
        self._readings.append(reading)
        self._reference.append(ref)
        self.slot += 1

        d0, decided_norm = 0.0, self._prev_norm
        if len(self._readings) == self.cfg.window_size:
            a = np.array(self._readings)[None, :]
            b = np.array(self._reference)[None, :]
            norm = self._normalized(float(self._metric(a, b, **self._params)[0]))
            if self._prev_norm is not None:
                d0 = norm - self._prev_norm
            self._prev_norm = norm
        ev = self._decide(t - 1, sum3(self._d2, self._d1, d0), decided_norm, t) if t > 0 else None
        self._d2, self._d1 = self._d1, d0
        return ev

    def finish(self) -> Event | None:
        """Decide the last pushed slot, treating the derivative beyond it as zero."""
        if self.slot == 0:
            return None
        ev = self._decide(self.slot - 1, sum3(self._d2, self._d1, 0.0), self._prev_norm, self.slot)
        self._d2, self._d1 = self._d1, 0.0
        return ev

    def _decide(self, s: int, c, norm: float | None, emitted: int) -> Event | None:
        c = float(c)
        mag = 0.0 if norm is None else float(norm)
        k, day = s % SLOTS_PER_DAY, s // SLOTS_PER_DAY
        if k == 0 and s > 0:
            self.state = self.NEUTRAL
            self._enter_peak = self._exit_trough = None
        cfg = self.cfg
        if c > cfg.p_threshold:
            if self.state != self.OPEN:
                self.state, self._enter_peak = self.OPEN, c
                ev = Event(self.station_id, emitted, "open", mag, day, k)
            elif c > self._enter_peak:
                self._enter_peak = c
                ev = Event(self.station_id, emitted, "open", mag, day, k, update=True)
            else:
                return None
            self.last_open = ev
            return ev
        if c < cfg.n_threshold:
            lag = cfg.exit_lag
            if self.state != self.CLOSED_PENDING:
                self.state, self._exit_trough = self.CLOSED_PENDING, c
                ev = Event(self.station_id, emitted, "close", mag, day, k, lag=lag)
            elif c < self._exit_trough:
                self._exit_trough = c
                ev = Event(self.station_id, emitted, "close", mag, day, k, update=True, lag=lag)
            else:
                return None
            self.last_close = ev
            return ev
        return None


def replay(
    series: SpeedSeries,
    profile: MonthlyProfile,
    cfg: SegmentationConfig | None = None,
    bounds: tuple[float, float] | None = None,
) -> list[Event]:
    """Drive a fresh detector over a recorded, day-aligned series."""
    if len(series) == 0:
        return []
    if not series.is_day_aligned:
        raise ValidationError(f"station {series.station_id}: series must start at a local day boundary")
    det = StreamingDetector(profile, cfg, bounds, station_id=series.station_id)
    events = []
    for x in series.values:
        ev = det.push(x)
        if ev is not None:
            events.append(ev)
    ev = det.finish()
    if ev is not None:
        events.append(ev)
    return events


def pair_events(events: Iterable[Event]) -> list[DisruptionInterval]:
    """Fold an event log into intervals, keeping the last open and last close of each run."""
    out: list[DisruptionInterval] = []
    cur_open: Event | None = None
    cur_close: Event | None = None
    last_kind = None
    day = None

    def flush():
        if cur_open is not None and cur_close is not None and cur_open.index < cur_close.index:
            stop = max(cur_close.index - cur_close.lag, cur_open.index + 1)
            out.append(DisruptionInterval(cur_open.day, cur_open.index, stop, cur_open.magnitude, cur_open.station_id))

    for ev in events:
        if ev.day != day:
            flush()
            cur_open = cur_close = last_kind = None
            day = ev.day
        if ev.kind == "open":
            if last_kind != "open":
                flush()
                cur_close = None
            cur_open = ev
        elif ev.kind == "close":
            cur_close = ev
        else:
            raise ValueError(f"unknown event kind {ev.kind!r}")
        last_kind = ev.kind
    flush()
    return out


def write_events(path, events: Sequence[Event]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(ev.to_json() + "\n")


def read_events(path) -> list[Event]:
    with Path(path).open(encoding="utf-8") as fh:
        return [Event.from_json(line) for line in fh if line.strip()]
