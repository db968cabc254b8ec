"""Domain types and flat-file ingestion shared by every pipeline stage.

All containers are frozen dataclasses holding read-only numpy arrays, so they
can be handed to worker threads without copying.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

INTERVAL_SECONDS = 300
SLOTS_PER_DAY = 288
SLOT_MINUTES = INTERVAL_SECONDS // 60


class ValidationError(ValueError):
    """Input that violates a documented contract (bad file, bad config)."""


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


def parse_timestamp(text: str) -> datetime:
    """Parse an RFC 3339 timestamp; naive values are taken as UTC."""
    text = text.strip()
    if text.endswith(("Z", "z")):
        text = text[:-1] + "+00:00"
    ts = datetime.fromisoformat(text)
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_timestamp(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class SpeedSeries:
    """Fixed-interval speed readings for one station.

    ``values`` holds NaN wherever ``missing_mask`` is set. ``day_offset_minutes``
    is the fixed UTC offset of the station's local calendar day.
    """

    station_id: str
    start_time: datetime
    values: np.ndarray
    missing_mask: np.ndarray
    interval_seconds: int = INTERVAL_SECONDS
    day_offset_minutes: int = 0
    unit: str = "unspecified"

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        mask = np.asarray(self.missing_mask, dtype=bool)
        if self.interval_seconds != INTERVAL_SECONDS:
            raise ValidationError(f"interval must be {INTERVAL_SECONDS} s, got {self.interval_seconds}")
        if values.ndim != 1 or values.shape != mask.shape:
            raise ValidationError("values and missing_mask must be 1-D and of equal length")
        values = np.where(mask, np.nan, values)
        observed = values[~mask]
        if not np.all(np.isfinite(observed)):
            raise ValidationError(f"station {self.station_id}: non-finite speed reading")
        if np.any(observed < 0):
            raise ValidationError(f"station {self.station_id}: negative speed reading")
        if self.start_time.tzinfo is None:
            object.__setattr__(self, "start_time", self.start_time.replace(tzinfo=timezone.utc))
        object.__setattr__(self, "values", _readonly(values))
        object.__setattr__(self, "missing_mask", _readonly(mask))

    def __len__(self) -> int:
        return len(self.values)

    def __eq__(self, other):
        if not isinstance(other, SpeedSeries):
            return NotImplemented
        return (
            self.station_id == other.station_id
            and self.start_time == other.start_time
            and self.interval_seconds == other.interval_seconds
            and self.day_offset_minutes == other.day_offset_minutes
            and np.array_equal(self.missing_mask, other.missing_mask)
            and np.array_equal(self.values, other.values, equal_nan=True)
        )

    __hash__ = None

    @property
    def n_missing(self) -> int:
        return int(self.missing_mask.sum())

    def timestamp(self, k: int) -> datetime:
        return self.start_time + timedelta(seconds=self.interval_seconds * k)

    def index_of(self, ts: datetime) -> int:
        delta = (ts - self.start_time).total_seconds()
        k, rem = divmod(delta, self.interval_seconds)
        if rem:
            raise ValueError(f"{ts} is not on the {self.interval_seconds} s grid")
        return int(k)

    @property
    def local_start(self) -> datetime:
        return self.start_time + timedelta(minutes=self.day_offset_minutes)

    @property
    def is_day_aligned(self) -> bool:
        ls = self.local_start
        return (ls.hour, ls.minute, ls.second) == (0, 0, 0) and len(self) % SLOTS_PER_DAY == 0

    @property
    def n_days(self) -> int:
        return len(self) // SLOTS_PER_DAY

    def day_date(self, day_index: int) -> date:
        return (self.local_start + timedelta(days=day_index)).date()

    def day_of(self, when: datetime) -> int:
        """Day index (relative to the series start) of an instant, in local time."""
        local = when.astimezone(timezone.utc) + timedelta(minutes=self.day_offset_minutes)
        return (local.date() - self.local_start.date()).days

    def days(self, first: int, count: int) -> "SpeedSeries":
        """Sub-series covering ``count`` whole days starting at ``first``."""
        if not self.is_day_aligned:
            raise ValidationError(f"station {self.station_id}: series is not day aligned")
        if first < 0 or count < 1 or first + count > self.n_days:
            raise ValidationError(f"day range [{first}, {first + count}) outside 0..{self.n_days}")
        lo, hi = first * SLOTS_PER_DAY, (first + count) * SLOTS_PER_DAY
        return SpeedSeries(
            station_id=self.station_id,
            start_time=self.timestamp(lo),
            values=self.values[lo:hi],
            missing_mask=self.missing_mask[lo:hi],
            day_offset_minutes=self.day_offset_minutes,
            unit=self.unit,
        )


@dataclass(frozen=True)
class StationRecord:
    station_id: str
    latitude: float
    longitude: float


@dataclass(frozen=True)
class IncidentRecord:
    """One incident report. ``features`` are aligned with ``feature_names``."""

    incident_id: str
    latitude: float
    longitude: float
    reported_start: datetime
    reported_duration_min: int
    features: tuple[float, ...] = ()
    feature_names: tuple[str, ...] = ()

    def __post_init__(self):
        if self.reported_duration_min <= 0:
            raise ValidationError(
                f"incident {self.incident_id}: duration must be positive, got {self.reported_duration_min}"
            )
        if self.feature_names and len(self.feature_names) != len(self.features):
            raise ValidationError(f"incident {self.incident_id}: feature count mismatch")
        object.__setattr__(self, "features", tuple(float(v) for v in self.features))
        object.__setattr__(self, "feature_names", tuple(self.feature_names))


@dataclass(frozen=True)
class DisruptionInterval:
    """A segmented disruption, slot indices relative to the start of its day."""

    day_index: int
    enter_idx: int
    exit_idx: int
    metric_peak: float = 0.0
    station_id: str = ""

    def __post_init__(self):
        if self.day_index < 0:
            raise ValueError("day_index must be non-negative")
        if not 0 <= self.enter_idx < self.exit_idx < SLOTS_PER_DAY:
            raise ValueError(f"invalid interval [{self.enter_idx}, {self.exit_idx})")

    def duration_minutes(self) -> int:
        return (self.exit_idx - self.enter_idx) * SLOT_MINUTES


@dataclass(frozen=True)
class MonthlyProfile:
    station_id: str
    slots: np.ndarray
    n_days_observed: int

    def __post_init__(self):
        slots = np.asarray(self.slots, dtype=float)
        if slots.shape != (SLOTS_PER_DAY,):
            raise ValidationError(f"profile must have {SLOTS_PER_DAY} slots, got {slots.shape}")
        if not np.all(np.isfinite(slots)):
            raise ValidationError(f"profile for {self.station_id} has non-finite slots")
        if self.n_days_observed < 1:
            raise ValidationError("n_days_observed must be positive")
        object.__setattr__(self, "slots", _readonly(slots))

    def __eq__(self, other):
        if not isinstance(other, MonthlyProfile):
            return NotImplemented
        return (
            self.station_id == other.station_id
            and self.n_days_observed == other.n_days_observed
            and np.array_equal(self.slots, other.slots)
        )

    __hash__ = None


# ---------------------------------------------------------------------------
# CSV ingestion


def _open_csv(path, required: Sequence[str]):
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"{path}: no such file")
    fh = path.open(newline="", encoding="utf-8")
    reader = csv.reader(fh)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        fh.close()
        raise ValidationError(f"{path}: empty file, header required") from None
    missing = [c for c in required if c not in header]
    if missing:
        fh.close()
        raise ValidationError(f"{path}: header lacks column(s) {', '.join(missing)}")
    return fh, reader, header


def load_speed_csv(path, day_offset_minutes: int = 0, align_days: bool = True) -> list[SpeedSeries]:
    """Read a ``station_id,timestamp,speed`` file into one series per station.

    Rows of a station must have strictly increasing timestamps on the 5-minute
    grid; absent slots (and blank speed cells) become missing. With
    ``align_days`` the series is widened with missing slots to whole local days.
    Stations are returned in order of first appearance.
    """
    fh, reader, header = _open_csv(path, ("station_id", "timestamp", "speed"))
    col = {name: header.index(name) for name in ("station_id", "timestamp", "speed")}
    rows: dict[str, list[tuple[datetime, float]]] = {}
    with fh:
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            sid = row[col["station_id"]].strip()
            try:
                ts = parse_timestamp(row[col["timestamp"]])
                cell = row[col["speed"]].strip()
                speed = float(cell) if cell else math.nan
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            if not sid:
                raise ValidationError(f"{path}:{lineno}: empty station_id")
            if not math.isnan(speed) and (speed < 0 or math.isinf(speed)):
                raise ValidationError(f"{path}:{lineno}: invalid speed {cell!r}")
            seq = rows.setdefault(sid, [])
            if seq:
                prev = seq[-1][0]
                delta = (ts - prev).total_seconds()
                if delta <= 0:
                    raise ValidationError(f"{path}:{lineno}: non-monotone timestamp for station {sid}")
                if delta % INTERVAL_SECONDS:
                    raise ValidationError(
                        f"{path}:{lineno}: reading interval {delta:g} s is not a multiple of {INTERVAL_SECONDS} s"
                    )
            elif align_days:
                # the first reading of a station must itself sit on the slot grid
                local = ts + timedelta(minutes=day_offset_minutes)
                if (local.minute * 60 + local.second) % INTERVAL_SECONDS or local.microsecond:
                    raise ValidationError(f"{path}:{lineno}: timestamp {ts} is off the 5-minute grid")
            seq.append((ts, speed))

    out = []
    offset = timedelta(minutes=day_offset_minutes)
    for sid, seq in rows.items():
        first, last = seq[0][0], seq[-1][0]
        if align_days:
            local_first = first + offset
            start = datetime(local_first.year, local_first.month, local_first.day, tzinfo=timezone.utc) - offset
            local_last = last + offset
            end = (
                datetime(local_last.year, local_last.month, local_last.day, tzinfo=timezone.utc)
                + timedelta(days=1)
                - offset
            )
        else:
            start, end = first, last + timedelta(seconds=INTERVAL_SECONDS)
        n = int((end - start).total_seconds()) // INTERVAL_SECONDS
        values = np.full(n, np.nan)
        idx = np.fromiter(
            (int((ts - start).total_seconds()) // INTERVAL_SECONDS for ts, _ in seq), dtype=np.int64, count=len(seq)
        )
        values[idx] = [s for _, s in seq]
        out.append(
            SpeedSeries(
                station_id=sid,
                start_time=start,
                values=values,
                missing_mask=np.isnan(values),
                day_offset_minutes=day_offset_minutes,
            )
        )
    return out


def write_speed_csv(path, series: Iterable[SpeedSeries], precision: int | None = None) -> None:
    """Write series back out; missing slots are omitted rather than blanked."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["station_id", "timestamp", "speed"])
        for s in series:
            for k in np.flatnonzero(~s.missing_mask):
                writer.writerow([s.station_id, format_timestamp(s.timestamp(int(k))), _fmt(s.values[k], precision)])


def _fmt(x: float, precision: int | None = None) -> str:
    if precision is None:
        return repr(float(x))
    return f"{float(x):.{precision}f}".rstrip("0").rstrip(".") or "0"


INCIDENT_COLUMNS = ("incident_id", "latitude", "longitude", "start_time", "duration_min")


def _parse_duration(cell: str) -> int:
    value = float(cell)
    if not value.is_integer():
        raise ValueError(f"duration {cell!r} is not a whole number of minutes")
    return int(value)


def load_incidents_csv(path) -> list[IncidentRecord]:
    fh, reader, header = _open_csv(path, INCIDENT_COLUMNS)
    col = {name: header.index(name) for name in INCIDENT_COLUMNS}
    feat_cols = [i for i, h in enumerate(header) if h not in INCIDENT_COLUMNS]
    feature_names = tuple(header[i] for i in feat_cols)
    out, seen = [], set()
    with fh:
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rec = IncidentRecord(
                    incident_id=row[col["incident_id"]].strip(),
                    latitude=float(row[col["latitude"]]),
                    longitude=float(row[col["longitude"]]),
                    reported_start=parse_timestamp(row[col["start_time"]]),
                    reported_duration_min=_parse_duration(row[col["duration_min"]]),
                    features=tuple(float(row[i]) for i in feat_cols),
                    feature_names=feature_names,
                )
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            if rec.incident_id in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate incident_id {rec.incident_id}")
            if not all(math.isfinite(v) for v in rec.features):
                raise ValidationError(f"{path}:{lineno}: non-finite feature value")
            seen.add(rec.incident_id)
            out.append(rec)
    return out


def write_incidents_csv(path, incidents: Sequence[IncidentRecord]) -> None:
    names = incidents[0].feature_names if incidents else ()
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([*INCIDENT_COLUMNS, *names])
        for rec in incidents:
            writer.writerow(
                [
                    rec.incident_id,
                    repr(rec.latitude),
                    repr(rec.longitude),
                    format_timestamp(rec.reported_start),
                    rec.reported_duration_min,
                    *(repr(v) for v in rec.features),
                ]
            )


def load_stations_csv(path) -> list[StationRecord]:
    fh, reader, header = _open_csv(path, ("station_id", "latitude", "longitude"))
    col = {name: header.index(name) for name in ("station_id", "latitude", "longitude")}
    out, seen = [], set()
    with fh:
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rec = StationRecord(
                    row[col["station_id"]].strip(), float(row[col["latitude"]]), float(row[col["longitude"]])
                )
            except (ValueError, IndexError) as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            if rec.station_id in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate station_id {rec.station_id}")
            seen.add(rec.station_id)
            out.append(rec)
    return out


def write_stations_csv(path, stations: Sequence[StationRecord]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["station_id", "latitude", "longitude"])
        for s in stations:
            writer.writerow([s.station_id, repr(s.latitude), repr(s.longitude)])


def feature_matrix(incidents: Sequence[IncidentRecord]) -> tuple[np.ndarray, tuple[str, ...]]:
    """Stack incident features into the N_i x N_f design matrix."""
    if not incidents:
        return np.zeros((0, 0)), ()
    n_f = len(incidents[0].features)
    for rec in incidents:
        if len(rec.features) != n_f:
            raise ValidationError(f"incident {rec.incident_id}: expected {n_f} features")
    return np.array([rec.features for rec in incidents], dtype=float).reshape(len(incidents), n_f), incidents[
        0
    ].feature_names


@dataclass
class DropReport:
    """Entities excluded by a pipeline step, with the reason."""

    dropped: dict[str, str] = field(default_factory=dict)

    def add(self, key: str, reason: str) -> None:
        self.dropped[key] = reason

    def __len__(self) -> int:
        return len(self.dropped)
