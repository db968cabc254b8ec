"""Synthetic scenarios with known ground truth.

The road layout is a rectangular grid of 1200 m blocks around a reference
coordinate. Stations sit at the middle of horizontal blocks. An associated
incident is placed on its station's block within 400 m along the road and a
few meters to the side, so it snaps to that road and is at least 800 m from
any other station. Unassociated incidents go to vertical mid-blocks (1200 m
from every station) or well off the road.

Each station gets ``calibration_days`` undisturbed days followed by
observation days; every associated incident injects one trapezoidal dip into
its station on its own day. Reported durations either equal the truth or are
overwritten by a placeholder value.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from .association import LocalProjection, write_geojson
from .data import (
    SLOT_MINUTES,
    SLOTS_PER_DAY,
    IncidentRecord,
    SpeedSeries,
    StationRecord,
    ValidationError,
    parse_timestamp,
    write_incidents_csv,
    write_speed_csv,
    write_stations_csv,
)

BLOCK_M = 1200.0
ALONG_ROAD_MAX_M = 400.0
SIDE_OFFSET_MAX_M = 8.0
OFF_ROAD_M = 60.0
PLACEHOLDER_DURATIONS = (30, 360)
FEATURE_NAMES = ("lanes_blocked", "severity", "vehicles", "hour", "weekend", "truck")
TRUTH_COLUMNS = ("incident_id", "true_start_slot", "true_duration_min", "station_id", "day_index", "depth", "ramp_slots")


@dataclass(frozen=True)
class ScenarioSpec:
    n_stations: int = 20
    n_incidents: int = 100
    associated_fraction: float = 0.2
    calibration_days: int = 28
    observation_days: int | None = None
    noise: float = 0.0
    corruption_fraction: float = 0.4
    jitter_minutes: int = 0
    depth: tuple[float, float] = (0.4, 0.6)
    ramp_slots: int = 1
    free_flow: float = 65.0
    peak_drop: float = 0.35
    min_duration: int = 35
    max_duration: int = 240
    origin: tuple[float, float] = (37.3382, -121.8863)
    start_date: str = "2024-01-01T00:00:00Z"
    with_series: bool = True

    def __post_init__(self):
        if self.n_stations < 1 or self.n_incidents < 0:
            raise ValidationError("need at least one station and a non-negative incident count")
        for name in ("associated_fraction", "corruption_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1], got {v}")
        lo, hi = self.depth
        if not 0.0 < lo <= hi < 1.0:
            raise ValidationError(f"depth range must satisfy 0 < lo <= hi < 1, got {self.depth}")
        if self.noise < 0 or self.jitter_minutes < 0 or self.ramp_slots < 0:
            raise ValidationError("noise, jitter_minutes and ramp_slots must be non-negative")
        if not SLOT_MINUTES <= self.min_duration <= self.max_duration:
            raise ValidationError("need 5 <= min_duration <= max_duration")
        if self.max_duration // SLOT_MINUTES + 2 * 40 > SLOTS_PER_DAY:
            raise ValidationError("max_duration does not fit inside one day")
        if self.calibration_days < 1:
            raise ValidationError("calibration_days must be positive")
        object.__setattr__(self, "depth", (float(lo), float(hi)))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @property
    def n_associated(self) -> int:
        return int(round(self.associated_fraction * self.n_incidents))

    @property
    def n_observation_days(self) -> int:
        if self.observation_days is not None:
            return self.observation_days
        return max(1, math.ceil(self.n_associated / self.n_stations))

    def check_feasible(self) -> None:
        cap = self.n_stations * self.n_observation_days
        if self.n_associated > cap:
            raise ValidationError(
                f"infeasible scenario: {self.n_associated} associated incidents but only {cap} station-days "
                f"({self.n_stations} stations x {self.n_observation_days} days, one incident per station-day)"
            )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["depth"] = list(self.depth)
        d["origin"] = list(self.origin)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValidationError(f"unknown scenario keys: {', '.join(sorted(extra))}")
        d = dict(d)
        for key in ("depth", "origin"):
            if key in d:
                d[key] = tuple(d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ValidationError(str(exc)) from None

    @classmethod
    def from_json(cls, path) -> "ScenarioSpec":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ValidationError(f"{path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ValidationError(f"{path}: scenario spec must be a JSON object")
        return cls.from_dict(doc)


@dataclass(frozen=True)
class TruthRow:
    incident_id: str
    true_start_slot: int
    true_duration_min: int
    station_id: str
    day_index: int
    depth: float
    ramp_slots: int


@dataclass
class Scenario:
    spec: ScenarioSpec
    seed: int
    polylines: list[np.ndarray]  # (lon, lat) vertex arrays
    stations: list[StationRecord]
    incidents: list[IncidentRecord]
    truth: list[TruthRow]
    series: list[SpeedSeries] = field(default_factory=list)
    true_durations: dict[str, int] = field(default_factory=dict)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_geojson(out / "roads.geojson", self.polylines)
        write_stations_csv(out / "stations.csv", self.stations)
        write_incidents_csv(out / "incidents.csv", self.incidents)
        write_truth_csv(out / "truth.csv", self.truth)
        if self.series:
            write_speed_csv(out / "speed.csv", self.series)
        meta = {"seed": self.seed, "spec": self.spec.to_dict()}
        (out / "scenario.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Building blocks


def commuter_template(free_flow: float = 65.0, peak_drop: float = 0.35) -> np.ndarray:
    """Smooth 288-slot daily speed curve with morning and evening dips."""
    h = np.arange(SLOTS_PER_DAY) * SLOT_MINUTES / 60.0
    am = np.exp(-0.5 * ((h - 8.0) / 1.1) ** 2)
    pm = np.exp(-0.5 * ((h - 17.5) / 1.4) ** 2)
    return free_flow * (1.0 - peak_drop * np.maximum(am, 0.85 * pm))


def trapezoid(n_slots: int, ramp: int) -> np.ndarray:
    """Dip shape over ``n_slots`` slots: ``ramp`` slots down, plateau of 1, ``ramp`` slots up."""
    if n_slots < 1:
        raise ValueError("dip must span at least one slot")
    r = min(ramp, (n_slots - 1) // 2)
    shape = np.ones(n_slots)
    up = np.arange(1, r + 1) / (r + 1)
    if r:
        shape[:r] = up
        shape[-r:] = up[::-1]
    return shape


def inject_dip(day: np.ndarray, start_slot: int, n_slots: int, depth: float, ramp: int) -> np.ndarray:
    """Scale ``day`` down by ``depth`` times a trapezoid starting at ``start_slot``."""
    out = np.array(day, dtype=float)
    out[start_slot : start_slot + n_slots] *= 1.0 - depth * trapezoid(n_slots, ramp)
    return out


def true_duration(features: np.ndarray, lo: int = 35, hi: int = 240) -> int:
    """Deterministic duration in minutes from incident features, rounded to 5."""
    lanes, sev, veh, hour, weekend, truck = features
    raw = 20.0 + 18.0 * lanes + 22.0 * sev + 6.0 * veh + 25.0 * truck - 10.0 * weekend
    raw += 12.0 * math.sin(math.pi * hour / 12.0)
    raw += 4.0 * lanes * sev
    return int(min(max(5 * round(raw / 5), lo), hi))


def draw_features(rng: np.random.Generator) -> np.ndarray:
    return np.array(
        [
            rng.integers(0, 4),
            rng.integers(1, 4),
            rng.integers(1, 6),
            rng.integers(0, 24),
            float(rng.random() < 2 / 7),
            float(rng.random() < 0.15),
        ],
        dtype=float,
    )


def _grid(n_stations: int) -> tuple[int, int]:
    cols = max(1, math.ceil(math.sqrt(n_stations)))
    rows = max(1, math.ceil(n_stations / cols) - 1)
    while cols * (rows + 1) < n_stations:
        rows += 1
    return cols, rows


# ---------------------------------------------------------------------------
# Generator


def generate_scenario(spec: ScenarioSpec, seed: int = 7) -> Scenario:
    """Build a scenario deterministically from ``spec`` and ``seed``."""
    spec.check_feasible()
    rng = np.random.default_rng(seed)
    cols, rows = _grid(spec.n_stations)
    width, height = cols * BLOCK_M, rows * BLOCK_M
    proj = LocalProjection(*spec.origin)

    def lonlat(x, y):
        lat, lon = proj.inverse(np.asarray(x, float), np.asarray(y, float))
        return np.column_stack([np.atleast_1d(lon), np.atleast_1d(lat)])

    xs = np.linspace(0.0, width, cols * 12 + 1)
    ys = np.linspace(0.0, height, rows * 12 + 1)
    polylines = [lonlat(xs, np.full_like(xs, j * BLOCK_M)) for j in range(rows + 1)]
    polylines += [lonlat(np.full_like(ys, i * BLOCK_M), ys) for i in range(cols + 1)]

    slots = [(i, j) for j in range(rows + 1) for i in range(cols)][: spec.n_stations]
    width_digits = len(str(spec.n_stations))
    station_xy = {}
    stations = []
    for n, (i, j) in enumerate(slots):
        sid = f"S{n + 1:0{width_digits}d}"
        x, y = (i + 0.5) * BLOCK_M, j * BLOCK_M
        station_xy[sid] = (x, y)
        lon, lat = lonlat(x, y)[0]
        stations.append(StationRecord(sid, float(lat), float(lon)))

    n_days = spec.calibration_days + spec.n_observation_days
    t0 = parse_timestamp(spec.start_date)
    if (t0.hour, t0.minute, t0.second) != (0, 0, 0):
        raise ValidationError("start_date must be a UTC midnight")

    # associated incidents: unique station-days
    n_assoc = spec.n_associated
    station_days = [(s.station_id, d) for s in stations for d in range(spec.calibration_days, n_days)]
    picks = rng.choice(len(station_days), size=n_assoc, replace=False) if n_assoc else np.array([], int)
    assoc_ids = set(rng.choice(spec.n_incidents, size=n_assoc, replace=False).tolist()) if n_assoc else set()
    picks_iter = iter(sorted(int(p) for p in picks))
    pick_for = {}
    for k in sorted(assoc_ids):
        pick_for[k] = station_days[next(picks_iter)]
    # shuffle the station-day assignment so incident order does not track station order
    keys = sorted(pick_for)
    vals = [pick_for[k] for k in keys]
    order = rng.permutation(len(vals))
    pick_for = {k: vals[o] for k, o in zip(keys, order)}

    id_digits = len(str(max(spec.n_incidents, 1)))
    incidents: list[IncidentRecord] = []
    truth: list[TruthRow] = []
    true_durations: dict[str, int] = {}
    dips: dict[tuple[str, int], tuple[int, int, float]] = {}
    n_corrupt = int(round(spec.corruption_fraction * spec.n_incidents))
    corrupt = set(rng.choice(spec.n_incidents, size=n_corrupt, replace=False).tolist()) if n_corrupt else set()

    for k in range(spec.n_incidents):
        iid = f"I{k + 1:0{id_digits}d}"
        feats = draw_features(rng)
        dur = true_duration(feats, spec.min_duration, spec.max_duration)
        n_slots = dur // SLOT_MINUTES
        true_durations[iid] = dur
        if k in pick_for:
            sid, day = pick_for[k]
            sx, sy = station_xy[sid]
            x = sx + rng.uniform(-ALONG_ROAD_MAX_M, ALONG_ROAD_MAX_M)
            y = sy + rng.uniform(-SIDE_OFFSET_MAX_M, SIDE_OFFSET_MAX_M)
            start_slot = int(rng.integers(40, SLOTS_PER_DAY - n_slots - 40 + 1))
            depth = float(rng.uniform(*spec.depth))
            dips[(sid, day)] = (start_slot, n_slots, depth)
            truth.append(TruthRow(iid, start_slot, dur, sid, day, depth, spec.ramp_slots))
        else:
            day = int(rng.integers(spec.calibration_days, n_days))
            start_slot = int(rng.integers(40, SLOTS_PER_DAY - n_slots - 40 + 1))
            if rng.random() < 0.5:
                x = rng.integers(0, cols + 1) * BLOCK_M + rng.uniform(-SIDE_OFFSET_MAX_M, SIDE_OFFSET_MAX_M)
                y = (rng.integers(0, rows) + 0.5) * BLOCK_M + rng.uniform(-ALONG_ROAD_MAX_M, ALONG_ROAD_MAX_M)
            else:
                x = (rng.integers(0, cols) + rng.uniform(0.1, 0.9)) * BLOCK_M
                y = rng.integers(0, rows + 1) * BLOCK_M + rng.choice([-1.0, 1.0]) * rng.uniform(OFF_ROAD_M, 2 * OFF_ROAD_M)
            truth.append(TruthRow(iid, start_slot, dur, "", day, 0.0, spec.ramp_slots))
        start = t0 + timedelta(days=day, minutes=start_slot * SLOT_MINUTES)
        if spec.jitter_minutes:
            start += timedelta(minutes=int(rng.integers(-spec.jitter_minutes, spec.jitter_minutes + 1)))
        reported = int(rng.choice(PLACEHOLDER_DURATIONS)) if k in corrupt else dur
        lon, lat = lonlat(x, y)[0]
        incidents.append(IncidentRecord(iid, float(lat), float(lon), start, reported, tuple(feats), FEATURE_NAMES))

    series = []
    if spec.with_series:
        base = commuter_template(spec.free_flow, spec.peak_drop)
        for s in stations:
            scale = rng.uniform(0.9, 1.1)
            days = np.tile(base * scale, (n_days, 1))
            for d in range(spec.calibration_days, n_days):
                if (s.station_id, d) in dips:
                    a, ln, depth = dips[(s.station_id, d)]
                    days[d] = inject_dip(days[d], a, ln, depth, spec.ramp_slots)
            values = days.ravel()
            if spec.noise:
                values = values + rng.normal(0.0, spec.noise, values.size) * np.tile(base * scale, n_days)
            values = np.round(np.maximum(values, 0.0), 6)
            series.append(SpeedSeries(s.station_id, t0, values, np.zeros(values.size, bool), unit="mph"))

    return Scenario(spec, seed, polylines, stations, incidents, truth, series, true_durations)


# ---------------------------------------------------------------------------
# Single-day recovery trials


@dataclass(frozen=True)
class RecoveryTrial:
    calibration: SpeedSeries
    test_day: SpeedSeries
    start_slot: int
    n_slots: int
    depth: float

    @property
    def true_duration_min(self) -> int:
        return self.n_slots * SLOT_MINUTES


def recovery_trials(
    n: int = 100,
    noise: float = 0.0,
    seed: int = 7,
    span_minutes: tuple[int, int] = (30, 240),
    depth: tuple[float, float] = (0.4, 0.6),
    ramp: int = 1,
    calibration_days: int = 28,
    free_flow: float = 65.0,
):
    """Yield one-day dip trials over a commuter baseline.

    ``noise`` is the Gaussian standard deviation as a fraction of the
    baseline speed. The 28 calibration days carry the same noise but no dip.
    """
    rng = np.random.default_rng(seed)
    base = commuter_template(free_flow)
    t0 = datetime(2024, 1, 1, tzinfo=timezone.utc)
    lo, hi = span_minutes[0] // SLOT_MINUTES, span_minutes[1] // SLOT_MINUTES
    for _ in range(n):
        n_slots = int(rng.integers(lo, hi + 1))
        a = int(rng.integers(40, SLOTS_PER_DAY - n_slots - 40 + 1))
        dep = float(rng.uniform(*depth))
        cal = np.tile(base, calibration_days)
        day = inject_dip(base, a, n_slots, dep, ramp)
        if noise:
            cal = cal + rng.normal(0.0, noise, cal.size) * np.tile(base, calibration_days)
            day = day + rng.normal(0.0, noise, day.size) * base
        cal_s = SpeedSeries("T", t0, np.maximum(cal, 0.0), np.zeros(cal.size, bool))
        day_s = SpeedSeries("T", t0 + timedelta(days=calibration_days), np.maximum(day, 0.0), np.zeros(day.size, bool))
        yield RecoveryTrial(cal_s, day_s, a, n_slots, dep)


# ---------------------------------------------------------------------------
# Truth files


def write_truth_csv(path, truth) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRUTH_COLUMNS)
        for t in truth:
            writer.writerow(
                [t.incident_id, t.true_start_slot, t.true_duration_min, t.station_id, t.day_index, repr(t.depth), t.ramp_slots]
            )


def load_truth_csv(path) -> list[TruthRow]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"{path}: no such file")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not set(TRUTH_COLUMNS[:4]) <= set(reader.fieldnames):
            raise ValidationError(f"{path}: header must contain {', '.join(TRUTH_COLUMNS[:4])}")
        return [
            TruthRow(
                r["incident_id"],
                int(r["true_start_slot"]),
                int(r["true_duration_min"]),
                r["station_id"],
                int(r.get("day_index") or 0),
                float(r.get("depth") or 0.0),
                int(r.get("ramp_slots") or 0),
            )
            for r in reader
        ]

