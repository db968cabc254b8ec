"""Per-station daily baseline ("monthly profile") construction and tiling."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable

import numpy as np

from .data import SLOTS_PER_DAY, MonthlyProfile, SpeedSeries, ValidationError

DEFAULT_PROFILE_DAYS = 28


def build_monthly_profile(series: SpeedSeries) -> MonthlyProfile:
    """Average the series day by day into a 288-slot template.

    Each slot is the mean of its non-missing readings across days.
    """
    n = len(series)
    if n == 0 or n % SLOTS_PER_DAY:
        raise ValidationError(
            f"station {series.station_id}: {n} readings is not a whole number of days ({SLOTS_PER_DAY} per day)"
        )
    days = series.values.reshape(-1, SLOTS_PER_DAY)
    observed = (~series.missing_mask).reshape(-1, SLOTS_PER_DAY)
    counts = observed.sum(axis=0)
    empty = np.flatnonzero(counts == 0)
    if empty.size:
        raise ValidationError(
            f"station {series.station_id}: slot(s) {', '.join(map(str, empty[:10]))} have no observations"
        )
    slots = np.where(observed, days, 0.0).sum(axis=0) / counts
    return MonthlyProfile(series.station_id, slots, n_days_observed=days.shape[0])


def profile_before(series: SpeedSeries, day_index: int, n_days: int = DEFAULT_PROFILE_DAYS) -> MonthlyProfile:
    """Profile from the ``n_days`` complete days immediately preceding ``day_index``."""
    if day_index - n_days < 0:
        raise ValidationError(
            f"station {series.station_id}: need {n_days} days before day {day_index}, only {day_index} available"
        )
    return build_monthly_profile(series.days(day_index - n_days, n_days))


def tile_profile(profile: MonthlyProfile, n_days: int) -> np.ndarray:
    if n_days <= 0:
        raise ValueError(f"n_days must be positive, got {n_days}")
    out = np.tile(profile.slots, n_days)
    out.flags.writeable = False
    return out


def write_profiles_csv(path, profiles: Iterable[MonthlyProfile]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["station_id", "slot", "speed", "n_days"])
        for p in profiles:
            for k, x in enumerate(p.slots):
                writer.writerow([p.station_id, k, repr(float(x)), p.n_days_observed])


def load_profiles_csv(path) -> dict[str, MonthlyProfile]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"{path}: no such file")
    acc: dict[str, dict[int, float]] = {}
    ndays: dict[str, int] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"station_id", "slot", "speed"} <= set(reader.fieldnames):
            raise ValidationError(f"{path}: header must contain station_id, slot, speed")
        for lineno, row in enumerate(reader, start=2):
            try:
                sid, k, x = row["station_id"].strip(), int(row["slot"]), float(row["speed"])
                nd = int(row.get("n_days") or 1)
            except (TypeError, ValueError) as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
            if not 0 <= k < SLOTS_PER_DAY:
                raise ValidationError(f"{path}:{lineno}: slot {k} out of range")
            slots = acc.setdefault(sid, {})
            if k in slots:
                raise ValidationError(f"{path}:{lineno}: duplicate slot {k} for station {sid}")
            slots[k] = x
            ndays[sid] = nd
    out = {}
    for sid, slots in acc.items():
        if len(slots) != SLOTS_PER_DAY:
            raise ValidationError(f"{path}: station {sid} has {len(slots)} slots, expected {SLOTS_PER_DAY}")
        out[sid] = MonthlyProfile(sid, np.array([slots[k] for k in range(SLOTS_PER_DAY)]), ndays[sid])
    return out
