from datetime import datetime, timezone

import numpy as np
import pytest

from disruptkit.data import SLOTS_PER_DAY, MonthlyProfile, SpeedSeries

T0 = datetime(2024, 3, 1, tzinfo=timezone.utc)


def make_series(values, station_id="A", start=T0, missing=None):
    values = np.asarray(values, dtype=float)
    mask = np.zeros(values.size, bool) if missing is None else np.asarray(missing, bool)
    return SpeedSeries(station_id, start, values, mask)


def flat_profile(level=60.0, station_id="A"):
    return MonthlyProfile(station_id, np.full(SLOTS_PER_DAY, level), 1)


def dip_day(level=60.0, dip=30.0, start=100, stop=140):
    day = np.full(SLOTS_PER_DAY, level)
    day[start:stop] = dip
    return day


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
