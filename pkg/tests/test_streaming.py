import numpy as np
import pytest

from conftest import dip_day, flat_profile, make_series
from disruptkit.data import MonthlyProfile
from disruptkit.segmentation import SegmentationConfig, segment_series
from disruptkit.streaming import (
    Event,
    NotCalibratedError,
    StreamingDetector,
    calibrate_bounds,
    pair_events,
    read_events,
    replay,
    write_events,
)


def _random_case(rng, metric=None):
    nd = int(rng.integers(1, 4))
    prof = MonthlyProfile("R", 45 + 15 * rng.random(288), 1)
    v = np.tile(prof.slots, nd) + rng.normal(0, rng.choice([0.5, 2.0, 6.0]), 288 * nd)
    for _ in range(int(rng.integers(0, 4))):
        a = int(rng.integers(0, 288 * nd - 5))
        v[a : a + int(rng.integers(3, 60))] *= rng.uniform(0.3, 0.8)
    mask = rng.random(v.size) < 0.02
    s = make_series(np.maximum(v, 0), "R", missing=mask)
    cfg = SegmentationConfig(metric=metric or str(rng.choice(["chebyshev", "wasserstein", "cosine", "euclidean"])))
    return s, prof, cfg


def test_requires_calibration():
    det = StreamingDetector(flat_profile())
    with pytest.raises(NotCalibratedError):
        det.push(50.0)


def test_constant_stream_is_silent():
    prof = flat_profile(60)
    det = StreamingDetector(prof, bounds=(0.0, 100.0))
    assert all(det.push(60.0) is None for _ in range(288 * 2))
    assert det.finish() is None


def test_dip_day_equals_offline():
    prof = flat_profile(60)
    s = make_series(dip_day(60, 30, 100, 140))
    cfg = SegmentationConfig()
    bounds = (0.0, 900.0)
    offline = segment_series(s, prof, cfg, bounds).intervals
    assert len(offline) == 1
    assert pair_events(replay(s, prof, cfg, bounds)) == list(offline)


def test_two_dips_two_pairs():
    prof = flat_profile(60)
    day = dip_day(60, 30, 60, 90)
    day[180:220] = 25
    s = make_series(day)
    ival = pair_events(replay(s, prof, SegmentationConfig(), (0.0, 1300.0)))
    assert len(ival) == 2 and ival[0].exit_idx <= ival[1].enter_idx
    assert ival == list(segment_series(s, prof, SegmentationConfig(), (0.0, 1300.0)).intervals)


def test_empty_series():
    s = make_series(np.zeros(0))
    assert replay(s, flat_profile(), SegmentationConfig(), (0.0, 1.0)) == []


def test_prefix_and_causality(rng):
    s, prof, cfg = _random_case(rng, "chebyshev")
    bounds = (0.0, 2000.0)
    det = StreamingDetector(prof, cfg, bounds)
    full = [e for e in (det.push(x) for x in s.values) if e is not None]
    cut = 300
    det2 = StreamingDetector(prof, cfg, bounds)
    part = [e for e in (det2.push(x) for x in s.values[:cut]) if e is not None]
    assert part == full[: len(part)]
    # an event emitted at slot i does not depend on readings after i
    v = s.values.copy()
    v[cut:] = rng.uniform(0, 90, v.size - cut)
    det3 = StreamingDetector(prof, cfg, bounds)
    mutated = [e for e in (det3.push(x) for x in v) if e is not None]
    assert [e for e in mutated if e.slot < cut] == [e for e in full if e.slot < cut]


def test_randomized_equivalence(rng):
    for _ in range(60):
        s, prof, cfg = _random_case(rng)
        seg = segment_series(s, prof, cfg)
        bounds = (seg.pre.bounds[0], seg.pre.bounds[1] * float(rng.choice([1.0, 0.6])))
        expected = list(segment_series(s, prof, cfg, bounds).intervals)
        assert pair_events(replay(s, prof, cfg, bounds)) == expected


def test_calibration_bounds(rng):
    prof = flat_profile(60)
    cal = make_series(60 + rng.normal(0, 2, 288 * 3))
    det = StreamingDetector(prof).calibrate(cal)
    lo, hi = calibrate_bounds(prof, cal, SegmentationConfig())
    assert det.bounds == (lo, hi) and 0 <= lo < hi


def test_event_log_roundtrip(tmp_path):
    evs = [Event("A", 5, "open", 0.5, 0, 4), Event("A", 40, "close", 0.1, 0, 39, True, 11)]
    write_events(tmp_path / "e.ndjson", evs)
    assert read_events(tmp_path / "e.ndjson") == evs
    line = (tmp_path / "e.ndjson").read_text().splitlines()[0]
    assert {"station_id", "slot", "kind", "magnitude"} <= set(__import__("json").loads(line))


def test_pairing_day_boundary():
    evs = [Event("A", 280, "open", 0.4, 0, 279), Event("A", 290, "close", 0.1, 1, 1)]
    assert pair_events(evs) == []
