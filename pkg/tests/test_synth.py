import numpy as np
import pytest

from disruptkit.association import associate_all, build_road_graph, snap_entities
from disruptkit.data import SLOTS_PER_DAY, parse_timestamp, ValidationError, load_incidents_csv, load_speed_csv
from disruptkit.synth import (
    PLACEHOLDER_DURATIONS,
    ScenarioSpec,
    generate_scenario,
    load_truth_csv,
    recovery_trials,
    trapezoid,
)


def test_trapezoid_shape():
    np.testing.assert_allclose(trapezoid(5, 1), [0.5, 1, 1, 1, 0.5])
    np.testing.assert_allclose(trapezoid(6, 2), [1 / 3, 2 / 3, 1, 1, 2 / 3, 1 / 3])
    np.testing.assert_allclose(trapezoid(3, 0), [1, 1, 1])


def test_zero_corruption_reports_truth():
    sc = generate_scenario(ScenarioSpec(n_stations=4, n_incidents=60, corruption_fraction=0.0, with_series=False), 1)
    truth = {t.incident_id: t.true_duration_min for t in sc.truth}
    assert all(i.reported_duration_min == truth[i.incident_id] for i in sc.incidents)
    assert all(35 <= d <= 240 and d % 5 == 0 for d in truth.values())


def test_corruption_fraction():
    sc = generate_scenario(ScenarioSpec(n_stations=4, n_incidents=1000, corruption_fraction=0.4, with_series=False), 2)
    truth = {t.incident_id: t.true_duration_min for t in sc.truth}
    placeholders = sum(
        1 for i in sc.incidents if i.reported_duration_min in PLACEHOLDER_DURATIONS and i.reported_duration_min != truth[i.incident_id]
    )
    assert abs(placeholders / 1000 - 0.4) < 0.03


def test_geometry_feasible_for_association():
    spec = ScenarioSpec(n_stations=9, n_incidents=150, associated_fraction=0.3, with_series=False)
    sc = generate_scenario(spec, 3)
    g = build_road_graph(sc.polylines)
    st = snap_entities(g, sc.stations)
    inc = snap_entities(g, sc.incidents)
    assert not st.dropped
    got = {r.incident_id: r for r in associate_all(g, st, inc)}
    for t in sc.truth:
        if t.station_id:
            assert inc.distance[t.incident_id] <= 10
            assert got[t.incident_id].station_id == t.station_id
            assert got[t.incident_id].along_road_distance_m <= 500
        else:
            assert t.incident_id not in got


def test_series_and_one_dip_per_station_day():
    spec = ScenarioSpec(n_stations=3, n_incidents=30, associated_fraction=0.5, observation_days=5, noise=0.0)
    sc = generate_scenario(spec, 4)
    assert len(sc.series) == 3 and all(len(s) == SLOTS_PER_DAY * 33 for s in sc.series)
    keys = [(t.station_id, t.day_index) for t in sc.truth if t.station_id]
    assert len(keys) == len(set(keys)) == 15
    by = {s.station_id: s for s in sc.series}
    for t in sc.truth:
        if t.station_id:
            day = by[t.station_id].values[t.day_index * 288 : (t.day_index + 1) * 288]
            base = by[t.station_id].values[:288]
            hit = np.flatnonzero(day < base - 1e-9)
            assert hit[0] == t.true_start_slot and len(hit) == t.true_duration_min // 5
    for s in sc.series:
        assert np.array_equal(s.values[: 288 * 28], np.tile(s.values[:288], 28))


def test_jitter_bounds():
    spec = ScenarioSpec(n_stations=2, n_incidents=50, jitter_minutes=15, with_series=False)
    sc = generate_scenario(spec, 5)
    t0 = parse_timestamp(spec.start_date)
    for inc, t in zip(sc.incidents, sc.truth):
        true = (t.day_index * 288 + t.true_start_slot) * 5
        rep = (inc.reported_start - t0).total_seconds() / 60
        assert abs(rep - true) <= 15


def test_infeasible_and_invalid_specs(tmp_path):
    with pytest.raises(ValidationError, match="infeasible"):
        generate_scenario(ScenarioSpec(n_stations=2, n_incidents=100, associated_fraction=0.5, observation_days=3), 0)
    with pytest.raises(ValidationError):
        ScenarioSpec(corruption_fraction=1.5)
    with pytest.raises(ValidationError):
        ScenarioSpec.from_dict({"bogus": 1})
    p = tmp_path / "s.json"
    p.write_text("[1,2]")
    with pytest.raises(ValidationError):
        ScenarioSpec.from_json(p)


def test_determinism_and_file_roundtrip(tmp_path):
    spec = ScenarioSpec(n_stations=3, n_incidents=40, associated_fraction=0.25, noise=0.03, jitter_minutes=5)
    a, b = generate_scenario(spec, 11), generate_scenario(spec, 11)
    assert a.truth == b.truth and a.incidents == b.incidents
    a.write(tmp_path / "a")
    b.write(tmp_path / "b")
    for name in ("roads.geojson", "stations.csv", "incidents.csv", "speed.csv", "truth.csv", "scenario.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert load_truth_csv(tmp_path / "a" / "truth.csv") == a.truth
    assert load_incidents_csv(tmp_path / "a" / "incidents.csv") == a.incidents
    assert load_speed_csv(tmp_path / "a" / "speed.csv") == a.series
    assert generate_scenario(spec, 12).truth != a.truth


def test_recovery_trials_contract():
    trials = list(recovery_trials(20, 0.0, seed=1))
    assert len(trials) == 20
    for t in trials:
        assert 30 <= t.true_duration_min <= 240 and 0.4 <= t.depth <= 0.6
        assert len(t.calibration) == 28 * 288 and len(t.test_day) == 288
        assert t.test_day.start_time - t.calibration.start_time == __import__("datetime").timedelta(days=28)
