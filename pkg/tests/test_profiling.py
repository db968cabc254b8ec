import numpy as np
import pytest

from conftest import make_series
from disruptkit.data import ValidationError
from disruptkit.profiling import (
    build_monthly_profile,
    load_profiles_csv,
    profile_before,
    tile_profile,
    write_profiles_csv,
)


def test_constant_day():
    p = build_monthly_profile(make_series(np.full(288, 60.0)))
    assert np.all(p.slots == 60) and p.n_days_observed == 1


def test_two_point_mean():
    v = np.full(576, 55.0)
    v[0], v[288] = 50.0, 70.0
    assert build_monthly_profile(make_series(v)).slots[0] == 60


def test_missing_slots_skipped():
    v = np.full(576, 50.0)
    v[288 + 3] = 90.0
    mask = np.zeros(576, bool)
    mask[288 + 3] = True
    assert build_monthly_profile(make_series(v, missing=mask)).slots[3] == 50


def test_noisy_days_close_to_template(rng):
    template = 50 + 10 * np.sin(np.arange(288) / 288 * 2 * np.pi)
    sigma = 4.0
    days = template + rng.normal(0, sigma, (30, 288))
    p = build_monthly_profile(make_series(days.ravel()))
    independent = days.mean(axis=0)
    np.testing.assert_allclose(p.slots, independent, rtol=1e-12)
    assert np.all(np.abs(p.slots - template) <= 3 * sigma / np.sqrt(30) + 1e-9) or (
        np.mean(np.abs(p.slots - template) <= 3 * sigma / np.sqrt(30)) > 0.99
    )


def test_errors():
    with pytest.raises(ValidationError):
        build_monthly_profile(make_series(np.ones(300)))
    mask = np.zeros(576, bool)
    mask[[7, 288 + 7]] = True
    with pytest.raises(ValidationError, match="7"):
        build_monthly_profile(make_series(np.ones(576), missing=mask))


def test_invariants_day_permutation_and_bounds(rng):
    days = rng.uniform(20, 80, (5, 288))
    p1 = build_monthly_profile(make_series(days.ravel()))
    p2 = build_monthly_profile(make_series(days[rng.permutation(5)].ravel()))
    np.testing.assert_allclose(p1.slots, p2.slots, rtol=1e-14)
    assert p1.slots.min() >= days.min() and p1.slots.max() <= days.max()


def test_tile():
    p = build_monthly_profile(make_series(np.arange(288.0)))
    np.testing.assert_array_equal(tile_profile(p, 1), p.slots)
    t = tile_profile(p, 3)
    assert t.size == 864
    for j in range(3):
        np.testing.assert_array_equal(t[288 * j : 288 * (j + 1)], p.slots)
    with pytest.raises(ValueError):
        tile_profile(p, 0)


def test_profile_before_uses_preceding_days():
    v = np.concatenate([np.full(288, float(d)) for d in range(40)])
    s = make_series(v)
    p = profile_before(s, 35, 28)
    assert np.all(p.slots == np.mean(np.arange(7, 35)))
    with pytest.raises(ValidationError):
        profile_before(s, 10, 28)


def test_csv_roundtrip(tmp_path, rng):
    profs = [build_monthly_profile(make_series(rng.uniform(0, 80, 576), station_id=s)) for s in ("A", "B")]
    write_profiles_csv(tmp_path / "p.csv", profs)
    back = load_profiles_csv(tmp_path / "p.csv")
    assert back["A"] == profs[0] and back["B"] == profs[1]
    assert len((tmp_path / "p.csv").read_text().splitlines()) == 1 + 2 * 288
