"""Pairwise window differences and the causal moving-window deviation series."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

METRICS = ("chebyshev", "wasserstein", "cosine", "euclidean", "minkowski")
DEFAULT_WINDOW = 12


def _pair(u, v) -> tuple[np.ndarray, np.ndarray]:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape} vs {v.shape}")
    if u.size == 0:
        raise ValueError("empty input")
    return u, v


def _weights(w, n):
    if w is None:
        return None
    w = np.asarray(w, dtype=float)
    if w.shape != (n,):
        raise ValueError("weights must match the input length")
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    return w


def chebyshev_diff(u, v) -> float:
    u, v = _pair(u, v)
    return float(np.max(np.abs(u - v)))


def wasserstein_diff(u, v) -> float:
    """Earth-mover distance between the equal-weight empirical distributions of u and v."""
    u, v = _pair(u, v)
    return float(np.mean(np.abs(np.sort(u) - np.sort(v))))


def cosine_similarity(u, v) -> float:
    u, v = _pair(u, v)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValueError("cosine is undefined for a zero-norm vector")
    return float(np.dot(u, v) / (nu * nv))


def cosine_diff(u, v) -> float:
    """1 - cosine similarity, so that diverging windows give positive values."""
    return float(np.clip(1.0 - cosine_similarity(u, v), 0.0, 2.0))


def minkowski_diff(u, v, p: float = 3.0, w=None) -> float:
    if p < 1:
        raise ValueError(f"Minkowski order must be >= 1, got {p}")
    u, v = _pair(u, v)
    w = _weights(w, u.size)
    d = np.abs(u - v)
    if np.isinf(p):
        return float(np.max(d if w is None else d[w > 0], initial=0.0))
    terms = d**p if w is None else w * d**p
    return float(np.sum(terms) ** (1.0 / p))


def euclidean_diff(u, v, w=None) -> float:
    u, v = _pair(u, v)
    w = _weights(w, u.size)
    sq = (u - v) ** 2
    return float(np.sqrt(np.sum(sq if w is None else w * sq)))


def manhattan_diff(u, v, w=None) -> float:
    return minkowski_diff(u, v, p=1.0, w=w)


# Row-wise versions over an (n_windows, window) matrix. They compute the same
# quantities as the scalar functions above without a Python loop per window.


def _rows_chebyshev(a, b, **_):
    return np.max(np.abs(a - b), axis=1)


def _rows_wasserstein(a, b, **_):
    return np.mean(np.abs(np.sort(a, axis=1) - np.sort(b, axis=1)), axis=1)


def _rows_cosine(a, b, **_):
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    if np.any(na == 0) or np.any(nb == 0):
        raise ValueError("cosine is undefined for a zero-norm window")
    return np.clip(1.0 - np.sum(a * b, axis=1) / (na * nb), 0.0, 2.0)


def _rows_euclidean(a, b, w=None, **_):
    sq = (a - b) ** 2
    return np.sqrt(np.sum(sq if w is None else sq * w, axis=1))


def _rows_minkowski(a, b, p=3.0, w=None, **_):
    if p < 1:
        raise ValueError(f"Minkowski order must be >= 1, got {p}")
    d = np.abs(a - b)
    if np.isinf(p):
        return np.max(d, axis=1)
    terms = d**p if w is None else d**p * w
    return np.sum(terms, axis=1) ** (1.0 / p)


_ROWWISE: dict[str, Callable[..., np.ndarray]] = {
    "chebyshev": _rows_chebyshev,
    "wasserstein": _rows_wasserstein,
    "cosine": _rows_cosine,
    "euclidean": _rows_euclidean,
    "minkowski": _rows_minkowski,
    "manhattan": lambda a, b, w=None, **_: _rows_minkowski(a, b, p=1.0, w=w),
}

_SCALAR = {
    "chebyshev": lambda u, v, **_: chebyshev_diff(u, v),
    "wasserstein": lambda u, v, **_: wasserstein_diff(u, v),
    "cosine": lambda u, v, **_: cosine_diff(u, v),
    "euclidean": lambda u, v, w=None, **_: euclidean_diff(u, v, w),
    "minkowski": lambda u, v, p=3.0, w=None, **_: minkowski_diff(u, v, p, w),
    "manhattan": lambda u, v, w=None, **_: manhattan_diff(u, v, w),
}


def get_metric(name: str):
    """Scalar difference function by name (``manhattan`` is Minkowski with p=1)."""
    try:
        return _SCALAR[name]
    except KeyError:
        raise ValueError(f"unknown metric {name!r}; choose from {sorted(_SCALAR)}") from None


@dataclass(frozen=True)
class DifferenceSeries:
    station_id: str
    values: np.ndarray
    window_size: int = DEFAULT_WINDOW
    metric_name: str = "chebyshev"

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if not np.all(np.isfinite(v)):
            raise ValueError("difference series must be finite")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["slot_index", "value"])
            for k, x in enumerate(self.values):
                writer.writerow([k, repr(float(x))])


def window_differences(values, reference, window_size: int = DEFAULT_WINDOW, metric: str = "chebyshev", **params):
    """Raw causal window differences as a plain array.

    ``out[i]`` compares ``values[i-window_size+1 : i+1]`` against the same
    slice of ``reference``; the first ``window_size - 1`` entries repeat
    ``out[window_size - 1]`` so the output stays slot aligned.
    """
    a = np.asarray(values, dtype=float)
    b = np.asarray(reference, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("series and reference must be 1-D and equal length")
    if window_size < 1:
        raise ValueError("window_size must be positive")
    if a.size < window_size:
        raise ValueError(f"series of length {a.size} is shorter than the window ({window_size})")
    if metric not in _ROWWISE:
        raise ValueError(f"unknown metric {metric!r}")
    w = params.pop("w", None)
    if w is not None:
        w = _weights(w, window_size)
    rows = _ROWWISE[metric](sliding_window_view(a, window_size), sliding_window_view(b, window_size), w=w, **params)
    out = np.empty(a.size)
    out[window_size - 1 :] = rows
    out[: window_size - 1] = rows[0]
    return out


def moving_window_difference(
    series, profile, window_size: int = DEFAULT_WINDOW, metric: str = "chebyshev", **params
) -> DifferenceSeries:
    """Causal moving-window difference between a speed series and a tiled profile.

    ``series`` may be a :class:`~disruptkit.data.SpeedSeries` or a plain array.
    Missing readings are replaced by the profile value at that slot, i.e. they
    count as no deviation.
    """
    station_id = getattr(series, "station_id", "")
    values = np.asarray(getattr(series, "values", series), dtype=float)
    profile = np.asarray(profile, dtype=float)
    if values.shape != profile.shape:
        raise ValueError(f"series ({values.size}) and tiled profile ({profile.size}) differ in length")
    values = np.where(np.isnan(values), profile, values)
    out = window_differences(values, profile, window_size, metric, **params)
    return DifferenceSeries(station_id, out, window_size, metric)
