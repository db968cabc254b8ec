"""Incident-to-station association along a resampled road point graph.

Roads are resampled into points every 2 m, stations and incidents are snapped
to their nearest road point (within 10 m), and each station then walks the
graph breadth first, jumping between points no more than 3 m apart, for at
most 250 jumps. An incident is assigned to the station that reaches it in the
fewest jumps.
"""

from __future__ import annotations

import csv
import json
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import ValidationError

EARTH_RADIUS_M = 6371008.8
GRID_CELL_M = 4.0


@dataclass(frozen=True)
class LocalProjection:
    """Equirectangular projection to meters about a reference point."""

    lat0: float
    lon0: float

    @classmethod
    def around(cls, lats, lons) -> "LocalProjection":
        return cls(float(np.mean(lats)), float(np.mean(lons)))

    def forward(self, lat, lon):
        lat = np.asarray(lat, dtype=float)
        lon = np.asarray(lon, dtype=float)
        x = np.radians(lon - self.lon0) * EARTH_RADIUS_M * math.cos(math.radians(self.lat0))
        y = np.radians(lat - self.lat0) * EARTH_RADIUS_M
        return x, y

    def inverse(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        lat = self.lat0 + np.degrees(y / EARTH_RADIUS_M)
        lon = self.lon0 + np.degrees(x / (EARTH_RADIUS_M * math.cos(math.radians(self.lat0))))
        return lat, lon


class GridIndex:
    """Uniform-grid bucket index over 2-D points for radius queries."""

    def __init__(self, xy: np.ndarray, cell: float = GRID_CELL_M):
        self.xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        self.cell = float(cell)
        keys = np.floor(self.xy / self.cell).astype(np.int64)
        self.buckets: dict[tuple[int, int], np.ndarray] = {}
        if len(keys):
            order = np.lexsort((keys[:, 1], keys[:, 0]))
            k = keys[order]
            breaks = np.flatnonzero(np.any(np.diff(k, axis=0) != 0, axis=1)) + 1
            for chunk in np.split(order, breaks):
                cx, cy = keys[chunk[0]]
                self.buckets[(int(cx), int(cy))] = np.sort(chunk)

    def _candidates(self, x: float, y: float, r: float) -> np.ndarray:
        c = self.cell
        x0, x1 = math.floor((x - r) / c), math.floor((x + r) / c)
        y0, y1 = math.floor((y - r) / c), math.floor((y + r) / c)
        parts = [
            self.buckets[(cx, cy)]
            for cx in range(x0, x1 + 1)
            for cy in range(y0, y1 + 1)
            if (cx, cy) in self.buckets
        ]
        if not parts:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate(parts)

    def query_radius(self, x: float, y: float, r: float) -> np.ndarray:
        """Indices of points within distance ``r`` (inclusive), ascending."""
        idx = self._candidates(x, y, r)
        if idx.size == 0:
            return idx
        d2 = np.sum((self.xy[idx] - (x, y)) ** 2, axis=1)
        return np.sort(idx[d2 <= r * r])

    def nearest(self, x: float, y: float, max_dist: float) -> tuple[int, float] | None:
        """Closest point within ``max_dist``; ties go to the lowest index."""
        idx = self._candidates(x, y, max_dist)
        if idx.size == 0:
            return None
        d = np.hypot(self.xy[idx, 0] - x, self.xy[idx, 1] - y)
        ok = d <= max_dist
        if not ok.any():
            return None
        idx, d = idx[ok], d[ok]
        best = np.lexsort((idx, d))[0]
        return int(idx[best]), float(d[best])


class RoadPointGraph:
    """Road points in projected meters plus a grid index for jump queries.

    ``to_xy`` maps a record's (latitude, longitude) to graph coordinates: a
    local projection for geographic datasets, or (x=longitude, y=latitude)
    for planar ones.
    """

    def __init__(self, xy, polyline_ids, projection: LocalProjection | None = None):
        self.xy = np.asarray(xy, dtype=float).reshape(-1, 2)
        self.polyline_ids = np.asarray(polyline_ids)
        self.projection = projection
        self.index = GridIndex(self.xy)
        self._adjacency: dict[tuple[int, float], np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.xy)

    def to_xy(self, latitude, longitude):
        if self.projection is None:
            return np.asarray(longitude, dtype=float), np.asarray(latitude, dtype=float)
        return self.projection.forward(latitude, longitude)

    def neighbors(self, i: int, radius: float) -> np.ndarray:
        key = (i, radius)
        nb = self._adjacency.get(key)
        if nb is None:
            x, y = self.xy[i]
            nb = self.index.query_radius(x, y, radius)
            nb = nb[nb != i]
            self._adjacency[key] = nb
        return nb


def _clean_vertices(coords) -> np.ndarray:
    pts = np.asarray(coords, dtype=float).reshape(-1, 2)
    if len(pts) < 2:
        raise ValidationError("polyline needs at least two vertices")
    keep = np.ones(len(pts), dtype=bool)
    keep[1:] = np.any(np.diff(pts, axis=0) != 0, axis=1)
    return pts[keep]


def resample_polyline(coords, spacing: float = 2.0) -> np.ndarray:
    """Points at arc-length multiples of ``spacing`` along one polyline, both ends included."""
    pts = _clean_vertices(coords)
    seg = np.hypot(*np.diff(pts, axis=0).T) if len(pts) > 1 else np.zeros(0)
    total = float(seg.sum())
    if total == 0:
        raise ValidationError("zero-length polyline")
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    s = np.arange(0.0, total, spacing)
    if total - s[-1] > 1e-9 * max(1.0, total):
        s = np.append(s, total)
    return np.column_stack([np.interp(s, cum, pts[:, 0]), np.interp(s, cum, pts[:, 1])])


def resample_polylines(polylines: Sequence, spacing: float = 2.0, projection: LocalProjection | None = None):
    """Resample planar polylines (meters) into a :class:`RoadPointGraph`."""
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    chunks, ids = [], []
    for k, line in enumerate(polylines):
        p = resample_polyline(line, spacing)
        chunks.append(p)
        ids.append(np.full(len(p), k))
    if not chunks:
        raise ValidationError("no polylines given")
    return RoadPointGraph(np.concatenate(chunks), np.concatenate(ids), projection)


def build_road_graph(polylines_lonlat: Sequence, geographic: bool = True, spacing: float = 2.0) -> RoadPointGraph:
    """Project (lon, lat) polylines about their centroid, then resample.

    With ``geographic=False`` the coordinates are already planar (x, y) meters.
    """
    if not geographic:
        return resample_polylines(polylines_lonlat, spacing)
    allv = np.concatenate([np.asarray(p, dtype=float).reshape(-1, 2) for p in polylines_lonlat])
    proj = LocalProjection.around(allv[:, 1], allv[:, 0])
    planar = []
    for line in polylines_lonlat:
        a = np.asarray(line, dtype=float).reshape(-1, 2)
        x, y = proj.forward(a[:, 1], a[:, 0])
        planar.append(np.column_stack([x, y]))
    return resample_polylines(planar, spacing, proj)


# ---------------------------------------------------------------------------
# Snapping


@dataclass
class SnapResult:
    """Entities bound to their nearest road point; the rest are in ``dropped``."""

    point: dict[str, int] = field(default_factory=dict)
    distance: dict[str, float] = field(default_factory=dict)
    xy: dict[str, tuple[float, float]] = field(default_factory=dict)
    dropped: dict[str, float] = field(default_factory=dict)
    order: list[str] = field(default_factory=list)
    _by_point: dict[int, list[str]] | None = field(default=None, repr=False)
    _index: GridIndex | None = field(default=None, repr=False)

    def __len__(self):
        return len(self.point)

    def at_point(self, i: int) -> list[str]:
        if self._by_point is None:
            by: dict[int, list[str]] = {}
            for key in self.order:
                by.setdefault(self.point[key], []).append(key)
            self._by_point = by
        return self._by_point.get(i, [])

    def within(self, x: float, y: float, r: float) -> list[str]:
        if self._index is None:
            self._index = GridIndex(np.array([self.xy[k] for k in self.order]).reshape(-1, 2), cell=max(r, 1.0))
        return [self.order[j] for j in self._index.query_radius(x, y, r)]


def _entity_id(e) -> str:
    return getattr(e, "station_id", None) or getattr(e, "incident_id")


def snap_entities(graph: RoadPointGraph, entities: Iterable, max_snap: float = 10.0) -> SnapResult:
    """Bind each station/incident record to its nearest road point within ``max_snap`` meters."""
    if len(graph) == 0:
        raise ValidationError("road graph is empty")
    res = SnapResult()
    for e in entities:
        key = _entity_id(e)
        x, y = graph.to_xy(e.latitude, e.longitude)
        x, y = float(x), float(y)
        hit = graph.index.nearest(x, y, max_snap)
        if hit is None:
            nearest = graph.index.nearest(x, y, 10 * max_snap)
            res.dropped[key] = nearest[1] if nearest else math.inf
            continue
        res.point[key], res.distance[key] = hit
        res.xy[key] = (x, y)
        res.order.append(key)
    return res


# ---------------------------------------------------------------------------
# Traversal


def reachable_points(graph: RoadPointGraph, start: int, jump_radius: float = 3.0, max_hops: int = 250):
    """Breadth-first walk from ``start``; yields (point, hops) with minimal hops, each point once."""
    seen = {start}
    queue = deque([(start, 0)])
    while queue:
        p, h = queue.popleft()
        yield p, h
        if h >= max_hops:
            continue
        for q in graph.neighbors(p, jump_radius):
            q = int(q)
            if q not in seen:
                seen.add(q)
                queue.append((q, h + 1))


def visit_from_station(
    graph: RoadPointGraph,
    start: int,
    incidents: SnapResult,
    jump_radius: float = 3.0,
    max_hops: int = 250,
    collect_radius: float | None = None,
) -> dict[str, int]:
    """Incidents collected from one station, mapped to the hop count of first collection.

    By default an incident is collected at the road point it was snapped to.
    With ``collect_radius`` set, it is instead collected at the first visited
    point lying within that many meters of the incident's own position.
    """
    if not 0 <= start < len(graph):
        raise ValidationError(f"station point {start} is not on the graph")
    found: dict[str, int] = {}
    for p, h in reachable_points(graph, start, jump_radius, max_hops):
        if collect_radius is None:
            hits = incidents.at_point(p)
        else:
            x, y = graph.xy[p]
            hits = incidents.within(x, y, collect_radius)
        for key in hits:
            if key not in found:
                found[key] = h
    return found


@dataclass(frozen=True)
class AssociationResult:
    incident_id: str
    station_id: str
    hops: int
    spacing_m: float = 2.0

    @property
    def along_road_distance_m(self) -> float:
        return self.hops * self.spacing_m


def associate_all(
    graph: RoadPointGraph,
    stations: SnapResult,
    incidents: SnapResult,
    jump_radius: float = 3.0,
    max_hops: int = 250,
    collect_radius: float | None = None,
    spacing: float = 2.0,
    threads: int = 1,
) -> list[AssociationResult]:
    """Assign every reachable incident to its hop-nearest station.

    Ties go to the lexicographically smallest station id. Results follow the
    order in which incidents were snapped; unreached incidents are omitted.
    """
    sids = sorted(stations.point)

    def run(sid):
        return sid, visit_from_station(graph, stations.point[sid], incidents, jump_radius, max_hops, collect_radius)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            visits = list(pool.map(run, sids))
    else:
        visits = [run(s) for s in sids]

    best: dict[str, tuple[int, str]] = {}
    for sid, found in visits:
        for key, h in found.items():
            cand = (h, sid)
            if key not in best or cand < best[key]:
                best[key] = cand
    return [AssociationResult(k, best[k][1], best[k][0], spacing) for k in incidents.order if k in best]


# ---------------------------------------------------------------------------
# File formats


def load_polylines(path) -> list[np.ndarray]:
    """Read GeoJSON LineString/MultiLineString features or a (polyline_id, seq, lat, lon) CSV.

    Returns (lon, lat) vertex arrays, one per line string.
    """
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"{path}: no such file")
    if path.suffix.lower() == ".csv":
        return _load_polyline_csv(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    return _geojson_lines(doc, path)


def _geojson_lines(doc, path) -> list[np.ndarray]:
    kind = doc.get("type")
    if kind == "FeatureCollection":
        return [line for f in doc.get("features", []) for line in _geojson_lines(f, path)]
    if kind == "Feature":
        return _geojson_lines(doc.get("geometry") or {}, path)
    if kind == "GeometryCollection":
        return [line for g in doc.get("geometries", []) for line in _geojson_lines(g, path)]
    if kind == "LineString":
        return [np.asarray(doc["coordinates"], dtype=float)[:, :2]]
    if kind == "MultiLineString":
        return [np.asarray(c, dtype=float)[:, :2] for c in doc["coordinates"]]
    if kind in ("Point", "MultiPoint", "Polygon", "MultiPolygon"):
        return []
    raise ValidationError(f"{path}: unsupported GeoJSON type {kind!r}")


def _load_polyline_csv(path) -> list[np.ndarray]:
    groups: dict[str, list[tuple[int, float, float]]] = {}
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"polyline_id", "seq", "lat", "lon"} <= set(reader.fieldnames):
            raise ValidationError(f"{path}: header must contain polyline_id, seq, lat, lon")
        for lineno, row in enumerate(reader, start=2):
            try:
                groups.setdefault(row["polyline_id"], []).append(
                    (int(row["seq"]), float(row["lon"]), float(row["lat"]))
                )
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
    return [np.array([(lon, lat) for _, lon, lat in sorted(v)]) for v in groups.values()]


def write_geojson(path, polylines_lonlat: Sequence) -> None:
    doc = {
        "type": "FeatureCollection",
        "features": [
            {
                "type": "Feature",
                "properties": {"polyline_id": k},
                "geometry": {"type": "LineString", "coordinates": np.asarray(line, dtype=float).tolist()},
            }
            for k, line in enumerate(polylines_lonlat)
        ],
    }
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def write_associations_csv(path, results: Iterable[AssociationResult]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["incident_id", "station_id", "hops", "distance_m"])
        for r in results:
            writer.writerow([r.incident_id, r.station_id, r.hops, repr(r.along_road_distance_m)])


def load_associations_csv(path) -> dict[str, AssociationResult]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"{path}: no such file")
    out = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"incident_id", "station_id", "hops"} <= set(reader.fieldnames):
            raise ValidationError(f"{path}: header must contain incident_id, station_id, hops")
        for lineno, row in enumerate(reader, start=2):
            try:
                out[row["incident_id"]] = AssociationResult(row["incident_id"], row["station_id"], int(row["hops"]))
            except ValueError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
    return out
