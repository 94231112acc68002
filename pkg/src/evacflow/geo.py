"""Geometric primitives: local metric grid, haversine distance, polygons.

All angles are WGS84 degrees. Metric work happens in an equirectangular
frame anchored at a reference point::

    x = R * dlon * cos(lat_anchor),  y = R * dlat,  R = 6_371_000 m

which is accurate to well under 0.2 % over county-sized extents at
Florida latitudes.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

EARTH_RADIUS_M = 6_371_000.0
CELL_SIZE_M = 20.0

# Relative slack (in cell widths) so that a point placed exactly on a cell
# boundary by a degree round trip still lands in the upper cell.
_BOUNDARY_EPS = 1e-9


@dataclass(frozen=True, slots=True)
class GeoPoint:
    lat: float
    lon: float

    def __post_init__(self):
        if not (math.isfinite(self.lat) and math.isfinite(self.lon)):
            raise ValueError(f"non-finite coordinate: {self.lat}, {self.lon}")
        if not -90.0 <= self.lat <= 90.0:
            raise ValueError(f"latitude out of range: {self.lat}")
        if not -180.0 <= self.lon <= 180.0:
            raise ValueError(f"longitude out of range: {self.lon}")


class GridCell(NamedTuple):
    ix: int
    iy: int

    def is_near(self, other: "GridCell") -> bool:
        """True when ``other`` is this cell or one of its 8 neighbours."""
        return abs(self.ix - other.ix) <= 1 and abs(self.iy - other.iy) <= 1


def check_coordinates(lat, lon) -> None:
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    bad = ~(np.isfinite(lat) & np.isfinite(lon)) | (np.abs(lat) > 90) | (np.abs(lon) > 180)
    if np.any(bad):
        raise ValueError(f"{int(np.count_nonzero(bad))} coordinate(s) out of range")


def local_xy(lat, lon, anchor: GeoPoint):
    """Equirectangular offsets in meters of (lat, lon) from ``anchor``."""
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    k = math.radians(1.0) * EARTH_RADIUS_M
    x = (lon - anchor.lon) * k * math.cos(math.radians(anchor.lat))
    y = (lat - anchor.lat) * k
    return x, y


def from_local_xy(x, y, anchor: GeoPoint):
    """Inverse of :func:`local_xy`."""
    k = math.radians(1.0) * EARTH_RADIUS_M
    lat = anchor.lat + np.asarray(y, dtype=float) / k
    lon = anchor.lon + np.asarray(x, dtype=float) / (k * math.cos(math.radians(anchor.lat)))
    return lat, lon


@dataclass(frozen=True)
class Grid:
    """A 20 m grid laid over the local frame of ``anchor``.

    Cells are half-open: cell ``k`` covers ``[k*size, (k+1)*size)`` meters.
    """

    anchor: GeoPoint
    size_m: float = CELL_SIZE_M

    def cells(self, lat, lon):
        """Vectorised cell indices; returns two int64 arrays (ix, iy)."""
        check_coordinates(lat, lon)
        x, y = local_xy(lat, lon, self.anchor)
        ix = np.floor(x / self.size_m + _BOUNDARY_EPS).astype(np.int64)
        iy = np.floor(y / self.size_m + _BOUNDARY_EPS).astype(np.int64)
        return ix, iy

    def cell(self, p: GeoPoint) -> GridCell:
        ix, iy = self.cells(p.lat, p.lon)
        return GridCell(int(ix), int(iy))

    def centers(self, ix, iy):
        """Latitude/longitude of cell centres."""
        x = (np.asarray(ix, dtype=float) + 0.5) * self.size_m
        y = (np.asarray(iy, dtype=float) + 0.5) * self.size_m
        return from_local_xy(x, y, self.anchor)

    def center(self, cell: GridCell) -> GeoPoint:
        lat, lon = self.centers(cell.ix, cell.iy)
        return GeoPoint(float(lat), float(lon))


def cell_of(p: GeoPoint, anchor: GeoPoint) -> GridCell:
    """Index of the 20 m cell containing ``p`` in the frame of ``anchor``."""
    return Grid(anchor).cell(p)


def haversine_m(lat1, lon1, lat2, lon2):
    """Vectorised great-circle distance in meters (R = 6,371,000 m)."""
    p1 = np.radians(lat1)
    p2 = np.radians(lat2)
    dp = p2 - p1
    dl = np.radians(np.asarray(lon2, dtype=float) - np.asarray(lon1, dtype=float))
    a = np.sin(dp / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def great_circle_m(a: GeoPoint, b: GeoPoint) -> float:
    return float(haversine_m(a.lat, a.lon, b.lat, b.lon))


def _as_ring(points) -> np.ndarray:
    ring = np.array(
        [(p.lat, p.lon) if isinstance(p, GeoPoint) else tuple(p) for p in points],
        dtype=float,
    )
    if ring.ndim != 2 or ring.shape[1] != 2:
        raise ValueError("ring must be a sequence of (lat, lon) pairs")
    check_coordinates(ring[:, 0], ring[:, 1])
    if len(ring) and not np.array_equal(ring[0], ring[-1]):
        raise ValueError("ring is not closed (first point != last point)")
    ring.flags.writeable = False
    return ring


@dataclass(frozen=True, eq=False)
class Polygon:
    """A polygon with optional holes.

    Rings are ``(n, 2)`` arrays of ``(lat, lon)``; each ring must be closed.
    ``properties`` carries any extra attributes read from GeoJSON (for
    example a land-use class code).
    """

    id: str
    exterior: np.ndarray
    holes: tuple = ()
    properties: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "exterior", _as_ring(self.exterior))
        object.__setattr__(self, "holes", tuple(_as_ring(h) for h in self.holes))
        if len(self.exterior) < 4:
            raise ValueError(f"polygon {self.id!r}: exterior ring needs >= 4 points")

    @property
    def rings(self) -> tuple:
        return (self.exterior, *self.holes)

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        """(min_lat, min_lon, max_lat, max_lon) of the exterior ring."""
        lo = self.exterior.min(axis=0)
        hi = self.exterior.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    def translated(self, dlat: float, dlon: float) -> "Polygon":
        shift = np.array([dlat, dlon])
        return Polygon(self.id, self.exterior + shift,
                       tuple(h + shift for h in self.holes), dict(self.properties))

    @classmethod
    def rectangle(cls, id: str, south: float, west: float, north: float, east: float,
                  **properties) -> "Polygon":
        ring = [(south, west), (south, east), (north, east), (north, west), (south, west)]
        return cls(id, ring, (), properties)


def points_in_polygon(poly: Polygon, lat, lon) -> np.ndarray:
    """Even-odd containment for many points; points on an edge count as inside."""
    py = np.atleast_1d(np.asarray(lat, dtype=float))
    px = np.atleast_1d(np.asarray(lon, dtype=float))
    inside = np.zeros(py.shape, dtype=bool)
    on_edge = np.zeros(py.shape, dtype=bool)
    for ring in poly.rings:
        ys, xs = ring[:, 0], ring[:, 1]
        for k in range(len(ring) - 1):
            y0, x0, y1, x1 = ys[k], xs[k], ys[k + 1], xs[k + 1]
            straddles = (y0 > py) != (y1 > py)
            if np.any(straddles):
                x_cross = x0 + (x1 - x0) * (py[straddles] - y0) / (y1 - y0)
                hit = np.zeros_like(straddles)
                hit[straddles] = px[straddles] < x_cross
                inside ^= hit
            # Edge test: collinear and within the segment's bounding box.
            cross = (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)
            scale = max(abs(x1 - x0), abs(y1 - y0), 1e-300)
            within = ((np.minimum(x0, x1) <= px) & (px <= np.maximum(x0, x1))
                      & (np.minimum(y0, y1) <= py) & (py <= np.maximum(y0, y1)))
            on_edge |= within & (np.abs(cross) <= 1e-12 * scale)
    return inside | on_edge


def contains(poly: Polygon, p: GeoPoint) -> bool:
    return bool(points_in_polygon(poly, p.lat, p.lon)[0])


def _ring_moments(ring: np.ndarray, anchor: GeoPoint):
    x, y = local_xy(ring[:, 0], ring[:, 1], anchor)
    cross = x[:-1] * y[1:] - x[1:] * y[:-1]
    area = cross.sum() / 2
    cx = ((x[:-1] + x[1:]) * cross).sum() / 6
    cy = ((y[:-1] + y[1:]) * cross).sum() / 6
    return area, cx, cy


def centroid(poly: Polygon) -> GeoPoint:
    """Area-weighted centroid of the exterior minus its holes."""
    anchor = GeoPoint(*poly.exterior[0])
    total_a = total_x = total_y = 0.0
    for k, ring in enumerate(poly.rings):
        a, mx, my = _ring_moments(ring, anchor)
        # Orient so the exterior adds area and holes subtract it.
        sign = 1.0 if (a >= 0) == (k == 0) else -1.0
        total_a += sign * a
        total_x += sign * mx
        total_y += sign * my
    if abs(total_a) < 1e-9:
        raise ValueError(f"polygon {poly.id!r} has zero area")
    lat, lon = from_local_xy(total_x / total_a, total_y / total_a, anchor)
    return GeoPoint(float(lat), float(lon))


def boundary_distance_m(poly: Polygon, lat, lon) -> np.ndarray:
    """Distance in meters from each point to the nearest polygon edge.

    Computed in an equirectangular frame centred on each query point.
    """
    py = np.atleast_1d(np.asarray(lat, dtype=float))[:, None]
    px = np.atleast_1d(np.asarray(lon, dtype=float))[:, None]
    k = math.radians(1.0) * EARTH_RADIUS_M
    coslat = np.cos(np.radians(py))
    best = np.full(py.shape[0], np.inf)
    for ring in poly.rings:
        ax = (ring[:-1, 1][None, :] - px) * k * coslat
        ay = (ring[:-1, 0][None, :] - py) * k
        bx = (ring[1:, 1][None, :] - px) * k * coslat
        by = (ring[1:, 0][None, :] - py) * k
        dx, dy = bx - ax, by - ay
        seg2 = dx * dx + dy * dy
        with np.errstate(invalid="ignore", divide="ignore"):
            t = np.where(seg2 > 0, -(ax * dx + ay * dy) / seg2, 0.0)
        t = np.clip(t, 0.0, 1.0)
        d = np.hypot(ax + t * dx, ay + t * dy)
        best = np.minimum(best, d.min(axis=1))
    return best


class PolygonIndex:
    """Point-to-polygon lookup with a bounding-box pre-filter.

    When polygons overlap, the first one in input order wins.
    """

    def __init__(self, polygons: Iterable[Polygon]):
        self.polygons = list(polygons)
        self._bbox = np.array([p.bbox for p in self.polygons], dtype=float).reshape(-1, 4)

    def __len__(self):
        return len(self.polygons)

    def locate_index(self, lat, lon) -> np.ndarray:
        """Position of the containing polygon for each point, -1 if none."""
        lat = np.atleast_1d(np.asarray(lat, dtype=float))
        lon = np.atleast_1d(np.asarray(lon, dtype=float))
        out = np.full(lat.shape, -1, dtype=np.int64)
        for k, poly in enumerate(self.polygons):
            s, w, n, e = self._bbox[k]
            cand = np.flatnonzero((out < 0) & (lat >= s) & (lat <= n) & (lon >= w) & (lon <= e))
            if cand.size:
                hit = points_in_polygon(poly, lat[cand], lon[cand])
                out[cand[hit]] = k
        return out

    def locate(self, lat, lon) -> list:
        """Id of the containing polygon for each point, None if none."""
        return [self.polygons[k].id if k >= 0 else None for k in self.locate_index(lat, lon)]

    def locate_point(self, p: GeoPoint):
        return self.locate(p.lat, p.lon)[0]


def _rings_from_coords(coords) -> list[list[tuple[float, float]]]:
    # GeoJSON positions are [lon, lat].
    return [[(float(c[1]), float(c[0])) for c in ring] for ring in coords]


def polygons_from_geojson(obj: dict, id_field: str = "id") -> list[Polygon]:
    """Polygons from a FeatureCollection; MultiPolygon parts share one id."""
    if obj.get("type") != "FeatureCollection":
        raise ValueError("expected a GeoJSON FeatureCollection")
    out = []
    for feat in obj.get("features", []):
        props = dict(feat.get("properties") or {})
        fid = props.get(id_field, feat.get("id"))
        if fid is None:
            raise ValueError("feature without an id")
        geom = feat.get("geometry") or {}
        if geom.get("type") == "Polygon":
            parts = [geom["coordinates"]]
        elif geom.get("type") == "MultiPolygon":
            parts = geom["coordinates"]
        else:
            raise ValueError(f"unsupported geometry type {geom.get('type')!r}")
        for part in parts:
            rings = _rings_from_coords(part)
            out.append(Polygon(str(fid), rings[0], tuple(rings[1:]), props))
    return out


def read_polygons(path: str | Path, id_field: str = "id") -> list[Polygon]:
    with open(path, encoding="utf-8") as fh:
        return polygons_from_geojson(json.load(fh), id_field)


def polygons_to_geojson(polygons: Sequence[Polygon]) -> dict:
    features = []
    for poly in polygons:
        coords = [[[float(lon), float(lat)] for lat, lon in ring] for ring in poly.rings]
        props = {"id": poly.id, **poly.properties}
        features.append({"type": "Feature", "id": poly.id, "properties": props,
                         "geometry": {"type": "Polygon", "coordinates": coords}})
    return {"type": "FeatureCollection", "features": features}


def write_polygons(path: str | Path, polygons: Sequence[Polygon]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(polygons_to_geojson(polygons), fh, indent=1)
        fh.write("\n")
