"""Evacuee classification and destination inference.

Residents are placed in the designated evacuation zone, a buffer ring
around it, or outside. Nightly stays during the storm window decide who
left home; evacuees' nightly stops then decide where they went.
"""
from __future__ import annotations

import csv
import datetime as dt
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .clock import (DEFAULT_TZ_OFFSET_H, DAY_S, NightWindow, date_to_day, day_to_date,
                    local_seconds, local_to_epoch)
from .geo import (GeoPoint, Grid, GridCell, Polygon, PolygonIndex, boundary_distance_m,
                  haversine_m, points_in_polygon)
from .homes import MAX_GAP_S, HomeRecord, pair_credits
from .ingest import Trajectory

BUFFER_M = 7_500.0
MIN_COVERAGE = 0.5
MIN_STOP_DIST_M = 100.0
STORM_START_LOCAL = dt.datetime(2022, 9, 22, 20, 0)
STORM_END_LOCAL = dt.datetime(2022, 10, 1, 7, 0)


class ResidenceClass(str, Enum):
    IN_ZONE = "in_zone"
    BUFFER = "buffer"
    OUTSIDE = "outside"


@dataclass(frozen=True)
class StormWindow:
    """Epoch-second interval ``[start, end)``."""

    start: float
    end: float

    @classmethod
    def local(cls, start: dt.datetime = STORM_START_LOCAL, end: dt.datetime = STORM_END_LOCAL,
              tz_offset_h: float = DEFAULT_TZ_OFFSET_H) -> "StormWindow":
        return cls(local_to_epoch(start, tz_offset_h), local_to_epoch(end, tz_offset_h))

    def nights(self, night_window: NightWindow = NightWindow(),
               tz_offset_h: float = DEFAULT_TZ_OFFSET_H) -> list[dt.date]:
        """Nights whose start falls inside the window."""
        lo = local_seconds(self.start, tz_offset_h) - night_window.start_s
        hi = local_seconds(self.end, tz_offset_h) - night_window.start_s
        first = int(np.ceil(lo / DAY_S))
        last = int(np.ceil(hi / DAY_S))
        return [day_to_date(d) for d in range(first, last)]


class EvacZoneMap:
    """Designated evacuation zones plus a buffer ring of ``buffer_m`` meters."""

    def __init__(self, zones: Iterable[Polygon], buffer_m: float = BUFFER_M):
        self.zones = tuple(zones)
        if not self.zones:
            raise ValueError("evacuation zone map is empty")
        self.buffer_m = float(buffer_m)
        self._index = PolygonIndex(self.zones)
        # Degree margins for the bounding-box pre-filter of the buffer test.
        self._pad = [(self.buffer_m / 111_000.0,
                      self.buffer_m / (111_000.0 * max(np.cos(np.radians(max(abs(z.bbox[0]),
                                                                             abs(z.bbox[2])))),
                                                          1e-6)))
                     for z in self.zones]

    def classify(self, lat, lon) -> np.ndarray:
        """Residence class value for each point (as an object array of str)."""
        lat = np.atleast_1d(np.asarray(lat, dtype=float))
        lon = np.atleast_1d(np.asarray(lon, dtype=float))
        out = np.full(lat.shape, ResidenceClass.OUTSIDE.value, dtype=object)
        inside = self._index.locate_index(lat, lon) >= 0
        out[inside] = ResidenceClass.IN_ZONE.value
        near = np.zeros(lat.shape, dtype=bool)
        for zone, (plat, plon) in zip(self.zones, self._pad):
            s, w, n, e = zone.bbox
            cand = np.flatnonzero(~inside & ~near & (lat >= s - plat) & (lat <= n + plat)
                                  & (lon >= w - plon) & (lon <= e + plon))
            if cand.size:
                d = boundary_distance_m(zone, lat[cand], lon[cand])
                near[cand[d <= self.buffer_m]] = True
        out[near] = ResidenceClass.BUFFER.value
        return out


def classify_residence(home: HomeRecord, zones: EvacZoneMap) -> ResidenceClass:
    return ResidenceClass(zones.classify(home.home_point.lat, home.home_point.lon)[0])


@dataclass(frozen=True)
class NightStay:
    device_id: str
    night_date: dt.date
    cell: GridCell
    ping_count: int
    dwell_s: float
    coverage_fraction: float


def _night_stays_arrays(traj: Trajectory, grid: Grid, night_window: NightWindow,
                        max_gap_s: float):
    """Per-night winning cell, as parallel arrays sorted by night."""
    t = local_seconds(traj.ts, traj.tz_offset_h)
    ix, iy = grid.cells(traj.lat, traj.lon) if len(t) else (np.empty(0, np.int64),) * 2
    in_night, night = night_window.night_of(t)
    if not in_night.any():
        return None
    offsets = night_window.day_boundaries()

    def night_pieces(same_cell):
        pair, s, e, c = pair_credits(t, ix, iy, max_gap_s, offsets, same_cell)
        ok, n = night_window.night_of((s + e) / 2)
        return pair[ok], n[ok], c[ok]

    # Ping counts per (night, cell).
    keys = np.column_stack([night[in_night], ix[in_night], iy[in_night]])
    cells, counts = np.unique(keys, axis=0, return_counts=True)
    # Same-cell dwell per (night, cell), aligned with ``cells``.
    pair, pn, pc = night_pieces(True)
    dwell = np.zeros(len(cells))
    if len(pair):
        dkeys = np.column_stack([pn, ix[pair], iy[pair]])
        pos = {tuple(k): i for i, k in enumerate(cells.tolist())}
        for k, c in zip(dkeys.tolist(), pc.tolist()):
            i = pos.get(tuple(k))
            if i is not None:
                dwell[i] += c
    # Coverage per night from all consecutive pairs, regardless of cell.
    _, cn, cc = night_pieces(False)
    cov_nights, cov_idx = np.unique(cn, return_inverse=True)
    cov = np.bincount(cov_idx.ravel(), weights=cc, minlength=len(cov_nights))

    order = np.lexsort((cells[:, 2], cells[:, 1], -dwell, -counts, cells[:, 0]))
    cells, counts, dwell = cells[order], counts[order], dwell[order]
    first = np.concatenate(([True], cells[1:, 0] != cells[:-1, 0]))
    win = np.flatnonzero(first)
    nights = cells[win, 0]
    cover = np.zeros(len(win))
    found = np.searchsorted(cov_nights, nights)
    hit = (found < len(cov_nights)) & (cov_nights[np.minimum(found, len(cov_nights) - 1)] == nights)
    cover[hit] = cov[found[hit]]
    cover = np.clip(cover / night_window.length_s, 0.0, 1.0)
    return nights, cells[win, 1], cells[win, 2], counts[win], dwell[win], cover


def nightly_stays(traj: Trajectory, grid: Grid, window: StormWindow | None = None,
                  night_window: NightWindow = NightWindow(),
                  max_gap_s: float = MAX_GAP_S) -> list[NightStay]:
    """Cell with the most pings on each night (ties: longer dwell, then cell index)."""
    if window is not None:
        traj = traj.window(window.start, window.end)
    res = _night_stays_arrays(traj, grid, night_window, max_gap_s)
    if res is None:
        return []
    return [NightStay(traj.device_id, day_to_date(n), GridCell(int(x), int(y)), int(c),
                      float(d), float(f)) for n, x, y, c, d, f in zip(*res)]


@dataclass(frozen=True)
class EvacueeRecord:
    device_id: str
    home_tract_id: str | None
    residence_class: ResidenceClass
    is_evacuee: bool
    away_nights: tuple = ()
    excluded: bool = False


def _longest_consecutive(days: Sequence[int]) -> int:
    best = run = 0
    prev = None
    for d in days:
        run = run + 1 if prev is not None and d == prev + 1 else 1
        best = max(best, run)
        prev = d
    return best


def classify_evacuee(home: HomeRecord, stays: Sequence[NightStay],
                     residence_class: ResidenceClass, min_coverage: float = MIN_COVERAGE,
                     storm_nights: Sequence[dt.date] | None = None,
                     min_buffer_nights: int = 3) -> EvacueeRecord:
    """Apply the zone-specific leave-home rules.

    A resident is excluded when more than half of the storm nights have
    coverage below ``min_coverage`` (nights with no pings count as zero).
    A night is away when its stay cell is neither the home cell nor one of
    its 8 neighbours.
    """
    residence_class = ResidenceClass(residence_class)
    if residence_class is ResidenceClass.OUTSIDE:
        return EvacueeRecord(home.device_id, home.home_tract_id, residence_class, False)
    if storm_nights is None:
        storm_nights = StormWindow.local().nights()
    storm = set(storm_nights)
    stays = sorted((s for s in stays if s.night_date in storm), key=lambda s: s.night_date)
    covered = sum(1 for s in stays if s.coverage_fraction >= min_coverage)
    if len(storm) - covered > len(storm) / 2:
        return EvacueeRecord(home.device_id, home.home_tract_id, residence_class, False,
                             excluded=True)
    away = tuple(s.night_date for s in stays if not home.home_cell.is_near(s.cell))
    if residence_class is ResidenceClass.IN_ZONE:
        evac = len(away) >= 1
    else:
        evac = _longest_consecutive([date_to_day(d) for d in away]) >= min_buffer_nights
    return EvacueeRecord(home.device_id, home.home_tract_id, residence_class, evac, away)


@dataclass(frozen=True)
class Stop:
    night_date: dt.date
    cell: GridCell
    point: GeoPoint
    tract_id: str | None
    nights: tuple = ()


@dataclass(frozen=True)
class StopRecord:
    device_id: str
    stops: tuple
    destination_tract_id: str | None
    consec_nights: int

    @property
    def no_destination(self) -> bool:
        return self.destination_tract_id is None


def infer_stops(traj: Trajectory, home: HomeRecord, grid: Grid, tracts: PolygonIndex,
                window: StormWindow | None = None, night_window: NightWindow = NightWindow(),
                min_stop_dist_m: float = MIN_STOP_DIST_M,
                max_gap_s: float = MAX_GAP_S) -> StopRecord:
    """Nightly stops after departure and the longest same-tract night run.

    A night's winning cell becomes a new stop only when it is at least
    ``min_stop_dist_m`` from home and from the previous stop. A night within
    that distance of the previous stop extends that stop; a night near home
    ends the current run. Ties between runs go to the earlier run.
    """
    window = window or StormWindow.local(tz_offset_h=traj.tz_offset_h)
    traj = traj.window(window.start, window.end)
    empty = StopRecord(home.device_id, (), None, 0)
    if not len(traj):
        return empty
    ix, iy = grid.cells(traj.lat, traj.lon)
    left = (np.abs(ix - home.home_cell.ix) > 1) | (np.abs(iy - home.home_cell.iy) > 1)
    if not left.any():
        return empty
    traj = traj.window(float(traj.ts[np.argmax(left)]), None)
    res = _night_stays_arrays(traj, grid, night_window, max_gap_s)
    if res is None:
        return empty
    nights, cx, cy = res[0], res[1], res[2]
    plat, plon = grid.centers(cx, cy)
    d_home = haversine_m(plat, plon, home.home_point.lat, home.home_point.lon)
    tract_of = tracts.locate(plat, plon)

    stops: list[dict] = []
    night_tract: list[tuple[int, str | None]] = []
    for k in range(len(nights)):
        if d_home[k] < min_stop_dist_m:
            continue
        prev = stops[-1] if stops else None
        if prev is not None and haversine_m(plat[k], plon[k], prev["lat"], prev["lon"]) < min_stop_dist_m:
            prev["nights"].append(int(nights[k]))
            night_tract.append((int(nights[k]), prev["tract"]))
            continue
        stops.append({"night": int(nights[k]), "cell": GridCell(int(cx[k]), int(cy[k])),
                      "lat": float(plat[k]), "lon": float(plon[k]), "tract": tract_of[k],
                      "nights": [int(nights[k])]})
        night_tract.append((int(nights[k]), tract_of[k]))

    best_tract, best_len = None, 0
    run_tract, run_len, prev_night = None, 0, None
    for night, tract in night_tract:
        if tract is not None and tract == run_tract and prev_night is not None and night == prev_night + 1:
            run_len += 1
        else:
            run_tract, run_len = tract, 1
        prev_night = night
        if run_tract is not None and run_len > best_len:
            best_tract, best_len = run_tract, run_len

    out = tuple(Stop(day_to_date(s["night"]), s["cell"], GeoPoint(s["lat"], s["lon"]),
                     s["tract"], tuple(day_to_date(n) for n in s["nights"])) for s in stops)
    return StopRecord(home.device_id, out, best_tract, best_len)


@dataclass(frozen=True)
class RoleSummary:
    role: str
    n_points: int
    residential: int
    non_residential: int
    unmatched: int

    @property
    def residential_share(self) -> float:
        return self.residential / self.n_points if self.n_points else float("nan")


def landuse_validate(points: Iterable[tuple[str, str, GeoPoint]], parcels: Sequence[Polygon],
                     class_field: str = "LEVEL1_LAN",
                     residential_code: int = 1000) -> dict[str, RoleSummary]:
    """Share of home/destination points falling in residential parcels.

    Each point takes the class of the first parcel containing it; points in
    no parcel are counted as unmatched. Shares use all points of a role as
    the denominator.
    """
    points = list(points)
    index = PolygonIndex(parcels)
    lat = [p.lat for _, _, p in points]
    lon = [p.lon for _, _, p in points]
    where = index.locate_index(lat, lon) if points else np.empty(0, dtype=np.int64)
    tallies: dict[str, list[int]] = {}
    for (_, role, _), k in zip(points, where.tolist()):
        t = tallies.setdefault(role, [0, 0, 0, 0])
        t[0] += 1
        if k < 0:
            t[3] += 1
        else:
            code = parcels[k].properties.get(class_field)
            try:
                is_res = int(float(code)) == residential_code
            except (TypeError, ValueError):
                is_res = False
            t[1 if is_res else 2] += 1
    return {role: RoleSummary(role, *t) for role, t in sorted(tallies.items())}


def write_evacuees_csv(path, records: Iterable[EvacueeRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["device_id", "home_tract", "residence_class", "is_evacuee"])
        for r in records:
            w.writerow([r.device_id, r.home_tract_id or "", r.residence_class.value,
                        int(r.is_evacuee)])


def read_evacuees_csv(path) -> list[EvacueeRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [EvacueeRecord(r["device_id"], r["home_tract"] or None,
                              ResidenceClass(r["residence_class"]), r["is_evacuee"] == "1")
                for r in csv.DictReader(fh)]


def write_destinations_csv(path, records: Iterable[StopRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["device_id", "dest_tract", "consec_nights"])
        for r in records:
            w.writerow([r.device_id, r.destination_tract_id or "", r.consec_nights])


def read_destinations_csv(path) -> list[tuple[str, str | None, int]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [(r["device_id"], r["dest_tract"] or None, int(r["consec_nights"]))
                for r in csv.DictReader(fh)]


def write_landuse_csv(path, summary: dict[str, RoleSummary]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["role", "n_points", "residential", "non_residential", "unmatched",
                    "residential_share"])
        for s in summary.values():
            w.writerow([s.role, s.n_points, s.residential, s.non_residential, s.unmatched,
                        repr(s.residential_share)])
