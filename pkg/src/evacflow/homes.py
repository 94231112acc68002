"""Residence detection from pre-storm pings.

Each device's pings are binned into 20 m cells. Consecutive pings in the
same cell credit the time between them (capped) to that cell, split
proportionally across night and weekend-day boundaries. The home is the
cell with the most night + weekend dwell, provided it was used on enough
distinct nights; otherwise a weekend-only fallback applies.
"""
from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .clock import DAY_S, NightWindow, is_weekend_day, local_seconds, split_intervals
from .geo import GeoPoint, Grid, GridCell, PolygonIndex
from .ingest import Trajectory

NIGHT, WEEKEND = 0, 1
MAX_GAP_S = 1800.0
MIN_NIGHTS = 5
MIN_ACTIVE_DAYS = 15
MIN_WEEKEND_S = 6 * 3600.0


class Basis(str, Enum):
    NIGHT_RULE = "night_rule"
    WEEKEND_FALLBACK = "weekend_fallback"


@dataclass(frozen=True)
class HomeRecord:
    device_id: str
    home_cell: GridCell
    home_point: GeoPoint
    basis: Basis
    qualifying_nights: int
    home_tract_id: str | None = None


def pair_credits(t_local, ix, iy, max_gap_s: float, offsets, same_cell: bool = True):
    """Credit consecutive ping pairs and cut them at clock boundaries.

    Each pair ``k -> k+1`` earns ``min(dt, max_gap_s)`` seconds, spread over
    the pieces of ``[t_k, t_k+1)`` in proportion to piece length. Returns
    ``(pair_index, piece_start, piece_end, piece_credit)``.
    """
    t_local = np.asarray(t_local, dtype=float)
    dt = np.diff(t_local)
    mask = dt > 0
    if same_cell:
        mask &= (ix[1:] == ix[:-1]) & (iy[1:] == iy[:-1])
    k = np.flatnonzero(mask)
    src, start, end = split_intervals(t_local[k], t_local[k + 1], offsets)
    pair = k[src]
    credit = np.minimum(dt[pair], max_gap_s) * (end - start) / dt[pair]
    return pair, start, end, credit


def _group_sum(keys: np.ndarray, values: np.ndarray):
    if len(keys) == 0:
        return np.empty((0, keys.shape[1]), dtype=np.int64), np.empty(0)
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    return uniq, np.bincount(inv.ravel(), weights=values, minlength=len(uniq))


@dataclass(frozen=True, eq=False)
class DwellTable:
    """Dwell seconds per (cell, part, date) for one device.

    ``part`` is ``NIGHT`` (``day`` = local date the night starts on) or
    ``WEEKEND`` (``day`` = a Saturday or Sunday). ``cells``/``cell_total``
    hold the all-hours dwell of every credited cell.
    """

    device_id: str
    grid: Grid
    ix: np.ndarray
    iy: np.ndarray
    part: np.ndarray
    day: np.ndarray
    seconds: np.ndarray
    cells: np.ndarray
    cell_total: np.ndarray

    def per_cell(self):
        """Per credited cell: night seconds, weekend seconds, distinct nights."""
        n = len(self.cells)
        night = np.zeros(n)
        weekend = np.zeros(n)
        nights = np.zeros(n, dtype=np.int64)
        if n and len(self.ix):
            pos = {(int(a), int(b)): i for i, (a, b) in enumerate(self.cells)}
            idx = np.array([pos[(int(a), int(b))] for a, b in zip(self.ix, self.iy)])
            is_night = self.part == NIGHT
            np.add.at(night, idx[is_night], self.seconds[is_night])
            np.add.at(weekend, idx[~is_night], self.seconds[~is_night])
            np.add.at(nights, idx[is_night & (self.seconds > 0)], 1)
        return night, weekend, nights


def accumulate_dwell(traj: Trajectory, grid: Grid, night_window: NightWindow = NightWindow(),
                     max_gap_s: float = MAX_GAP_S) -> DwellTable:
    t = local_seconds(traj.ts, traj.tz_offset_h)
    ix, iy = grid.cells(traj.lat, traj.lon)
    pair, start, end, credit = pair_credits(t, ix, iy, max_gap_s, night_window.day_boundaries())
    mid = (start + end) / 2
    in_night, night_day = night_window.night_of(mid)
    day = np.floor(mid / DAY_S).astype(np.int64)
    weekend = is_weekend_day(day)
    pix, piy = ix[pair], iy[pair]
    keys = np.concatenate([
        np.column_stack([pix[in_night], piy[in_night], np.full(in_night.sum(), NIGHT),
                         night_day[in_night]]),
        np.column_stack([pix[weekend], piy[weekend], np.full(weekend.sum(), WEEKEND),
                         day[weekend]]),
    ]).astype(np.int64)
    vals = np.concatenate([credit[in_night], credit[weekend]])
    uniq, secs = _group_sum(keys, vals)
    cells, totals = _group_sum(np.column_stack([pix, piy]).astype(np.int64), credit)
    return DwellTable(traj.device_id, grid, uniq[:, 0], uniq[:, 1], uniq[:, 2], uniq[:, 3],
                      secs, cells, totals)


def detect_home(dwell: DwellTable, traj: Trajectory, min_nights: int = MIN_NIGHTS,
                min_active_days: int = MIN_ACTIVE_DAYS,
                min_weekend_s: float = MIN_WEEKEND_S) -> HomeRecord | None:
    """Home cell for one device, or ``None`` for a non-resident.

    Ties are broken by larger total dwell, then by the smaller cell index.
    """
    if len(traj.active_days) < min_active_days or len(dwell.cells) == 0:
        return None
    night, weekend, nights = dwell.per_cell()
    total = dwell.cell_total
    cx, cy = dwell.cells[:, 0], dwell.cells[:, 1]

    best = np.lexsort((cy, cx, -total, -(night + weekend)))[0]
    basis = Basis.NIGHT_RULE
    if nights[best] < min_nights:
        best = np.lexsort((cy, cx, -total, -weekend))[0]
        if weekend[best] < min_weekend_s:
            return None
        basis = Basis.WEEKEND_FALLBACK
    cell = GridCell(int(cx[best]), int(cy[best]))
    return HomeRecord(dwell.device_id, cell, dwell.grid.center(cell), basis, int(nights[best]))


def detect_homes(trajectories: Iterable[Trajectory], grid: Grid,
                 night_window: NightWindow = NightWindow(), max_gap_s: float = MAX_GAP_S,
                 min_nights: int = MIN_NIGHTS, min_active_days: int = MIN_ACTIVE_DAYS,
                 min_weekend_s: float = MIN_WEEKEND_S, before: float | None = None,
                 workers: int = 1) -> list[HomeRecord]:
    """Run home detection for many devices; only residents are returned.

    ``before`` (epoch seconds) restricts the evidence to earlier pings,
    typically the start of the storm window.
    """
    def one(traj):
        if before is not None:
            traj = traj.window(None, before)
        dwell = accumulate_dwell(traj, grid, night_window, max_gap_s)
        return detect_home(dwell, traj, min_nights, min_active_days, min_weekend_s)

    trajectories = list(trajectories)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            found = list(pool.map(one, trajectories, chunksize=64))
    else:
        found = [one(t) for t in trajectories]
    return sorted((h for h in found if h is not None), key=lambda h: h.device_id)


def assign_home_tracts(homes: Sequence[HomeRecord], tracts: PolygonIndex) -> list[HomeRecord]:
    if not homes:
        return []
    ids = tracts.locate([h.home_point.lat for h in homes], [h.home_point.lon for h in homes])
    return [replace(h, home_tract_id=t) for h, t in zip(homes, ids)]


HOME_COLUMNS = ("device_id", "home_lat", "home_lon", "home_tract_id", "basis",
                "qualifying_nights")


def write_homes_csv(path, homes: Iterable[HomeRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(HOME_COLUMNS)
        for h in homes:
            w.writerow([h.device_id, repr(h.home_point.lat), repr(h.home_point.lon),
                        h.home_tract_id or "", h.basis.value, h.qualifying_nights])


def read_homes_csv(path, grid: Grid) -> list[HomeRecord]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            p = GeoPoint(float(row["home_lat"]), float(row["home_lon"]))
            out.append(HomeRecord(row["device_id"], grid.cell(p), p, Basis(row["basis"]),
                                  int(row["qualifying_nights"]), row["home_tract_id"] or None))
    return out
