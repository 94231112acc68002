"""Local-clock bookkeeping: days, nights, weekends and interval splitting.

Times are epoch seconds (UTC). A run uses one fixed UTC offset; local
seconds are ``ts + offset_h * 3600`` and local day numbers count days since
1970-01-01 in that local frame.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass

import numpy as np

DAY_S = 86_400
DEFAULT_TZ_OFFSET_H = -4.0
_EPOCH = dt.date(1970, 1, 1)


def local_seconds(ts, tz_offset_h: float):
    return np.asarray(ts, dtype=float) + tz_offset_h * 3600.0


def local_day(ts, tz_offset_h: float):
    return np.floor(local_seconds(ts, tz_offset_h) / DAY_S).astype(np.int64)


def day_to_date(day: int) -> dt.date:
    return _EPOCH + dt.timedelta(days=int(day))


def date_to_day(d: dt.date) -> int:
    return (d - _EPOCH).days


def is_weekend_day(day):
    # 1970-01-01 was a Thursday; Monday == 0.
    return (np.asarray(day) + 3) % 7 >= 5


def local_to_epoch(when: dt.datetime, tz_offset_h: float) -> float:
    """Epoch seconds of a naive local wall-clock time."""
    tz = dt.timezone(dt.timedelta(hours=tz_offset_h))
    return when.replace(tzinfo=tz).timestamp()


@dataclass(frozen=True)
class NightWindow:
    """Nightly clock interval, e.g. 20:00 -> 07:00; may wrap past midnight.

    A night is labelled with the local date on which it starts.
    """

    start_h: float = 20.0
    end_h: float = 7.0

    def __post_init__(self):
        if not (0 <= self.start_h < 24 and 0 <= self.end_h < 24) or self.start_h == self.end_h:
            raise ValueError(f"invalid night window {self.start_h}-{self.end_h}")

    @property
    def start_s(self) -> float:
        return self.start_h * 3600.0

    @property
    def length_s(self) -> float:
        return ((self.end_h - self.start_h) % 24) * 3600.0

    def night_of(self, t_local):
        """(in_night mask, night day number) for local seconds ``t_local``."""
        s = np.asarray(t_local, dtype=float) - self.start_s
        night = np.floor(s / DAY_S).astype(np.int64)
        return (s - night * DAY_S) < self.length_s, night

    def bounds(self, night_day) -> tuple:
        """Local-second interval [start, end) of the given night."""
        start = np.asarray(night_day, dtype=float) * DAY_S + self.start_s
        return start, start + self.length_s

    def day_boundaries(self) -> np.ndarray:
        """Offsets within a local day where midnight or the window starts/ends."""
        return np.unique(np.array([0.0, self.start_s, (self.end_h % 24) * 3600.0]))


def split_intervals(t0, t1, offsets) -> tuple:
    """Cut intervals ``[t0, t1)`` at every ``day * DAY_S + offset``.

    Returns ``(src, start, end)`` where ``src`` indexes the source interval of
    each piece. Pieces are emitted in source order, then time order.
    """
    t0 = np.asarray(t0, dtype=float)
    t1 = np.asarray(t1, dtype=float)
    offsets = np.asarray(offsets, dtype=float)
    nb = len(offsets)

    def boundary_count(t):
        # Number of boundaries <= t, counted globally from day 0.
        day = np.floor(t / DAY_S)
        return (day * nb + np.searchsorted(offsets, t - day * DAY_S, side="right")).astype(np.int64)

    def boundary_time(g):
        return (g // nb) * DAY_S + offsets[g % nb]

    first = boundary_count(t0)  # index of the first boundary strictly after t0
    last = boundary_count(np.nextafter(t1, -np.inf))  # boundaries < t1
    n_cuts = np.maximum(last - first, 0)
    n_pieces = n_cuts + 1
    src = np.repeat(np.arange(len(t0)), n_pieces)
    # Position of each piece inside its source interval.
    starts_at = np.cumsum(n_pieces) - n_pieces
    k = np.arange(len(src)) - np.repeat(starts_at, n_pieces)
    g_first = np.repeat(first, n_pieces)
    start = np.where(k == 0, t0[src], boundary_time(g_first + k - 1))
    is_last = k == np.repeat(n_cuts, n_pieces)
    end = np.where(is_last, t1[src], boundary_time(g_first + k))
    return src, start, end
