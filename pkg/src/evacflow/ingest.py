"""Raw ping parsing, quality filtering and per-device trajectories.

Pings are held column-wise in a :class:`PingTable` so that tens of millions
of rows stay cheap; the row-oriented :class:`Ping` is available for
streaming use and small fixtures.
"""
from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np
import pandas as pd
import pyarrow as pa
import pyarrow.compute as pc
import pyarrow.csv as pacsv

from .clock import DEFAULT_TZ_OFFSET_H, day_to_date, local_day
from .geo import GeoPoint

logger = logging.getLogger(__name__)

FIELDS = ("device_id", "timestamp", "latitude", "longitude", "horizontal_accuracy")
DEFAULT_SCHEMA = {f: f for f in FIELDS}
MAX_ACCURACY_M = 50.0
MIN_POINTS = 150
MIN_DAY_PINGS = 10


class SchemaError(ValueError):
    """The ping file lacks a required column."""


@dataclass(frozen=True, slots=True)
class Ping:
    device_id: str
    point: GeoPoint
    ts: float
    accuracy_m: float


@dataclass(eq=False)
class PingTable:
    """Column store of pings. ``code`` indexes into ``device_ids``."""

    device_ids: np.ndarray
    code: np.ndarray
    ts: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    accuracy: np.ndarray

    def __len__(self):
        return len(self.code)

    def __iter__(self) -> Iterator[Ping]:
        ids = self.device_ids
        for c, t, la, lo, a in zip(self.code.tolist(), self.ts.tolist(), self.lat.tolist(),
                                   self.lon.tolist(), self.accuracy.tolist()):
            yield Ping(ids[c], GeoPoint(la, lo), t, a)

    def take(self, idx) -> "PingTable":
        return PingTable(self.device_ids, self.code[idx], self.ts[idx], self.lat[idx],
                         self.lon[idx], self.accuracy[idx])

    @classmethod
    def empty(cls) -> "PingTable":
        f = np.empty(0, dtype=float)
        return cls(np.empty(0, dtype=object), np.empty(0, dtype=np.int64), f, f, f, f)

    @classmethod
    def from_pings(cls, pings: Iterable[Ping]) -> "PingTable":
        ids: dict[str, int] = {}
        rows = [(ids.setdefault(p.device_id, len(ids)), p.ts, p.point.lat, p.point.lon,
                 p.accuracy_m) for p in pings]
        if not rows:
            return cls.empty()
        arr = np.array(rows, dtype=float)
        return cls(np.array(list(ids), dtype=object), arr[:, 0].astype(np.int64),
                   arr[:, 1], arr[:, 2], arr[:, 3], arr[:, 4])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "device_id": self.device_ids[self.code] if len(self) else np.empty(0, dtype=object),
            "timestamp": self.ts, "latitude": self.lat, "longitude": self.lon,
            "horizontal_accuracy": self.accuracy,
        })


_NUMBER = r"^\s*[-+]?(\d+\.?\d*|\.\d+)([eE][-+]?\d+)?\s*$"


def _to_float(arr: pa.Array) -> np.ndarray:
    """Exact string -> float64; anything non-numeric becomes NaN."""
    try:
        return pc.cast(arr, pa.float64()).to_numpy(zero_copy_only=False)
    except pa.ArrowInvalid:
        pass
    ok = pc.match_substring_regex(arr, _NUMBER)
    trimmed = pc.utf8_trim_whitespace(pc.if_else(ok, arr, pa.scalar("nan")))
    return pc.cast(trimmed, pa.float64()).to_numpy(zero_copy_only=False)


def _parse_timestamps(arr: pa.Array) -> np.ndarray:
    """Epoch seconds, or ISO 8601 / RFC 3339 strings with an offset."""
    num = _to_float(arr)
    todo = np.isnan(num)
    if todo.any():
        num = num.copy()
        raw = pc.filter(arr, pa.array(todo)).to_pandas()
        parsed = pd.to_datetime(raw, utc=True, format="ISO8601", errors="coerce")
        secs = parsed.astype("int64").to_numpy() / 1e9
        secs[parsed.isna().to_numpy()] = np.nan
        num[todo] = secs
    return num


class PingReader:
    """Streaming CSV reader; iterate for :class:`Ping` objects or use :meth:`chunks`.

    Malformed rows (unparseable or out-of-range fields, wrong field count)
    are skipped and counted in ``rows_skipped``. ``chunk_rows`` caps the
    size of each yielded table; ``workers > 1`` lets the CSV parser use
    threads. Neither changes the result.
    """

    def __init__(self, source, schema: Mapping[str, str] | None = None,
                 chunk_rows: int = 500_000, workers: int = 1):
        self.source = source
        self.schema = {**DEFAULT_SCHEMA, **(schema or {})}
        self.chunk_rows = max(1, int(chunk_rows))
        self.workers = max(1, int(workers))
        self.rows_read = 0
        self.rows_skipped = 0
        self._ids: dict[str, int] = {}

    def _binary(self):
        if isinstance(self.source, (str, Path)):
            return open(self.source, "rb")
        if isinstance(self.source, io.TextIOBase):
            return io.BytesIO(self.source.read().encode("utf-8"))
        return self.source

    def _check_header(self, fh) -> None:
        first = fh.readline()
        fh.seek(0)
        if not first.strip():
            raise SchemaError("ping source is empty (no header)")
        names = [h.strip() for h in next(csv.reader([first.decode("utf-8")]))]
        missing = [f"{k}->{v}" for k, v in self.schema.items() if v not in names]
        if missing:
            raise SchemaError(f"missing required column(s): {', '.join(missing)}")

    def _batches(self) -> Iterator[pa.RecordBatch]:
        fh = self._binary()
        if not fh.seekable():
            fh = io.BytesIO(fh.read())
        try:
            self._check_header(fh)
            bad = []
            cols = list(dict.fromkeys(self.schema.values()))
            reader = pacsv.open_csv(
                fh,
                read_options=pacsv.ReadOptions(use_threads=self.workers > 1,
                                               block_size=1 << 24),
                parse_options=pacsv.ParseOptions(invalid_row_handler=lambda row: bad.append(1)
                                                 or "skip"),
                convert_options=pacsv.ConvertOptions(
                    include_columns=cols, column_types={c: pa.string() for c in cols},
                    strings_can_be_null=False))
            for batch in reader:
                self.rows_read += len(bad)
                self.rows_skipped += len(bad)
                bad.clear()
                for off in range(0, batch.num_rows, self.chunk_rows):
                    yield batch.slice(off, self.chunk_rows)
            self.rows_read += len(bad)
            self.rows_skipped += len(bad)
        finally:
            if isinstance(self.source, (str, Path)):
                fh.close()

    def _convert(self, batch: pa.RecordBatch) -> PingTable:
        s = self.schema
        dev = batch.column(s["device_id"])
        ts = _parse_timestamps(batch.column(s["timestamp"]))
        lat = _to_float(batch.column(s["latitude"]))
        lon = _to_float(batch.column(s["longitude"]))
        acc = _to_float(batch.column(s["horizontal_accuracy"]))
        ok = (pc.not_equal(pc.utf8_length(dev), 0).to_numpy(zero_copy_only=False)
              & np.isfinite(ts) & np.isfinite(lat) & np.isfinite(lon) & np.isfinite(acc)
              & (np.abs(lat) <= 90) & (np.abs(lon) <= 180) & (acc >= 0))
        self.rows_read += batch.num_rows
        self.rows_skipped += int(batch.num_rows - ok.sum())
        idx = np.flatnonzero(ok)
        enc = pc.take(dev, pa.array(idx)).dictionary_encode()
        remap = np.array([self._ids.setdefault(u, len(self._ids))
                          for u in enc.dictionary.to_pylist()], dtype=np.int64)
        codes = enc.indices.to_numpy(zero_copy_only=False)
        return PingTable(np.empty(0, dtype=object),
                         remap[codes] if len(codes) else np.empty(0, dtype=np.int64),
                         ts[idx], lat[idx], lon[idx], acc[idx])

    def chunks(self) -> Iterator[PingTable]:
        """Yield one :class:`PingTable` per chunk, in file order."""
        for batch in self._batches():
            yield self._convert(batch)

    @property
    def device_ids(self) -> np.ndarray:
        return np.array(list(self._ids), dtype=object)

    def read_table(self) -> PingTable:
        parts = list(self.chunks())
        if not parts:
            return PingTable.empty()
        return PingTable(self.device_ids, *(np.concatenate([getattr(p, a) for p in parts])
                                            for a in ("code", "ts", "lat", "lon", "accuracy")))

    def __iter__(self) -> Iterator[Ping]:
        for chunk in self.chunks():
            chunk.device_ids = self.device_ids
            yield from chunk


def parse_pings(source, schema: Mapping[str, str] | None = None, **kw) -> PingReader:
    """Stream pings from a CSV source (path or file object).

    Returns a :class:`PingReader`; iterating it yields pings in file order
    and updates ``rows_read``/``rows_skipped``.
    """
    return PingReader(source, schema, **kw)


def quality_filter(pings: Iterable[Ping], max_accuracy_m: float = MAX_ACCURACY_M) -> Iterator[Ping]:
    """Keep pings with accuracy <= ``max_accuracy_m`` and drop exact duplicates."""
    seen = set()
    for p in pings:
        if not p.accuracy_m <= max_accuracy_m:
            continue
        key = (p.device_id, p.ts, p.point.lat, p.point.lon)
        if key in seen:
            continue
        seen.add(key)
        yield p


@dataclass
class FilterStats:
    accuracy_dropped: int = 0
    duplicates_removed: int = 0


def quality_filter_table(table: PingTable, max_accuracy_m: float = MAX_ACCURACY_M):
    """Table version of :func:`quality_filter`; returns ``(table, FilterStats)``."""
    good = table.accuracy <= max_accuracy_m
    kept = table.take(np.flatnonzero(good))
    dup = pd.DataFrame({"c": kept.code, "t": kept.ts, "a": kept.lat, "o": kept.lon}).duplicated()
    dup = dup.to_numpy()
    stats = FilterStats(int(len(table) - good.sum()), int(dup.sum()))
    return kept.take(np.flatnonzero(~dup)), stats


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Time-ordered pings of one device (ties keep file order)."""

    device_id: str
    ts: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    accuracy: np.ndarray
    tz_offset_h: float = DEFAULT_TZ_OFFSET_H
    active_days: frozenset = field(default=frozenset())
    min_day_pings: int = MIN_DAY_PINGS

    @classmethod
    def from_arrays(cls, device_id, ts, lat, lon, accuracy=None, *,
                    tz_offset_h: float = DEFAULT_TZ_OFFSET_H,
                    min_day_pings: int = MIN_DAY_PINGS, presorted: bool = False):
        ts = np.asarray(ts, dtype=float)
        lat = np.asarray(lat, dtype=float)
        lon = np.asarray(lon, dtype=float)
        acc = np.zeros_like(ts) if accuracy is None else np.asarray(accuracy, dtype=float)
        if not presorted:
            order = np.argsort(ts, kind="stable")
            ts, lat, lon, acc = ts[order], lat[order], lon[order], acc[order]
        for a in (ts, lat, lon, acc):
            a.flags.writeable = False
        days, counts = np.unique(local_day(ts, tz_offset_h), return_counts=True)
        active = frozenset(day_to_date(d) for d in days[counts >= min_day_pings])
        return cls(str(device_id), ts, lat, lon, acc, tz_offset_h, active, min_day_pings)

    @classmethod
    def from_pings(cls, pings: Iterable[Ping], **kw) -> "Trajectory":
        pings = list(pings)
        ids = {p.device_id for p in pings}
        if len(ids) != 1:
            raise ValueError("a trajectory needs pings from exactly one device")
        return cls.from_arrays(ids.pop(), [p.ts for p in pings], [p.point.lat for p in pings],
                               [p.point.lon for p in pings], [p.accuracy_m for p in pings], **kw)

    def __len__(self):
        return len(self.ts)

    @property
    def pings(self) -> tuple[Ping, ...]:
        return tuple(Ping(self.device_id, GeoPoint(a, o), t, c) for t, a, o, c in
                     zip(self.ts.tolist(), self.lat.tolist(), self.lon.tolist(),
                         self.accuracy.tolist()))

    def window(self, start: float | None = None, end: float | None = None) -> "Trajectory":
        """Pings with ``start <= ts < end``; active days are recomputed."""
        lo = 0 if start is None else int(np.searchsorted(self.ts, start, side="left"))
        hi = len(self.ts) if end is None else int(np.searchsorted(self.ts, end, side="left"))
        return Trajectory.from_arrays(self.device_id, self.ts[lo:hi], self.lat[lo:hi],
                                      self.lon[lo:hi], self.accuracy[lo:hi],
                                      tz_offset_h=self.tz_offset_h,
                                      min_day_pings=self.min_day_pings, presorted=True)


def build_trajectories(pings, min_points: int = MIN_POINTS,
                       tz_offset_h: float = DEFAULT_TZ_OFFSET_H,
                       min_day_pings: int = MIN_DAY_PINGS, workers: int = 1) -> list[Trajectory]:
    """Group filtered pings by device, dropping devices with < ``min_points`` pings.

    ``pings`` is a :class:`PingTable` or any iterable of :class:`Ping`.
    The result is sorted by device id and does not depend on ``workers``.
    """
    table = pings if isinstance(pings, PingTable) else PingTable.from_pings(pings)
    if not len(table):
        return []
    order = np.lexsort((table.ts, table.code))
    code = table.code[order]
    counts = np.bincount(code, minlength=len(table.device_ids))
    cuts = np.flatnonzero(np.diff(code)) + 1
    starts = np.concatenate(([0], cuts))
    ends = np.concatenate((cuts, [len(code)]))
    keep = [(s, e) for s, e in zip(starts.tolist(), ends.tolist())
            if counts[code[s]] >= min_points]
    ts, lat, lon, acc = (a[order] for a in (table.ts, table.lat, table.lon, table.accuracy))

    def make(span):
        s, e = span
        return Trajectory.from_arrays(table.device_ids[code[s]], ts[s:e], lat[s:e], lon[s:e],
                                      acc[s:e], tz_offset_h=tz_offset_h,
                                      min_day_pings=min_day_pings, presorted=True)

    with ThreadPoolExecutor(max(1, workers)) as pool:
        trajs = list(pool.map(make, keep, chunksize=256)) if workers > 1 else [make(k) for k in keep]
    trajs.sort(key=lambda t: t.device_id)
    return trajs


@dataclass
class IngestStats:
    rows_read: int = 0
    rows_skipped: int = 0
    accuracy_dropped: int = 0
    duplicates_removed: int = 0
    devices_seen: int = 0
    devices_retained: int = 0
    pings_dropped_min_points: int = 0
    pings_retained: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class IngestResult:
    trajectories: list[Trajectory]
    stats: IngestStats
    table: PingTable


def ingest(source, schema=None, max_accuracy_m: float = MAX_ACCURACY_M,
           min_points: int = MIN_POINTS, tz_offset_h: float = DEFAULT_TZ_OFFSET_H,
           min_day_pings: int = MIN_DAY_PINGS, workers: int = 1,
           chunk_rows: int = 500_000) -> IngestResult:
    """Parse, filter and group a ping CSV in one call.

    ``result.table`` holds the quality-filtered pings of retained devices.
    """
    if isinstance(source, PingTable):
        raw, stats = source, IngestStats(rows_read=len(source))
    else:
        reader = PingReader(source, schema, chunk_rows=chunk_rows, workers=workers)
        raw = reader.read_table()
        stats = IngestStats(rows_read=reader.rows_read, rows_skipped=reader.rows_skipped)
    clean, fstats = quality_filter_table(raw, max_accuracy_m)
    stats.accuracy_dropped = fstats.accuracy_dropped
    stats.duplicates_removed = fstats.duplicates_removed
    trajs = build_trajectories(clean, min_points, tz_offset_h, min_day_pings, workers)
    stats.devices_seen = int(len(np.unique(clean.code))) if len(clean) else 0
    stats.devices_retained = len(trajs)
    stats.pings_retained = sum(len(t) for t in trajs)
    stats.pings_dropped_min_points = len(clean) - stats.pings_retained
    kept = set(t.device_id for t in trajs)
    mask = np.isin(clean.code, [i for i, d in enumerate(clean.device_ids) if d in kept])
    logger.info("ingest: %s", stats.as_dict())
    return IngestResult(trajs, stats, clean.take(np.flatnonzero(mask)))


def trajectories_to_table(trajs: Iterable[Trajectory]) -> PingTable:
    trajs = list(trajs)
    if not trajs:
        return PingTable.empty()
    code = np.repeat(np.arange(len(trajs)), [len(t) for t in trajs])
    return PingTable(np.array([t.device_id for t in trajs], dtype=object), code,
                     *(np.concatenate([getattr(t, a) for t in trajs])
                       for a in ("ts", "lat", "lon", "accuracy")))


def write_pings_csv(path, table: PingTable, decimals: int | None = None) -> None:
    """Write pings with the default column names.

    Integral timestamps are written as integers; floats use the shortest
    round-trip representation unless ``decimals`` rounds them first.
    """
    ts = table.ts
    if len(ts) and np.all(np.mod(ts, 1) == 0):
        ts = ts.astype(np.int64)
    coords = [table.lat, table.lon, table.accuracy]
    if decimals is not None:
        coords = [np.round(c, decimals) for c in coords]
    ids = pa.DictionaryArray.from_arrays(
        pa.array(table.code, type=pa.int64()),
        pa.array(table.device_ids.tolist(), type=pa.string())).cast(pa.string())
    frame = pa.table(dict(zip(FIELDS, [ids, ts, *coords])))
    with open(path, "wb") as fh:
        fh.write((",".join(FIELDS) + "\n").encode())
        pacsv.write_csv(frame, fh, pacsv.WriteOptions(include_header=False,
                                                      quoting_style="none"))
