"""Synthetic scenarios with planted ground truth.

A scenario is a rectangular grid of census-tract rectangles, an evacuation
zone covering the western tract columns, a roster of devices with planted
homes and storm-night itineraries, tract attributes, and planted
direct-demand parameters. Pings and flows emitted from a scenario are the
oracle for every pipeline stage.
"""
from __future__ import annotations

import datetime as dt
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .clock import DAY_S, DEFAULT_TZ_OFFSET_H, NightWindow, date_to_day, local_to_epoch
from .evac import (BUFFER_M, STORM_END_LOCAL, STORM_START_LOCAL, EvacZoneMap, ResidenceClass,
                   StormWindow)
from .geo import (EARTH_RADIUS_M, GeoPoint, Grid, GridCell, Polygon, PolygonIndex, centroid,
                  from_local_xy, write_polygons)
from .ingest import MIN_POINTS, PingTable, write_pings_csv
from .od import (DISTANCE, SVI_VARIABLES, DesignRow, OdFlow, TractAttributes, aggregate_flows,
                 join_attributes, write_od_csv, write_tract_attributes)

# Upper ends of the observed attribute ranges; generated values never exceed them.
ATTRIBUTE_MAX = {
    "EP_UNEMP": 25.1, "EP_SNGPNT": 37.0, "EP_LIMENG": 46.1, "EP_MUNIT": 99.2,
    "EP_MOBILE": 98.5, "EP_CROWD": 27.1, "EP_NOVEH": 38.0, "EP_GROUPQ": 100.0,
    "E_GROUPQ": 13835.0, "RDENSITY": 22.312,
}
DISTANCE_MAX_M = 677_358.18

PLANTED_COEFFICIENTS = {
    "DISTANCE": -0.24,
    "RDENSITY_O": -0.043, "RDENSITY_D": 0.037,
    "EP_NOVEH_O": -0.03, "E_GROUPQ_O": 0.026, "E_GROUPQ_D": 0.023,
    "EP_LIMENG_D": 0.029, "EP_LIMENG_O": 0.025,
    # planted zeros
    "EP_UNEMP_O": 0.0, "EP_UNEMP_D": 0.0, "EP_CROWD_O": 0.0, "EP_MOBILE_D": 0.0,
}
PLANTED_LN_PHI = 4.0


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    tract_cols: int = 6
    tract_rows: int = 4
    tract_size_m: float = 4000.0
    origin_lat: float = 26.40
    origin_lon: float = -82.10
    counties: tuple = ("12071", "12015")
    zone_cols: int = 2
    n_devices: int = 300
    compliance_rate: float = 0.6
    shadow_rate: float = 0.3
    partial_rate: float = 0.1
    travel_rate: float = 0.1
    transient_rate: float = 0.3
    nonresident_rate: float = 0.05
    sparse_rate: float = 0.05
    low_coverage_rate: float = 0.05
    pre_storm_days: int = 21
    ping_interval_s: float = 900.0
    jitter_frac: float = 0.3
    noise_m: float = 0.0
    dropout: float = 0.0
    bad_accuracy_rate: float = 0.0
    duplicate_rate: float = 0.0
    tz_offset_h: float = DEFAULT_TZ_OFFSET_H
    ln_phi: float = PLANTED_LN_PHI
    coefficients: tuple = tuple(sorted(PLANTED_COEFFICIENTS.items()))
    attribute_zero_rate: float = 0.05

    def validate(self) -> None:
        if self.tract_cols < 1 or self.tract_rows < 1:
            raise ValueError("tract grid needs at least one row and column")
        if not 1 <= self.zone_cols < self.tract_cols:
            raise ValueError("zone_cols must be at least 1 and leave a tract column outside the zone")
        if self.tract_size_m < 1000:
            raise ValueError("tract_size_m must be at least 1000 m")
        if self.n_devices < 0:
            raise ValueError("n_devices must be non-negative")
        for name in ("compliance_rate", "shadow_rate", "partial_rate", "travel_rate",
                     "transient_rate", "nonresident_rate", "sparse_rate", "low_coverage_rate",
                     "dropout", "bad_accuracy_rate", "duplicate_rate", "attribute_zero_rate",
                     "jitter_frac"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.nonresident_rate + self.sparse_rate > 1:
            raise ValueError("nonresident_rate + sparse_rate exceeds 1")
        if self.ping_interval_s <= 0 or self.noise_m < 0 or self.pre_storm_days < 15:
            raise ValueError("ping_interval_s > 0, noise_m >= 0 and pre_storm_days >= 15 required")
        if not all(math.isfinite(v) for _, v in self.coefficients) or not math.isfinite(self.ln_phi):
            raise ValueError("planted parameters must be finite")
        if len(self.counties) < 1 or any(len(c) != 5 or not c.isdigit() for c in self.counties):
            raise ValueError("counties must be 5-digit FIPS codes")

    @classmethod
    def from_mapping(cls, values: dict) -> "ScenarioConfig":
        """Build from string or typed values; unknown keys are rejected."""
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for k, v in values.items():
            if k not in known:
                raise KeyError(f"unknown scenario parameter {k!r}")
            default = getattr(cls, k) if k != "coefficients" else None
            if k == "counties":
                kw[k] = tuple(str(v).replace(" ", "").split(",")) if isinstance(v, str) else tuple(v)
            elif k == "coefficients":
                kw[k] = tuple(sorted(dict(v).items()))
            elif isinstance(default, bool):
                kw[k] = str(v).lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                kw[k] = int(v)
            else:
                kw[k] = float(v)
        cfg = cls(**kw)
        cfg.validate()
        return cfg


@dataclass(frozen=True)
class DevicePlan:
    device_id: str
    kind: str  # resident, nonresident or sparse
    home_cell: GridCell | None = None
    home_point: GeoPoint | None = None
    home_tract: str | None = None
    work_point: GeoPoint | None = None
    residence_class: str | None = None
    evacuee: bool = False
    excluded: bool = False
    # (night date, point, tract) per away night, in night order
    itinerary: tuple = ()
    destination_tract: str | None = None
    active_dates: tuple = ()   # nonresidents: the only dates with pings
    dark_nights: tuple = ()    # low-coverage residents: storm nights with no night pings
    n_pings: int = 0           # sparse devices: total ping count

    @property
    def away_nights(self) -> tuple:
        return tuple(n for n, _, _ in self.itinerary)


@dataclass(eq=False)
class Scenario:
    config: ScenarioConfig
    grid: Grid
    tracts: list
    attributes: dict
    zones: list
    devices: list
    storm: StormWindow
    storm_nights: list
    start: float
    end: float
    parcels: list = field(default_factory=list)

    @property
    def seed(self) -> int:
        return self.config.seed

    @property
    def zone_map(self) -> EvacZoneMap:
        return EvacZoneMap(self.zones, BUFFER_M)

    @property
    def tract_index(self) -> PolygonIndex:
        return PolygonIndex(self.tracts)

    @property
    def coefficients(self) -> dict:
        return dict(self.config.coefficients)

    @property
    def ln_phi(self) -> float:
        return self.config.ln_phi

    def residents(self) -> list[DevicePlan]:
        return [d for d in self.devices if d.kind == "resident"]

    def expected_destinations(self) -> list[tuple[str, str, str]]:
        return [(d.device_id, d.home_tract, d.destination_tract) for d in self.devices
                if d.kind == "resident" and d.evacuee and not d.excluded]

    def expected_od(self) -> list[OdFlow]:
        return aggregate_flows(self.expected_destinations())

    def to_dict(self) -> dict:
        def point(p):
            return None if p is None else [p.lat, p.lon]

        devices = [{
            "device_id": d.device_id, "kind": d.kind,
            "home_cell": None if d.home_cell is None else list(d.home_cell),
            "home_point": point(d.home_point), "home_tract": d.home_tract,
            "work_point": point(d.work_point), "residence_class": d.residence_class,
            "evacuee": d.evacuee, "excluded": d.excluded,
            "itinerary": [[n.isoformat(), point(p), t] for n, p, t in d.itinerary],
            "destination_tract": d.destination_tract,
            "active_dates": [x.isoformat() for x in d.active_dates],
            "dark_nights": [x.isoformat() for x in d.dark_nights], "n_pings": d.n_pings,
        } for d in self.devices]
        cfg = asdict(self.config)
        cfg["coefficients"] = dict(self.config.coefficients)
        return {
            "config": cfg,
            "grid_anchor": [self.grid.anchor.lat, self.grid.anchor.lon],
            "tracts": [t.id for t in self.tracts],
            "planted_model": {"ln_phi": self.ln_phi, "coefficients": self.coefficients},
            "storm_nights": [n.isoformat() for n in self.storm_nights],
            "devices": devices,
            "expected_od": [[f.origin_tract, f.dest_tract, f.count] for f in self.expected_od()],
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        attrs = json.dumps({k: a.values() for k, a in sorted(self.attributes.items())},
                           sort_keys=True).encode()
        return hashlib.sha256(blob + attrs).hexdigest()


def _meters_to_deg(anchor: GeoPoint) -> tuple[float, float]:
    k = math.radians(1.0) * EARTH_RADIUS_M
    return 1.0 / k, 1.0 / (k * math.cos(math.radians(anchor.lat)))


def _tract_attributes(rng, tract_id: str, poly: Polygon, area_km2: float,
                      zero_rate: float) -> TractAttributes:
    pop = float(np.exp(rng.normal(np.log(4000), 0.5)))
    svi = {}
    for v in SVI_VARIABLES:
        if not v.startswith("EP_"):
            continue
        top = ATTRIBUTE_MAX.get(v, 100.0)
        val = top * rng.beta(1.5, 6.0)
        svi[v] = 0.0 if rng.random() < zero_rate else round(float(val), 1)
    for v in SVI_VARIABLES:
        if v.startswith("E_"):
            share = svi["EP" + v[1:]] / 100.0
            count = share * pop * float(np.exp(rng.normal(0, 0.3)))
            svi[v] = float(min(round(count), ATTRIBUTE_MAX.get(v, np.inf)))
    road = 0.0 if rng.random() < zero_rate else float(min(rng.gamma(2.0, 0.7),
                                                          ATTRIBUTE_MAX["RDENSITY"]))
    return TractAttributes(tract_id, svi, round(pop / area_km2, 3), round(road, 4),
                           centroid(poly))


def _random_cell(rng, grid: Grid, x0, y0, x1, y1, margin: float, avoid=None) -> GridCell:
    s = grid.size_m
    lo_x, hi_x = int(math.ceil((x0 + margin) / s)), int(math.floor((x1 - margin) / s)) - 1
    lo_y, hi_y = int(math.ceil((y0 + margin) / s)), int(math.floor((y1 - margin) / s)) - 1
    for _ in range(1000):
        cell = GridCell(int(rng.integers(lo_x, hi_x + 1)), int(rng.integers(lo_y, hi_y + 1)))
        if avoid is None or not avoid((cell.ix + 0.5) * s, (cell.iy + 0.5) * s):
            return cell
    raise RuntimeError("could not place a cell under the given constraints")


def gen_scenario(config: ScenarioConfig | None = None, **overrides) -> Scenario:
    """Deterministic scenario for ``config.seed``."""
    config = config or ScenarioConfig()
    if overrides:
        config = ScenarioConfig(**{**asdict(config), **overrides})
    config.validate()
    rng = np.random.default_rng(config.seed)
    anchor = GeoPoint(config.origin_lat, config.origin_lon)
    grid = Grid(anchor)
    size = config.tract_size_m

    tracts, bounds, attrs = [], [], {}
    per_county = math.ceil(config.tract_cols / len(config.counties))
    for c in range(config.tract_cols):
        county = config.counties[min(c // per_county, len(config.counties) - 1)]
        for r in range(config.tract_rows):
            tid = f"{county}{(c * config.tract_rows + r + 1) * 100:06d}"
            x0, y0, x1, y1 = c * size, r * size, (c + 1) * size, (r + 1) * size
            (s, n), (w, e) = from_local_xy([x0, x1], [y0, y1], anchor)
            poly = Polygon.rectangle(tid, float(s), float(w), float(n), float(e))
            tracts.append(poly)
            bounds.append((x0, y0, x1, y1))
            attrs[tid] = _tract_attributes(rng, tid, poly, (size / 1000) ** 2,
                                           config.attribute_zero_rate)

    zone_east = config.zone_cols * size
    (s, n), (w, e) = from_local_xy([0.0, zone_east], [0.0, config.tract_rows * size], anchor)
    zones = [Polygon.rectangle("zone_A", float(s), float(w), float(n), float(e))]

    def planted_class(x: float) -> str:
        if x < zone_east:
            return ResidenceClass.IN_ZONE.value
        if x - zone_east <= BUFFER_M:
            return ResidenceClass.BUFFER.value
        return ResidenceClass.OUTSIDE.value

    def near_buffer_edge(x, y):
        return abs(x - zone_east - BUFFER_M) < 300 or abs(x - zone_east) < 300

    storm = StormWindow.local(STORM_START_LOCAL, STORM_END_LOCAL, config.tz_offset_h)
    night_window = NightWindow()
    storm_nights = storm.nights(night_window, config.tz_offset_h)
    first_day = STORM_START_LOCAL.date() - dt.timedelta(days=config.pre_storm_days)
    start = local_to_epoch(dt.datetime.combine(first_day, dt.time()), config.tz_offset_h)
    pre_dates = [first_day + dt.timedelta(days=k) for k in range(config.pre_storm_days)]

    tract_xy = np.array([((b[0] + b[2]) / 2, (b[1] + b[3]) / 2) for b in bounds])

    def cell_in_tract(k, margin, avoid=None):
        return _random_cell(rng, grid, *bounds[k], margin, avoid)

    def center_xy(cell):
        return (cell.ix + 0.5) * grid.size_m, (cell.iy + 0.5) * grid.size_m

    def pick_destination(home_k, exclude=()):
        d = np.hypot(*(tract_xy - tract_xy[home_k]).T)
        w = np.exp(-d / (2.5 * size))
        w[list(exclude)] = 0
        return int(rng.choice(len(tracts), p=w / w.sum()))

    devices = []
    n_nights = len(storm_nights)
    for i in range(config.n_devices):
        did = f"dev{i:06d}"
        u = rng.random()
        if u < config.sparse_rate:
            devices.append(DevicePlan(did, "sparse", n_pings=int(rng.integers(30, MIN_POINTS))))
            continue
        home_k = int(rng.integers(len(tracts)))
        home = cell_in_tract(home_k, 200.0, near_buffer_edge)
        home_point = grid.center(home)
        hx, _ = center_xy(home)
        work = grid.center(cell_in_tract(int(rng.integers(len(tracts))), 200.0))
        if u < config.sparse_rate + config.nonresident_rate:
            days = sorted(rng.choice(len(pre_dates), size=10, replace=False).tolist())
            devices.append(DevicePlan(did, "nonresident", home, home_point, tracts[home_k].id,
                                      work, active_dates=tuple(pre_dates[d] for d in days)))
            continue

        cls = planted_class(hx)
        if cls != ResidenceClass.OUTSIDE.value and rng.random() < config.low_coverage_rate:
            dark = sorted(rng.choice(n_nights, size=n_nights // 2 + 1, replace=False).tolist())
            devices.append(DevicePlan(did, "resident", home, home_point, tracts[home_k].id, work,
                                      cls, excluded=True,
                                      dark_nights=tuple(storm_nights[k] for k in dark)))
            continue

        # Number of away nights and whether they make the resident an evacuee.
        r = rng.random()
        evacuee = False
        if cls == ResidenceClass.IN_ZONE.value and r < config.compliance_rate:
            n_away, evacuee = int(rng.integers(1, 7)), True
        elif cls == ResidenceClass.BUFFER.value and r < config.shadow_rate:
            n_away, evacuee = int(rng.integers(3, 7)), True
        elif cls == ResidenceClass.BUFFER.value and r < config.shadow_rate + config.partial_rate:
            n_away = 2
        elif cls == ResidenceClass.OUTSIDE.value and r < config.travel_rate:
            n_away = int(rng.integers(1, 5))
        else:
            n_away = 0

        itinerary, dest = (), None
        if n_away:
            first = int(rng.integers(0, n_nights - n_away + 1))
            nights = storm_nights[first:first + n_away]
            hxy = center_xy(home)

            def far_from(*pts):
                return lambda x, y: any(math.hypot(x - a, y - b) < 1000 for a, b in pts)

            main_k = pick_destination(home_k)
            main = cell_in_tract(main_k, 500.0, far_from(hxy))
            plan = [(main_k, main)] * n_away
            if n_away >= 3 and rng.random() < config.transient_rate:
                t_k = pick_destination(home_k, exclude=(main_k,))
                transient = cell_in_tract(t_k, 500.0, far_from(hxy, center_xy(main)))
                plan[0] = (t_k, transient)
            itinerary = tuple((n, grid.center(c), tracts[k].id) for n, (k, c) in zip(nights, plan))
            dest = tracts[main_k].id
        devices.append(DevicePlan(did, "resident", home, home_point, tracts[home_k].id, work,
                                  cls, evacuee=evacuee, itinerary=itinerary,
                                  destination_tract=dest if evacuee else None))

    s = Scenario(config, grid, tracts, attrs, zones, devices, storm, storm_nights,
                 start, storm.end)
    s.parcels = _parcels(s, np.random.default_rng([config.seed, 2]))
    return s


def _parcels(s: Scenario, rng) -> list[Polygon]:
    """60 m land-use squares around planted homes and destinations."""
    dlat, dlon = _meters_to_deg(s.grid.anchor)
    out = []
    for d in s.devices:
        if d.kind != "resident":
            continue
        spots = [("home", d.home_point)] + [("dest", p) for _, p, _ in d.itinerary[-1:]]
        for role, p in spots:
            code = 1000 if rng.random() < 0.8 else int(rng.choice([2000, 4000, 5000]))
            h = 30.0
            out.append(Polygon.rectangle(f"{d.device_id}_{role}", p.lat - h * dlat,
                                         p.lon - h * dlon, p.lat + h * dlat, p.lon + h * dlon,
                                         LEVEL1_LAN=code))
    return out


def _device_pings(s: Scenario, d: DevicePlan, index: int):
    cfg = s.config
    rng = np.random.default_rng([cfg.seed, 1, index])
    tz = cfg.tz_offset_h * 3600.0
    if d.kind == "sparse":
        t = np.sort(rng.uniform(s.start, s.end, size=d.n_pings))
        lat, lon = s.grid.centers(*(rng.integers(0, 200, size=(2, d.n_pings))))
        lat, lon = np.asarray(lat), np.asarray(lon)
    else:
        step = cfg.ping_interval_s
        t = s.start + rng.uniform(0, step) + np.arange(0, s.end - s.start, step)
        t = t + rng.uniform(-cfg.jitter_frac / 2, cfg.jitter_frac / 2, size=t.size) * step
        t = t[(t >= s.start) & (t < s.end)]
        local = t + tz
        day = np.floor(local / DAY_S).astype(np.int64)
        sec = local - day * DAY_S
        weekday = (day + 3) % 7 < 5
        lat = np.full(t.size, d.home_point.lat)
        lon = np.full(t.size, d.home_point.lon)
        at_work = weekday & (sec >= 8 * 3600) & (sec < 18 * 3600)
        lat[at_work], lon[at_work] = d.work_point.lat, d.work_point.lon

        nights = [date_to_day(n) for n in d.away_nights]
        for k, (night, p, _) in enumerate(d.itinerary):
            n0 = date_to_day(night) * DAY_S + 20 * 3600 - tz
            a = n0 - 4 * 3600
            if k + 1 < len(nights) and nights[k + 1] == nights[k] + 1:
                b = n0 + DAY_S - 4 * 3600
            else:
                b = n0 + 14 * 3600
            m = (t >= a) & (t < b)
            lat[m], lon[m] = p.lat, p.lon

        keep = np.ones(t.size, dtype=bool)
        if d.kind == "nonresident":
            keep &= np.isin(day, [date_to_day(x) for x in d.active_dates])
        if d.dark_nights:
            night_of = np.where(sec >= 20 * 3600, day, day - 1)
            in_night = (sec >= 20 * 3600) | (sec < 7 * 3600)
            keep &= ~(in_night & np.isin(night_of, [date_to_day(x) for x in d.dark_nights]))
        if cfg.dropout:
            keep &= rng.random(t.size) >= cfg.dropout
        t, lat, lon = t[keep], lat[keep], lon[keep]
        if cfg.noise_m:
            dlat, dlon = _meters_to_deg(s.grid.anchor)
            lat = lat + rng.normal(0, cfg.noise_m, t.size) * dlat
            lon = lon + rng.normal(0, cfg.noise_m, t.size) * dlon
    acc = np.round(rng.uniform(3, 40, t.size), 1)

    # Rows the quality filter must remove.
    extra_t, extra_lat, extra_lon, extra_acc = [], [], [], []
    if cfg.bad_accuracy_rate and t.size:
        k = rng.random(t.size) < cfg.bad_accuracy_rate
        dlat, dlon = _meters_to_deg(s.grid.anchor)
        extra_t.append(t[k] + 1.0)
        extra_lat.append(lat[k] + rng.normal(0, 500, k.sum()) * dlat)
        extra_lon.append(lon[k] + rng.normal(0, 500, k.sum()) * dlon)
        extra_acc.append(np.round(rng.uniform(50.1, 300, k.sum()), 1))
    if cfg.duplicate_rate and t.size:
        k = rng.random(t.size) < cfg.duplicate_rate
        extra_t.append(t[k])
        extra_lat.append(lat[k])
        extra_lon.append(lon[k])
        extra_acc.append(acc[k])
    if extra_t:
        t = np.concatenate([t, *extra_t])
        lat = np.concatenate([lat, *extra_lat])
        lon = np.concatenate([lon, *extra_lon])
        acc = np.concatenate([acc, *extra_acc])
    return t, lat, lon, acc


def emit_pings(s: Scenario, round_ts: bool = True) -> PingTable:
    """All devices' pings, ordered by time then device.

    Timestamps are whole seconds unless ``round_ts`` is false.
    """
    parts = [_device_pings(s, d, i) for i, d in enumerate(s.devices)]
    ids = np.array([d.device_id for d in s.devices], dtype=object)
    if not parts:
        return PingTable.empty()
    code = np.repeat(np.arange(len(parts), dtype=np.int64), [p[0].size for p in parts])
    ts, lat, lon, acc = (np.concatenate([p[j] for p in parts]) for j in range(4))
    if round_ts:
        ts = np.floor(ts)
    order = np.lexsort((code, ts))
    return PingTable(ids, code[order], ts[order], lat[order], lon[order], acc[order])


def transform_planted(values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    return np.log1p(values) if np.any(values == 0) else np.log(values)


def emit_flows_from_model(s: Scenario, sigma: float = 0.1, n: int | None = None,
                          rounded: bool = True, seed: int | None = None,
                          ln_phi: float | None = None,
                          coefficients: dict | None = None) -> list[DesignRow]:
    """Design rows whose responses follow the planted multiplicative model.

    ``n`` distinct ordered tract pairs are drawn (all pairs when ``None``).
    Each predictor is transformed by ``ln``, or ``log(1 + x)`` when its
    sampled column contains a zero. Responses are
    ``exp(ln_phi + sum coef * f(x) + N(0, sigma^2))``, rounded to integers
    of at least 1 when ``rounded``.
    """
    ln_phi = s.ln_phi if ln_phi is None else ln_phi
    coefficients = s.coefficients if coefficients is None else coefficients
    rng = np.random.default_rng([s.seed, 3] if seed is None else seed)
    ids = sorted(s.attributes)
    pairs = [(o, d) for o in ids for d in ids]
    if n is not None:
        if n > len(pairs):
            raise ValueError(f"only {len(pairs)} tract pairs available, asked for {n}")
        pick = np.sort(rng.choice(len(pairs), size=n, replace=False))
        pairs = [pairs[k] for k in pick]
    rows = join_attributes([OdFlow(o, d, 1) for o, d in pairs], s.attributes)
    eta = np.full(len(rows), float(ln_phi))
    for name, coef in coefficients.items():
        eta += coef * transform_planted([r.predictors[name] for r in rows])
    T = np.exp(eta + (rng.normal(0, sigma, len(rows)) if sigma > 0 else 0.0))
    if rounded:
        T = np.maximum(1.0, np.round(T))
    return [DesignRow(r.origin_tract, r.dest_tract, float(t), r.predictors)
            for r, t in zip(rows, T)]


def flow_scenario(seed: int = 0, tracts_per_side: int = 9, **kw) -> Scenario:
    """A device-free scenario large enough for ``tracts_per_side**2`` tracts."""
    return gen_scenario(ScenarioConfig(seed=seed, tract_cols=tracts_per_side,
                                       tract_rows=tracts_per_side, n_devices=0, **kw))


def write_scenario(s: Scenario, outdir, pings: PingTable | None = None) -> dict[str, Path]:
    """Write every pipeline input plus the planted truth; returns the paths."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = {
        "pings": outdir / "pings.csv", "tracts": outdir / "tracts.geojson",
        "attributes": outdir / "tract_attributes.csv", "zones": outdir / "evac_zones.geojson",
        "parcels": outdir / "parcels.geojson", "planted": outdir / "planted.json",
        "planted_od": outdir / "planted_od.csv",
    }
    write_pings_csv(paths["pings"], emit_pings(s) if pings is None else pings)
    write_polygons(paths["tracts"], s.tracts)
    write_tract_attributes(paths["attributes"], [s.attributes[k] for k in sorted(s.attributes)])
    write_polygons(paths["zones"], s.zones)
    write_polygons(paths["parcels"], s.parcels)
    with open(paths["planted"], "w", encoding="utf-8") as fh:
        json.dump(s.to_dict(), fh, indent=1, sort_keys=True)
    write_od_csv(paths["planted_od"], s.expected_od())
    return paths


__all__ = [
    "ATTRIBUTE_MAX", "DISTANCE", "DISTANCE_MAX_M", "PLANTED_COEFFICIENTS", "PLANTED_LN_PHI",
    "DevicePlan", "Scenario", "ScenarioConfig", "emit_flows_from_model", "emit_pings",
    "flow_scenario", "gen_scenario", "transform_planted", "write_scenario",
]
