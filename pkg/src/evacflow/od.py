"""Origin-destination flow tables and the tract-attribute join."""
from __future__ import annotations

import csv
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .geo import GeoPoint, great_circle_m

# CDC SVI component variables, by theme.
SVI_THEME1 = ("E_POV150", "E_UNEMP", "E_HBURD", "E_NOHSDP", "E_UNINSUR",
              "EP_POV150", "EP_UNEMP", "EP_HBURD", "EP_NOHSDP", "EP_UNINSUR")
SVI_THEME2 = ("E_AGE65", "E_AGE17", "E_DISABL", "E_SNGPNT", "E_LIMENG",
              "EP_AGE65", "EP_AGE17", "EP_DISABL", "EP_SNGPNT", "EP_LIMENG")
SVI_THEME3 = ("E_MINRTY", "EP_MINRTY")
SVI_THEME4 = ("E_MUNIT", "E_MOBILE", "E_CROWD", "E_NOVEH", "E_GROUPQ",
              "EP_MUNIT", "EP_MOBILE", "EP_CROWD", "EP_NOVEH", "EP_GROUPQ")
SVI_VARIABLES = SVI_THEME1 + SVI_THEME2 + SVI_THEME3 + SVI_THEME4
BUILT_ENV = ("PDENSITY", "RDENSITY")
TRACT_VARIABLES = SVI_VARIABLES + BUILT_ENV
DISTANCE = "DISTANCE"
ATTRIBUTE_COLUMNS = ("tract_id",) + TRACT_VARIABLES + ("CENTROID_LAT", "CENTROID_LON")


class MissingTractError(KeyError):
    def __init__(self, missing: Sequence[str]):
        self.missing = sorted(missing)
        super().__init__(f"no attributes for tract(s): {', '.join(self.missing)}")

    def __str__(self):
        return self.args[0]


@dataclass(frozen=True, order=True)
class OdFlow:
    origin_tract: str
    dest_tract: str
    count: int


def aggregate_flows(destinations: Iterable[tuple[str, str, str]]) -> list[OdFlow]:
    """Count (device_id, home_tract, dest_tract) records per tract pair."""
    counts = Counter((home, dest) for _, home, dest in destinations)
    return [OdFlow(o, d, n) for (o, d), n in sorted(counts.items())]


def format_od_text(flows: Iterable[OdFlow]) -> str:
    return "".join(f"{f.origin_tract} → {f.dest_tract} = {f.count}\n" for f in flows)


_OD_LINE = re.compile(r"^\s*(\S+)\s*(?:→|->)\s*(\S+)\s*=\s*(\d+)\s*$")


def parse_od_text(text: str) -> list[OdFlow]:
    """Parse ``origin → dest = count`` lines; repeated pairs are summed."""
    counts: Counter = Counter()
    for ln in text.splitlines():
        if not ln.strip():
            continue
        m = _OD_LINE.match(ln)
        if not m:
            raise ValueError(f"bad OD line: {ln!r}")
        counts[(m.group(1), m.group(2))] += int(m.group(3))
    return [OdFlow(o, d, n) for (o, d), n in sorted(counts.items())]


def write_od_csv(path, flows: Iterable[OdFlow]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["origin_tract", "dest_tract", "count"])
        for f in flows:
            w.writerow([f.origin_tract, f.dest_tract, f.count])


def read_od_csv(path) -> list[OdFlow]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [OdFlow(r["origin_tract"], r["dest_tract"], int(r["count"]))
                for r in csv.DictReader(fh)]


@dataclass(frozen=True)
class TractAttributes:
    tract_id: str
    svi: Mapping[str, float]
    population_density: float
    road_density: float
    centroid: GeoPoint

    def __post_init__(self):
        missing = [v for v in SVI_VARIABLES if v not in self.svi]
        if missing:
            raise ValueError(f"tract {self.tract_id}: missing SVI variable(s) {missing}")
        for name, v in self.values().items():
            if not math.isfinite(v):
                raise ValueError(f"tract {self.tract_id}: {name} is not finite")
            if v < 0:
                raise ValueError(f"tract {self.tract_id}: {name} = {v} is negative")
            if name.startswith("EP_") and v > 100:
                raise ValueError(f"tract {self.tract_id}: {name} = {v} exceeds 100%")

    def values(self) -> dict[str, float]:
        """All modelling variables keyed by their base name."""
        out = {v: float(self.svi[v]) for v in SVI_VARIABLES}
        out["PDENSITY"] = float(self.population_density)
        out["RDENSITY"] = float(self.road_density)
        return out


def read_tract_attributes(path) -> dict[str, TractAttributes]:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ATTRIBUTE_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"attribute file lacks column(s): {', '.join(missing)}")
        for row in reader:
            try:
                vals = {k: float(row[k]) for k in TRACT_VARIABLES}
                centroid = GeoPoint(float(row["CENTROID_LAT"]), float(row["CENTROID_LON"]))
            except ValueError as exc:
                raise ValueError(f"tract {row['tract_id']}: {exc}") from None
            out[row["tract_id"]] = TractAttributes(
                row["tract_id"], {k: vals[k] for k in SVI_VARIABLES},
                vals["PDENSITY"], vals["RDENSITY"], centroid)
    return out


def write_tract_attributes(path, attrs: Iterable[TractAttributes]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(ATTRIBUTE_COLUMNS)
        for a in attrs:
            v = a.values()
            w.writerow([a.tract_id, *(repr(v[k]) for k in TRACT_VARIABLES),
                        repr(a.centroid.lat), repr(a.centroid.lon)])


@dataclass(frozen=True)
class DesignRow:
    origin_tract: str
    dest_tract: str
    response: float
    predictors: Mapping[str, float] = field(default_factory=dict)


def join_attributes(flows: Iterable[OdFlow], attrs: Mapping[str, TractAttributes]) -> list[DesignRow]:
    """Attach ``_O``/``_D`` tract variables and centroid DISTANCE to each flow."""
    flows = list(flows)
    missing = {t for f in flows for t in (f.origin_tract, f.dest_tract) if t not in attrs}
    if missing:
        raise MissingTractError(missing)
    rows = []
    for f in flows:
        o, d = attrs[f.origin_tract], attrs[f.dest_tract]
        preds = {f"{k}_O": v for k, v in o.values().items()}
        preds.update({f"{k}_D": v for k, v in d.values().items()})
        preds[DISTANCE] = great_circle_m(o.centroid, d.centroid)
        rows.append(DesignRow(f.origin_tract, f.dest_tract, f.count, preds))
    return rows


def write_design_csv(path, rows: Sequence[DesignRow]) -> None:
    names = sorted(rows[0].predictors) if rows else []
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["origin_tract", "dest_tract", "T", *names])
        for r in rows:
            w.writerow([r.origin_tract, r.dest_tract, repr(r.response),
                        *(repr(float(r.predictors[n])) for n in names)])


def read_design_csv(path) -> list[DesignRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        names = [c for c in reader.fieldnames or [] if c not in ("origin_tract", "dest_tract", "T")]
        return [DesignRow(r["origin_tract"], r["dest_tract"], float(r["T"]),
                          {n: float(r[n]) for n in names}) for r in reader]
