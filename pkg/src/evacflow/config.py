"""Flat ``key = value`` run configuration."""
from __future__ import annotations

import configparser
import datetime as dt
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import evac, homes, ingest, model
from .clock import DEFAULT_TZ_OFFSET_H
from .od import DISTANCE, TRACT_VARIABLES

INPUT_KEYS = ("pings", "tracts", "attributes", "zones", "parcels")
DEFAULT_INPUTS = {
    "pings": "data/pings.csv", "tracts": "data/tracts.geojson",
    "attributes": "data/tract_attributes.csv", "zones": "data/evac_zones.geojson",
    "parcels": "data/parcels.geojson",
}
ALL_PREDICTORS = tuple(sorted([f"{v}_O" for v in TRACT_VARIABLES]
                              + [f"{v}_D" for v in TRACT_VARIABLES] + [DISTANCE]))


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    base_dir: Path = Path(".")
    output_dir: str = "out"
    pings: str = ""
    tracts: str = ""
    attributes: str = ""
    zones: str = ""
    parcels: str = ""
    tract_id_field: str = "id"
    zone_id_field: str = "id"
    parcel_id_field: str = "id"
    landuse_field: str = "LEVEL1_LAN"
    residential_code: int = 1000
    tz_offset_h: float = DEFAULT_TZ_OFFSET_H
    max_accuracy_m: float = ingest.MAX_ACCURACY_M
    min_points: int = ingest.MIN_POINTS
    min_day_pings: int = ingest.MIN_DAY_PINGS
    chunk_rows: int = 500_000
    grid_anchor_lat: float | None = None
    grid_anchor_lon: float | None = None
    night_start_h: float = 20.0
    night_end_h: float = 7.0
    max_gap_s: float = homes.MAX_GAP_S
    min_nights: int = homes.MIN_NIGHTS
    min_active_days: int = homes.MIN_ACTIVE_DAYS
    min_weekend_s: float = homes.MIN_WEEKEND_S
    storm_start: dt.datetime = evac.STORM_START_LOCAL
    storm_end: dt.datetime = evac.STORM_END_LOCAL
    buffer_m: float = evac.BUFFER_M
    min_coverage: float = evac.MIN_COVERAGE
    min_buffer_nights: int = 3
    min_stop_dist_m: float = evac.MIN_STOP_DIST_M
    predictors: tuple = ALL_PREDICTORS
    vif_threshold: float = model.VIF_THRESHOLD
    cv_folds: int = model.CV_FOLDS
    seed: int = 0
    threads: int = 1
    synth: dict = field(default_factory=dict)

    def path(self, key: str) -> Path | None:
        value = getattr(self, key) or DEFAULT_INPUTS.get(key)
        if not value:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    @property
    def out(self) -> Path:
        p = Path(self.output_dir)
        return p if p.is_absolute() else self.base_dir / p

    def parameters(self) -> dict:
        """Every parameter as a JSON-ready mapping (paths excluded)."""
        skip = {"base_dir", "output_dir", "synth", *INPUT_KEYS}
        out = {}
        for f in fields(self):
            if f.name in skip:
                continue
            v = getattr(self, f.name)
            if isinstance(v, dt.datetime):
                v = v.isoformat(timespec="minutes")
            elif isinstance(v, tuple):
                v = list(v)
            out[f.name] = v
        return out

    def validate(self) -> None:
        checks = [
            (-12 <= self.tz_offset_h <= 14, "tz_offset_h must lie in [-12, 14]"),
            (self.max_accuracy_m > 0, "max_accuracy_m must be positive"),
            (self.min_points >= 1, "min_points must be >= 1"),
            (self.min_day_pings >= 1, "min_day_pings must be >= 1"),
            (self.chunk_rows >= 1, "chunk_rows must be >= 1"),
            (0 <= self.night_start_h < 24 and 0 <= self.night_end_h < 24
             and self.night_start_h != self.night_end_h, "invalid night window hours"),
            (self.max_gap_s > 0, "max_gap_s must be positive"),
            (self.min_nights >= 1, "min_nights must be >= 1"),
            (self.min_active_days >= 0, "min_active_days must be >= 0"),
            (self.min_weekend_s >= 0, "min_weekend_s must be >= 0"),
            (self.storm_end > self.storm_start, "storm_end must follow storm_start"),
            (self.buffer_m >= 0, "buffer_m must be >= 0"),
            (0 <= self.min_coverage <= 1, "min_coverage must lie in [0, 1]"),
            (self.min_buffer_nights >= 1, "min_buffer_nights must be >= 1"),
            (self.min_stop_dist_m >= 0, "min_stop_dist_m must be >= 0"),
            (self.vif_threshold > 1, "vif_threshold must exceed 1"),
            (self.cv_folds >= 2, "cv_folds must be >= 2"),
            (self.threads >= 1, "threads must be >= 1"),
            ((self.grid_anchor_lat is None) == (self.grid_anchor_lon is None),
             "grid_anchor_lat and grid_anchor_lon must be given together"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        unknown = sorted(set(self.predictors) - set(ALL_PREDICTORS))
        if unknown:
            raise ConfigError(f"unknown predictor(s): {', '.join(unknown)}")
        if not self.predictors:
            raise ConfigError("predictors must not be empty")

    def require_inputs(self, keys) -> None:
        for k in keys:
            p = self.path(k)
            if p is None:
                raise ConfigError(f"config key {k!r} is required for this stage")
            if not p.is_file():
                raise ConfigError(f"{k} file not found: {p}")


def _parse_datetime(s: str) -> dt.datetime:
    return dt.datetime.fromisoformat(s.strip())


def _convert(name: str, raw: str):
    ftype = {f.name: f for f in fields(RunConfig)}[name].type
    raw = raw.strip()
    if name == "predictors":
        if raw.lower() == "all":
            return ALL_PREDICTORS
        return tuple(sorted({p.strip() for p in raw.split(",") if p.strip()}))
    if name in ("storm_start", "storm_end"):
        return _parse_datetime(raw)
    if name in ("grid_anchor_lat", "grid_anchor_lon"):
        return None if raw.lower() in ("", "auto", "none") else float(raw)
    if ftype in ("int",):
        return int(raw)
    if ftype in ("float",):
        return float(raw)
    return raw


def parse_config_text(text: str, base_dir: Path | str = ".") -> RunConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment.

    Keys prefixed ``synth_`` are collected for the scenario generator.
    """
    parser = configparser.ConfigParser(delimiters=("=",), comment_prefixes=("#",),
                                       inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = RunConfig(base_dir=Path(base_dir))
    known = {f.name for f in fields(RunConfig)} - {"base_dir", "synth"}
    for key, raw in parser["run"].items():
        if key.startswith("synth_"):
            cfg.synth[key[len("synth_"):]] = raw.strip()
            continue
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            setattr(cfg, key, _convert(key, raw))
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from None
    cfg.validate()
    return cfg


def load_config(path: Path | str) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, path.parent)


def render_config(values: dict) -> str:
    lines = []
    for k, v in values.items():
        if isinstance(v, (list, tuple)):
            v = ", ".join(map(str, v))
        lines.append(f"{k} = {v}")
    return "\n".join(lines) + "\n"
