"""Staged command-line pipeline.

    evacflow <stage> --config <file> [--threads N] [--seed S] [--dry-run]

Each stage reads its predecessor's files from ``output_dir`` and writes its
own artifacts plus a ``<stage>.manifest.json``. Exit codes: 1 bad config,
2 missing prerequisite artifact, 3 data validation failure.
"""
from __future__ import annotations

import argparse
import csv
import datetime as dt
import hashlib
import json
import logging
import sys
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, evac, homes, ingest, model, od, synth
from .clock import NightWindow
from .config import DEFAULT_INPUTS, ConfigError, RunConfig, load_config, render_config
from .geo import GeoPoint, Grid, PolygonIndex, read_polygons

logger = logging.getLogger("evacflow")

STAGES = ("ingest", "homes", "evacuees", "destinations", "od", "fit", "cv", "synth", "all")
PIPELINE = ("ingest", "homes", "evacuees", "destinations", "od", "fit", "cv")
EXIT_CONFIG, EXIT_MISSING, EXIT_DATA = 1, 2, 3

# Files each stage needs from earlier stages, and config inputs it reads.
PREREQUISITES = {
    "ingest": (), "homes": ("clean_pings.csv",),
    "evacuees": ("clean_pings.csv", "homes.csv"),
    "destinations": ("clean_pings.csv", "homes.csv", "evacuees.csv"),
    "od": ("destinations.csv", "evacuees.csv"),
    "fit": ("design.csv",), "cv": ("design.csv", "model.json"), "synth": (),
}
INPUTS = {
    "ingest": ("pings",), "homes": ("tracts",), "evacuees": ("tracts", "zones"),
    "destinations": ("tracts",), "od": ("attributes",), "fit": (), "cv": (), "synth": (),
}


class MissingArtifact(RuntimeError):
    pass


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n",
                    encoding="utf-8")


class Stage:
    """Bookkeeping for one stage run: inputs, outputs, counts, manifest."""

    def __init__(self, name: str, cfg: RunConfig):
        self.name, self.cfg = name, cfg
        self.inputs: dict[str, Path] = {}
        self.outputs: dict[str, Path] = {}
        self.counts: dict = {}
        self.t0 = time.perf_counter()
        self.started = dt.datetime.now(dt.timezone.utc)

    def artifact(self, filename: str) -> Path:
        p = self.cfg.out / filename
        if not p.is_file():
            raise MissingArtifact(f"{self.name}: required artifact {p} is missing; "
                                  f"run the earlier stage first")
        self.inputs[filename] = p
        return p

    def input(self, key: str) -> Path:
        p = self.cfg.path(key)
        self.inputs[key] = p
        return p

    def output(self, filename: str) -> Path:
        self.cfg.out.mkdir(parents=True, exist_ok=True)
        p = self.cfg.out / filename
        self.outputs[filename] = p
        return p

    def finish(self) -> Path:
        manifest = {
            "stage": self.name, "version": __version__,
            "inputs": {k: {"path": str(p), "sha256": sha256_file(p)}
                       for k, p in sorted(self.inputs.items())},
            "outputs": {k: {"path": str(p), "sha256": sha256_file(p)}
                        for k, p in sorted(self.outputs.items())},
            "parameters": self.cfg.parameters(),
            "counts": self.counts,
            "started_utc": self.started.isoformat(timespec="seconds"),
            "wall_time_s": round(time.perf_counter() - self.t0, 3),
        }
        path = self.cfg.out / f"{self.name}.manifest.json"
        _dump_json(path, manifest)
        return path


def _grid(cfg: RunConfig, tracts) -> Grid:
    if cfg.grid_anchor_lat is not None:
        return Grid(GeoPoint(cfg.grid_anchor_lat, cfg.grid_anchor_lon))
    boxes = np.array([t.bbox for t in tracts])
    return Grid(GeoPoint(float(boxes[:, 0].min()), float(boxes[:, 1].min())))


def _night_window(cfg: RunConfig) -> NightWindow:
    return NightWindow(cfg.night_start_h, cfg.night_end_h)


def _storm(cfg: RunConfig) -> evac.StormWindow:
    return evac.StormWindow.local(cfg.storm_start, cfg.storm_end, cfg.tz_offset_h)


def _trajectories(st: Stage) -> dict[str, ingest.Trajectory]:
    cfg = st.cfg
    res = ingest.ingest(st.artifact("clean_pings.csv"), max_accuracy_m=cfg.max_accuracy_m,
                        min_points=cfg.min_points, tz_offset_h=cfg.tz_offset_h,
                        min_day_pings=cfg.min_day_pings, workers=cfg.threads,
                        chunk_rows=cfg.chunk_rows)
    return {t.device_id: t for t in res.trajectories}


def _tracts(st: Stage):
    return read_polygons(st.input("tracts"), st.cfg.tract_id_field)


def run_ingest(st: Stage) -> None:
    cfg = st.cfg
    res = ingest.ingest(st.input("pings"), max_accuracy_m=cfg.max_accuracy_m,
                        min_points=cfg.min_points, tz_offset_h=cfg.tz_offset_h,
                        min_day_pings=cfg.min_day_pings, workers=cfg.threads,
                        chunk_rows=cfg.chunk_rows)
    ingest.write_pings_csv(st.output("clean_pings.csv"), ingest.trajectories_to_table(res.trajectories))
    st.counts = res.stats.as_dict()


def run_homes(st: Stage) -> None:
    cfg = st.cfg
    tracts = _tracts(st)
    trajs = _trajectories(st)
    found = homes.detect_homes(trajs.values(), _grid(cfg, tracts), _night_window(cfg),
                               cfg.max_gap_s, cfg.min_nights, cfg.min_active_days,
                               cfg.min_weekend_s, before=_storm(cfg).start,
                               workers=cfg.threads)
    found = homes.assign_home_tracts(found, PolygonIndex(tracts))
    homes.write_homes_csv(st.output("homes.csv"), found)
    basis = Counter(h.basis.value for h in found)
    st.counts = {"devices": len(trajs), "residents": len(found),
                 "non_residents": len(trajs) - len(found),
                 "night_rule": basis.get("night_rule", 0),
                 "weekend_fallback": basis.get("weekend_fallback", 0),
                 "homes_outside_tracts": sum(h.home_tract_id is None for h in found)}


def _map(cfg: RunConfig, fn, items):
    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def run_evacuees(st: Stage) -> None:
    cfg = st.cfg
    grid = _grid(cfg, _tracts(st))
    zones = evac.EvacZoneMap(read_polygons(st.input("zones"), cfg.zone_id_field), cfg.buffer_m)
    trajs = _trajectories(st)
    residents = homes.read_homes_csv(st.artifact("homes.csv"), grid)
    storm, nw = _storm(cfg), _night_window(cfg)
    nights = storm.nights(nw, cfg.tz_offset_h)
    classes = zones.classify([h.home_point.lat for h in residents],
                             [h.home_point.lon for h in residents]) if residents else []

    def one(args):
        h, cls = args
        traj = trajs.get(h.device_id)
        if traj is None:
            raise ValueError(f"home for unknown device {h.device_id}")
        stays = (evac.nightly_stays(traj, grid, storm, nw, cfg.max_gap_s)
                 if cls != evac.ResidenceClass.OUTSIDE.value else [])
        return evac.classify_evacuee(h, stays, cls, cfg.min_coverage, nights,
                                     cfg.min_buffer_nights)

    records = _map(cfg, one, list(zip(residents, classes)))
    kept = [r for r in records if not r.excluded]
    evac.write_evacuees_csv(st.output("evacuees.csv"), kept)
    by_class = Counter(r.residence_class.value for r in records)
    evacuees = Counter(r.residence_class.value for r in kept if r.is_evacuee)
    st.counts = {
        "residents": len(records), "excluded_low_coverage": len(records) - len(kept),
        "evacuees": sum(evacuees.values()),
        **{f"residents_{c.value}": by_class.get(c.value, 0) for c in evac.ResidenceClass},
        **{f"evacuees_{c.value}": evacuees.get(c.value, 0) for c in evac.ResidenceClass},
    }


def _destination_point(rec: evac.StopRecord):
    best = None
    for s in rec.stops:
        if s.tract_id == rec.destination_tract_id and (best is None or len(s.nights) > len(best.nights)):
            best = s
    return None if best is None else best.point


def destination_shares(pairs: list[tuple[str, str]]) -> list[tuple[str, int, float]]:
    """Share of evacuees by destination scope and by destination county.

    County codes are the first five characters of the tract id.
    """
    n = len(pairs)
    rows = []
    same_tract = sum(o == d for o, d in pairs)
    same_county = sum(o[:5] == d[:5] for o, d in pairs)
    for name, k in (("same_tract", same_tract), ("same_county", same_county),
                    ("other_county", n - same_county)):
        rows.append((name, k, k / n if n else float("nan")))
    for county, k in sorted(Counter(d[:5] for _, d in pairs).items()):
        rows.append((f"county:{county}", k, k / n))
    return rows


def run_destinations(st: Stage) -> None:
    cfg = st.cfg
    tracts = _tracts(st)
    grid = _grid(cfg, tracts)
    index = PolygonIndex(tracts)
    trajs = _trajectories(st)
    by_id = {h.device_id: h for h in homes.read_homes_csv(st.artifact("homes.csv"), grid)}
    evacuees = [r for r in evac.read_evacuees_csv(st.artifact("evacuees.csv")) if r.is_evacuee]
    storm, nw = _storm(cfg), _night_window(cfg)

    def one(r):
        h = by_id.get(r.device_id)
        if h is None or r.device_id not in trajs:
            raise ValueError(f"evacuee {r.device_id} has no home or trajectory")
        return evac.infer_stops(trajs[r.device_id], h, grid, index, storm, nw,
                                cfg.min_stop_dist_m, cfg.max_gap_s)

    records = _map(cfg, one, evacuees)
    evac.write_destinations_csv(st.output("destinations.csv"), records)
    pairs = [(by_id[r.device_id].home_tract_id, r.destination_tract_id) for r in records
             if r.destination_tract_id and by_id[r.device_id].home_tract_id]
    with open(st.output("destination_shares.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["category", "evacuees", "share"])
        for name, k, share in destination_shares(pairs):
            w.writerow([name, k, repr(share)])
    st.counts = {"evacuees": len(records),
                 "with_destination": sum(not r.no_destination for r in records),
                 "no_destination": sum(r.no_destination for r in records)}

    parcels_path = cfg.path("parcels")
    if parcels_path is not None and parcels_path.is_file():
        parcels = read_polygons(st.input("parcels"), cfg.parcel_id_field)
        points = [(r.device_id, "home", by_id[r.device_id].home_point) for r in records]
        points += [(r.device_id, "destination", p) for r in records
                   if (p := _destination_point(r)) is not None]
        summary = evac.landuse_validate(points, parcels, cfg.landuse_field, cfg.residential_code)
        evac.write_landuse_csv(st.output("landuse_validation.csv"), summary)
        for role, s in summary.items():
            st.counts[f"landuse_{role}_residential_share"] = s.residential_share


def run_od(st: Stage) -> None:
    cfg = st.cfg
    home_tract = {r.device_id: r.home_tract_id
                  for r in evac.read_evacuees_csv(st.artifact("evacuees.csv"))}
    dests = evac.read_destinations_csv(st.artifact("destinations.csv"))
    usable = [(d, home_tract.get(d), t) for d, t, _ in dests if t and home_tract.get(d)]
    flows = od.aggregate_flows(usable)
    attrs = od.read_tract_attributes(st.input("attributes"))
    rows = od.join_attributes(flows, attrs)
    od.write_od_csv(st.output("od.csv"), flows)
    st.output("od.txt").write_text(od.format_od_text(flows), encoding="utf-8")
    od.write_design_csv(st.output("design.csv"), rows)
    st.counts = {"destinations": len(dests), "evacuees_in_od": len(usable),
                 "od_pairs": len(flows), "dropped_missing_tract": len(dests) - len(usable)}


def _design(st: Stage) -> model.DesignMatrix:
    rows = od.read_design_csv(st.artifact("design.csv"))
    if not rows:
        raise ValueError("design table is empty")
    wanted = set(st.cfg.predictors)
    rows = [od.DesignRow(r.origin_tract, r.dest_tract, r.response,
                         {k: v for k, v in r.predictors.items() if k in wanted}) for r in rows]
    return model.build_design(rows)


def _write_report(st: Stage, fit: model.DemandFit, cv: model.CvReport | None) -> None:
    st.output("model_report.txt").write_text(model.format_report(fit.model, cv), encoding="utf-8")


def run_fit(st: Stage) -> None:
    design = _design(st)
    fit = model.fit_demand_model(design, st.cfg.vif_threshold)
    _dump_json(st.output("model.json"), model.report_dict(fit))
    _write_report(st, fit, None)
    st.counts = {"n_obs": fit.model.n_obs, "candidate_predictors": len(design.names),
                 "retained_predictors": len(fit.model.names),
                 "vif_removed": len(fit.screen.removed),
                 "dropped_constant": len(design.dropped)}


def run_cv(st: Stage) -> None:
    cfg = st.cfg
    design = _design(st)
    saved = json.loads(st.artifact("model.json").read_text(encoding="utf-8"))
    names = saved["model"]["names"]
    fit = model.fit_demand_model(design, cfg.vif_threshold)
    if list(fit.model.names) != names:
        raise ValueError("model.json does not match the current design; rerun the fit stage")
    report = model.cross_validate(fit.design, cfg.cv_folds, cfg.seed, workers=cfg.threads)
    _dump_json(st.output("cv.json"), report.to_dict())
    _write_report(st, fit, report)
    st.counts = {"k": report.k, "n_obs": design.n_obs,
                 "mean_out_of_sample": report.mean_out_of_sample._asdict(),
                 "mean_in_sample": report.mean_in_sample._asdict()}


RUNNERS = {"ingest": run_ingest, "homes": run_homes, "evacuees": run_evacuees,
           "destinations": run_destinations, "od": run_od, "fit": run_fit, "cv": run_cv}


def run_synth(config_path: Path, cfg: RunConfig, seed: int | None, dry_run: bool) -> int:
    params = dict(cfg.synth)
    if seed is not None:
        params["seed"] = seed
    try:
        scfg = synth.ScenarioConfig.from_mapping(params)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad synth parameters: {exc}") from None
    targets = {k: cfg.path(k) for k in ("pings", "tracts", "attributes", "zones", "parcels")}
    if dry_run:
        print(f"synth: would write scenario seed={scfg.seed} to "
              f"{', '.join(str(p) for p in targets.values())}")
        return 0
    st = Stage("synth", cfg)
    s = synth.gen_scenario(scfg)
    paths = synth.write_scenario(s, targets["pings"].parent)
    for key, target in targets.items():
        if paths[key] != target:
            target.parent.mkdir(parents=True, exist_ok=True)
            paths[key].replace(target)
            paths[key] = target
    for key, p in paths.items():
        st.outputs[p.name] = p
    st.counts = {"devices": len(s.devices), "tracts": len(s.tracts),
                 "planted_evacuees": len(s.expected_destinations()),
                 "planted_od_pairs": len(s.expected_od())}
    if not config_path.exists():
        config_path.write_text(render_config({
            "output_dir": cfg.output_dir, **{k: str(DEFAULT_INPUTS[k]) for k in targets},
            "predictors": sorted(s.coefficients), "seed": scfg.seed,
            "synth_seed": scfg.seed,
        }), encoding="utf-8")
        print(f"synth: wrote config {config_path}")
    cfg.out.mkdir(parents=True, exist_ok=True)
    st.finish()
    print(f"synth: {st.counts['devices']} devices, {st.counts['planted_evacuees']} planted "
          f"evacuees -> {paths['pings'].parent}")
    return 0


def run_stage(stage: str, cfg: RunConfig, dry_run: bool = False) -> int:
    """Run one pipeline stage; raises on failure."""
    cfg.require_inputs(INPUTS[stage])
    missing = [f for f in PREREQUISITES[stage] if not (cfg.out / f).is_file()]
    if dry_run:
        if missing:
            raise MissingArtifact(f"{stage}: missing prerequisite(s) {', '.join(missing)}")
        print(f"{stage}: config valid, prerequisites present (dry run, nothing written)")
        return 0
    st = Stage(stage, cfg)
    RUNNERS[stage](st)
    st.finish()
    print(f"{stage}: " + ", ".join(f"{k}={v}" for k, v in st.counts.items()
                                   if not isinstance(v, dict)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evacflow", description=__doc__.splitlines()[0])
    p.add_argument("stage", choices=STAGES)
    p.add_argument("--config", default="evacflow.conf", help="flat key = value config file")
    p.add_argument("--threads", type=int, default=None, help="worker threads per stage")
    p.add_argument("--seed", type=int, default=None, help="random seed (cv, synth)")
    p.add_argument("--dry-run", action="store_true", help="validate without writing")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    config_path = Path(args.config)
    try:
        if args.stage == "synth" and not config_path.exists():
            cfg = RunConfig(base_dir=config_path.parent)
        else:
            cfg = load_config(config_path)
        if args.threads is not None:
            cfg.threads = args.threads
        if args.seed is not None:
            cfg.seed = args.seed
        cfg.validate()
        if args.stage == "synth":
            return run_synth(config_path, cfg, args.seed, args.dry_run)
        stages = PIPELINE if args.stage == "all" else (args.stage,)
        if args.dry_run:
            return run_stage(stages[0], cfg, dry_run=True)
        for stage in stages:
            run_stage(stage, cfg)
        return 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ValueError, KeyError, np.linalg.LinAlgError) as exc:
        print(f"error: data validation failed: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
