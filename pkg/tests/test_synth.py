import json
import math

import numpy as np
import pytest

from evacflow import evac, homes, ingest, model, synth
from evacflow.od import DISTANCE, SVI_VARIABLES, DesignRow, read_od_csv

from conftest import run_library_pipeline

PLANTED = sorted(synth.PLANTED_COEFFICIENTS)


def test_same_seed_same_scenario():
    a = synth.gen_scenario(seed=4, n_devices=60)
    b = synth.gen_scenario(seed=4, n_devices=60)
    assert a.fingerprint() == b.fingerprint()
    assert a.fingerprint() != synth.gen_scenario(seed=5, n_devices=60).fingerprint()
    pa, pb = synth.emit_pings(a), synth.emit_pings(b)
    for col in ("code", "ts", "lat", "lon", "accuracy"):
        assert np.array_equal(getattr(pa, col), getattr(pb, col))
    assert list(pa.device_ids) == list(pb.device_ids)


def test_zero_compliance_no_planted_evacuees():
    s = synth.gen_scenario(seed=2, n_devices=120, compliance_rate=0.0, shadow_rate=0.0)
    assert s.expected_destinations() == []
    assert s.expected_od() == []


def test_attribute_ranges():
    s = synth.flow_scenario(1)
    for a in s.attributes.values():
        values = a.values()
        for name, cap in synth.ATTRIBUTE_MAX.items():
            assert 0 <= values[name] <= cap, name
        for name in SVI_VARIABLES:
            if name.startswith("EP_"):
                assert 0 <= values[name] <= 100
    rows = synth.emit_flows_from_model(s, sigma=0.1)
    d = [r.predictors[DISTANCE] for r in rows]
    assert min(d) >= 0 and max(d) <= synth.DISTANCE_MAX_M


def test_zero_noise_homes_and_classes():
    s = synth.gen_scenario(seed=8, n_devices=150)
    out = run_library_pipeline(s, synth.emit_pings(s))
    for d in s.devices:
        if d.kind == "sparse":
            assert d.device_id not in out.trajectories, d.device_id
        if d.kind != "resident":
            assert d.device_id not in out.homes, d.device_id
            continue
        assert out.homes[d.device_id].home_cell == d.home_cell
        rec = out.records[d.device_id]
        assert rec.residence_class.value == d.residence_class
        assert rec.excluded == d.excluded
    assert {d.kind for d in s.devices} == {"resident", "nonresident", "sparse"}
    assert any(d.kind == "nonresident" and d.device_id in out.trajectories for d in s.devices)
    buffer_evacuees = [d for d in s.residents()
                       if d.residence_class == "buffer" and d.evacuee and not d.excluded]
    assert buffer_evacuees
    for d in buffer_evacuees:
        assert out.records[d.device_id].is_evacuee
    assert any(d.excluded for d in s.residents())


def _fit(s, **kw):
    rows = synth.emit_flows_from_model(s, **kw)
    rows = [DesignRow(r.origin_tract, r.dest_tract, r.response,
                      {k: r.predictors[k] for k in PLANTED}) for r in rows]
    return model.fit_demand_model(rows)


def test_noiseless_unrounded_recovery_exact():
    s = synth.flow_scenario(3)
    fit = _fit(s, sigma=0.0, n=800, rounded=False)
    assert fit.model.intercept == pytest.approx(synth.PLANTED_LN_PHI, abs=1e-6)
    for name, v in synth.PLANTED_COEFFICIENTS.items():
        assert fit.model.coefficients[name] == pytest.approx(v, abs=1e-6)


def test_phi_only_moves_intercept():
    s = synth.flow_scenario(3)
    a = _fit(s, sigma=0.2, n=800, rounded=False, seed=1)
    b = _fit(s, sigma=0.2, n=800, rounded=False, seed=1, ln_phi=synth.PLANTED_LN_PHI + math.log(2))
    assert b.model.intercept - a.model.intercept == pytest.approx(math.log(2), abs=1e-9)
    for name in PLANTED:
        assert b.model.coefficients[name] == pytest.approx(a.model.coefficients[name], abs=1e-9)


def test_recovery_error_shrinks_with_n():
    s = synth.flow_scenario(0)
    errs = []
    for n in (300, 1200, 5000):
        e = []
        for seed in range(8):
            fit = _fit(s, sigma=0.3, n=n, rounded=False, seed=seed)
            e.append(max(abs(fit.model.coefficients[k] - v)
                         for k, v in synth.PLANTED_COEFFICIENTS.items()))
        errs.append(np.mean(e))
    assert errs[0] > errs[1] > errs[2]


def test_config_validation():
    with pytest.raises(ValueError, match="compliance_rate"):
        synth.gen_scenario(compliance_rate=1.5)
    with pytest.raises(ValueError, match="zone_cols"):
        synth.gen_scenario(tract_cols=2, zone_cols=2)
    with pytest.raises(ValueError, match="FIPS"):
        synth.gen_scenario(counties=("123",))
    with pytest.raises(KeyError, match="bogus"):
        synth.ScenarioConfig.from_mapping({"bogus": 1})
    cfg = synth.ScenarioConfig.from_mapping({"seed": "3", "noise_m": "2.5",
                                             "counties": "12071, 12015"})
    assert (cfg.seed, cfg.noise_m, cfg.counties) == (3, 2.5, ("12071", "12015"))


def test_too_many_pairs_requested():
    s = synth.gen_scenario(seed=0, n_devices=0)
    with pytest.raises(ValueError, match="pairs"):
        synth.emit_flows_from_model(s, n=10_000)


def test_write_scenario(tmp_path):
    s = synth.gen_scenario(seed=6, n_devices=40)
    paths = synth.write_scenario(s, tmp_path)
    assert all(p.is_file() for p in paths.values())
    assert read_od_csv(paths["planted_od"]) == s.expected_od()
    planted = json.loads(paths["planted"].read_text())
    assert len(planted["devices"]) == 40
    res = ingest.ingest(paths["pings"])
    assert {t.device_id for t in res.trajectories} <= {d.device_id for d in s.devices}


def test_buffer_geometry_consistent():
    s = synth.gen_scenario(seed=12, n_devices=200)
    zm = s.zone_map
    res = s.residents()
    got = zm.classify([d.home_point.lat for d in res], [d.home_point.lon for d in res])
    assert list(got) == [d.residence_class for d in res]
    assert {d.residence_class for d in res} == {"in_zone", "buffer", "outside"}
    assert evac.BUFFER_M == 7500
    assert homes.MIN_NIGHTS == 5
