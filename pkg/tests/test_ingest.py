import datetime as dt
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evacflow.geo import GeoPoint
from evacflow.ingest import (FIELDS, Ping, PingTable, SchemaError, Trajectory,
                             build_trajectories, ingest, parse_pings, quality_filter,
                             quality_filter_table, trajectories_to_table, write_pings_csv)

HEADER = ",".join(FIELDS) + "\n"
T0 = 1_662_004_800  # 2022-09-01 04:00 UTC = local midnight at UTC-4


def csv_text(rows):
    return HEADER + "".join(",".join(map(str, r)) + "\n" for r in rows)


def test_parse_three_rows():
    text = csv_text([("a", T0, 26.5, -82.0, 5), ("b", T0 + 1, 26.6, -82.1, 10.5),
                     ("a", T0 + 2, 26.7, -82.2, 0)])
    reader = parse_pings(io.StringIO(text))
    pings = list(reader)
    assert len(pings) == 3
    assert pings[1] == Ping("b", GeoPoint(26.6, -82.1), float(T0 + 1), 10.5)
    assert reader.rows_read == 3 and reader.rows_skipped == 0


def test_parse_skips_malformed_rows():
    text = csv_text([("a", T0, "north", -82.0, 5), ("a", T0 + 1, 26.6, -82.1, 10),
                     ("a", "yesterday", 26.6, -82.1, 10), ("a", T0 + 3, 95.0, -82.1, 10),
                     ("a", T0 + 4, 26.6, -82.1)])
    reader = parse_pings(io.StringIO(text))
    pings = list(reader)
    assert [p.ts for p in pings] == [T0 + 1]
    assert reader.rows_read == 5 and reader.rows_skipped == 4


def test_parse_single_bad_latitude_counts_one():
    reader = parse_pings(io.StringIO(csv_text([("a", T0, "x", -82, 5)])))
    assert list(reader) == []
    assert reader.rows_skipped == 1


def test_parse_empty_file_with_header():
    reader = parse_pings(io.StringIO(HEADER))
    assert list(reader) == []
    assert reader.rows_read == 0


def test_parse_missing_column():
    with pytest.raises(SchemaError):
        list(parse_pings(io.StringIO("device_id,timestamp,latitude\n1,2,3\n")))


def test_parse_unreadable_source(tmp_path):
    with pytest.raises(OSError):
        list(parse_pings(tmp_path / "missing.csv"))


def test_parse_schema_mapping_and_rfc3339():
    text = ("uid,time,lat,lng,err,extra\n"
            "u1,2022-09-22T20:00:00-04:00,26.5,-82.0,3,x\n"
            "u1,2022-09-23T00:00:01Z,26.5,-82.0,3,y\n")
    schema = {"device_id": "uid", "timestamp": "time", "latitude": "lat",
              "longitude": "lng", "horizontal_accuracy": "err"}
    pings = list(parse_pings(io.StringIO(text), schema))
    expect = dt.datetime(2022, 9, 23, 0, 0, tzinfo=dt.timezone.utc).timestamp()
    assert pings[0].ts == expect
    assert pings[1].ts == expect + 1


def test_parse_binary_stream_and_path(tmp_path):
    text = csv_text([("a", T0, 26.5, -82.0, 5)])
    assert len(list(parse_pings(io.BytesIO(text.encode())))) == 1
    p = tmp_path / "p.csv"
    p.write_text(text)
    assert len(list(parse_pings(p))) == 1


def test_chunking_and_workers_do_not_change_result():
    rng = np.random.default_rng(0)
    rows = [(f"d{rng.integers(5)}", T0 + int(rng.integers(0, 10**6)),
             round(26 + rng.random(), 6), round(-82 + rng.random(), 6),
             round(float(rng.uniform(0, 80)), 1)) for _ in range(500)]
    rows[17] = ("d1", T0, "bad", -82, 3)
    text = csv_text(rows)
    base = parse_pings(io.StringIO(text)).read_table()
    for chunk_rows, workers in ((7, 1), (7, 4), (100, 3), (1, 2)):
        r = parse_pings(io.StringIO(text), chunk_rows=chunk_rows, workers=workers)
        t = r.read_table()
        assert r.rows_skipped == 1
        assert list(t) == list(base)


def test_quality_filter_accuracy_boundary():
    pts = [Ping("a", GeoPoint(26, -82), T0, 50.0), Ping("a", GeoPoint(26, -82), T0 + 1, 50.1)]
    kept = list(quality_filter(pts))
    assert [p.accuracy_m for p in kept] == [50.0]


def test_quality_filter_removes_exact_duplicates():
    p = Ping("a", GeoPoint(26, -82), T0, 5.0)
    q = Ping("a", GeoPoint(26, -82), T0, 7.0)  # same device, ts and point
    r = Ping("b", GeoPoint(26, -82), T0, 5.0)  # other device
    assert list(quality_filter([p, p, q, r])) == [p, r]


ping_st = st.builds(
    Ping, st.sampled_from(["a", "b", "c"]),
    st.builds(GeoPoint, st.sampled_from([26.0, 26.5]), st.sampled_from([-82.0, -81.5])),
    st.integers(0, 5).map(float), st.sampled_from([0.0, 10.0, 50.0, 50.1, 99.0]))


@settings(max_examples=150)
@given(st.lists(ping_st, max_size=40))
def test_table_filter_matches_streaming_filter(pings):
    stream = list(quality_filter(pings))
    table, stats = quality_filter_table(PingTable.from_pings(pings))
    assert list(table) == stream
    assert stats.accuracy_dropped + stats.duplicates_removed + len(stream) == len(pings)


def device_rows(device, n, start=T0, step=600.0):
    return [Ping(device, GeoPoint(26.5, -82.0), start + k * step, 5.0) for k in range(n)]


def test_min_points_boundary():
    pings = device_rows("short", 149) + device_rows("ok", 150)
    trajs = build_trajectories(pings)
    assert [t.device_id for t in trajs] == ["ok"]
    assert len(trajs[0]) == 150


def test_active_days_need_ten_pings():
    first = [Ping("a", GeoPoint(26.5, -82), T0 + 3600 + k, 1.0) for k in range(12)]
    second = [Ping("a", GeoPoint(26.5, -82), T0 + 86400 + 3600 + k, 1.0) for k in range(3)]
    traj = build_trajectories(first + second, min_points=1)[0]
    assert traj.active_days == frozenset({dt.date(2022, 9, 1)})


def test_active_days_use_local_offset():
    # 02:00 UTC on Sept 2 is 22:00 local on Sept 1.
    ts = dt.datetime(2022, 9, 2, 2, tzinfo=dt.timezone.utc).timestamp()
    traj = Trajectory.from_arrays("a", [ts] * 10, [26.0] * 10, [-82.0] * 10)
    assert traj.active_days == frozenset({dt.date(2022, 9, 1)})
    traj_utc = Trajectory.from_arrays("a", [ts] * 10, [26.0] * 10, [-82.0] * 10, tz_offset_h=0)
    assert traj_utc.active_days == frozenset({dt.date(2022, 9, 2)})


def test_trajectory_order_and_stable_ties():
    pings = [Ping("a", GeoPoint(26.0, -82.0), 30.0, 1), Ping("a", GeoPoint(26.1, -82.0), 10.0, 1),
             Ping("a", GeoPoint(26.2, -82.0), 10.0, 1), Ping("a", GeoPoint(26.3, -82.0), 20.0, 1)]
    traj = build_trajectories(pings, min_points=1)[0]
    assert traj.ts.tolist() == [10.0, 10.0, 20.0, 30.0]
    assert traj.lat.tolist() == [26.1, 26.2, 26.3, 26.0]


def test_trajectory_window_recomputes_active_days():
    traj = build_trajectories(device_rows("a", 300, step=1800.0), min_points=1)[0]
    w = traj.window(T0, T0 + 86400)
    assert len(w) == 48
    assert w.active_days == frozenset({dt.date(2022, 9, 1)})
    assert len(traj.active_days) == 7


def test_trajectory_is_immutable():
    traj = build_trajectories(device_rows("a", 5), min_points=1)[0]
    with pytest.raises(ValueError):
        traj.ts[0] = 0


def test_build_trajectories_order_independent_of_workers():
    rng = np.random.default_rng(1)
    pings = []
    for d in range(40):
        pings += device_rows(f"dev{d:03d}", int(rng.integers(100, 200)),
                             start=T0 + float(rng.integers(0, 1000)))
    rng.shuffle(pings)
    a = build_trajectories(pings, workers=1)
    b = build_trajectories(pings, workers=4)
    assert [t.device_id for t in a] == sorted(t.device_id for t in a)
    assert [t.device_id for t in a] == [t.device_id for t in b]
    for x, y in zip(a, b):
        assert np.array_equal(x.ts, y.ts) and np.array_equal(x.lat, y.lat)
        assert np.all(np.diff(x.ts) >= 0)


row_st = st.tuples(st.sampled_from(["a", "b", "c", "d"]), st.integers(0, 3000),
                   st.sampled_from(["26.5", "26.6", "oops"]), st.just("-82.0"),
                   st.sampled_from(["1", "50", "50.5"]))


@settings(max_examples=60, deadline=None)
@given(st.lists(row_st, max_size=300), st.integers(1, 300))
def test_row_conservation(rows, min_points):
    text = csv_text(rows)
    res = ingest(io.StringIO(text), min_points=min_points, chunk_rows=37)
    s = res.stats
    assert s.rows_read == len(rows)
    assert (s.pings_retained + s.pings_dropped_min_points + s.accuracy_dropped
            + s.duplicates_removed + s.rows_skipped) == len(rows)
    for t in res.trajectories:
        assert len(t) >= min_points
        assert np.all(np.diff(t.ts) >= 0)
        keys = set(zip(t.ts.tolist(), t.lat.tolist(), t.lon.tolist()))
        assert len(keys) == len(t)


def test_write_read_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    n = 1000
    table = PingTable(np.array(["x", "y", "w"], dtype=object),
                      rng.integers(0, 3, n), np.sort(rng.integers(T0, T0 + 10**6, n)).astype(float),
                      rng.uniform(25, 27, n), rng.uniform(-83, -81, n), rng.uniform(0, 60, n))
    path = tmp_path / "p.csv"
    write_pings_csv(path, table)
    assert path.read_text().splitlines()[0] == ",".join(FIELDS)
    back = parse_pings(path).read_table()
    assert list(back) == list(table)


def test_ingest_accepts_table_and_file_equally(tmp_path):
    rng = np.random.default_rng(3)
    pings = []
    for d in range(5):
        pings += device_rows(f"d{d}", 160 + 10 * d, start=T0 + d)
    table = PingTable.from_pings(pings)
    path = tmp_path / "p.csv"
    write_pings_csv(path, table)
    a = ingest(table)
    b = ingest(path, workers=2, chunk_rows=100)
    assert [t.device_id for t in a.trajectories] == [t.device_id for t in b.trajectories]
    assert list(trajectories_to_table(a.trajectories)) == list(trajectories_to_table(b.trajectories))
    assert b.stats.devices_retained == 5
