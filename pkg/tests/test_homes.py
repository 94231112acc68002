import datetime as dt
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evacflow.clock import NightWindow, local_to_epoch
from evacflow.geo import GeoPoint, Grid, GridCell
from evacflow.homes import (NIGHT, WEEKEND, Basis, HomeRecord, accumulate_dwell, detect_home,
                            detect_homes, read_homes_csv, write_homes_csv)
from evacflow.ingest import Trajectory

TZ = -4.0
GRID = Grid(GeoPoint(26.4, -82.1))
A, B, C = GridCell(10, 10), GridCell(200, 40), GridCell(-30, 75)
THU = dt.datetime(2022, 9, 1)  # a Thursday
SAT = dt.datetime(2022, 9, 3)


def make_traj(events, device="d"):
    """events: iterable of (local naive datetime, GridCell)."""
    events = list(events)
    ts = [local_to_epoch(t, TZ) for t, _ in events]
    lat, lon = GRID.centers([c.ix for _, c in events], [c.iy for _, c in events])
    return Trajectory.from_arrays(device, ts, lat, lon, tz_offset_h=TZ)


def every(start, end, step_min, cell):
    t = start
    while t < end:
        yield t, cell
        t += dt.timedelta(minutes=step_min)


def wandering(start, end, step_min, seed):
    """Pings that never share a cell with their neighbour."""
    rng = random.Random(seed)
    for k, (t, _) in enumerate(every(start, end, step_min, None)):
        yield t, GridCell(5000 + k, rng.randint(-9000, -5000))


def dwell_of(traj, **kw):
    return accumulate_dwell(traj, GRID, **kw)


def totals(d):
    night, weekend, nights = d.per_cell()
    cells = [GridCell(int(x), int(y)) for x, y in d.cells]
    return {c: (n, w, q, t) for c, n, w, q, t in zip(cells, night, weekend, nights, d.cell_total)}


def test_ten_minutes_same_cell_at_night():
    t = THU.replace(hour=22)
    d = dwell_of(make_traj([(t, A), (t + dt.timedelta(minutes=10), A)]))
    assert totals(d)[A][:3] == (600.0, 0.0, 1)


def test_different_cells_credit_nothing():
    t = THU.replace(hour=22)
    d = dwell_of(make_traj([(t, A), (t + dt.timedelta(minutes=10), B)]))
    assert len(d.cells) == 0 and d.seconds.sum() == 0


def test_gap_cap():
    t = THU.replace(hour=9)
    d = dwell_of(make_traj([(t, A), (t + dt.timedelta(hours=4), A)]), max_gap_s=1800)
    assert totals(d)[A] == (0.0, 0.0, 0, 1800.0)


def test_split_across_night_start():
    t = THU.replace(hour=19, minute=50)
    d = dwell_of(make_traj([(t, A), (t + dt.timedelta(minutes=20), A)]))
    night, _, _, total = totals(d)[A]
    assert total == 1200.0 and night == pytest.approx(600.0, abs=1e-9)


def test_capped_credit_split_in_proportion():
    # 19:00 -> 21:00 is worth 1800 s, half of the interval lies in the night.
    t = THU.replace(hour=19)
    d = dwell_of(make_traj([(t, A), (t + dt.timedelta(hours=2), A)]))
    assert totals(d)[A][0] == pytest.approx(900.0, abs=1e-9)


def test_weekend_and_night_overlap_counted_in_both():
    # Saturday 21:00-22:00 is night and weekend.
    t = SAT.replace(hour=21)
    d = dwell_of(make_traj([(t, A), (t + dt.timedelta(minutes=20), A)]))
    night, weekend, _, _ = totals(d)[A]
    assert night == weekend == 1200.0
    assert set(d.part.tolist()) == {NIGHT, WEEKEND}


def test_night_labelled_by_start_date():
    t = dt.datetime(2022, 9, 2, 2)  # 02:00 on Friday belongs to Thursday's night
    d = dwell_of(make_traj([(t, A), (t + dt.timedelta(minutes=10), A)]))
    assert d.day.tolist() == [(dt.date(2022, 9, 1) - dt.date(1970, 1, 1)).days]


def oracle_night_seconds(times, cells, cap, window=NightWindow()):
    """Per-night credited seconds, integrating each pair over explicit night intervals."""
    out = {}
    for (t0, c0), (t1, c1) in zip(zip(times, cells), zip(times[1:], cells[1:])):
        if c0 != c1 or t1 <= t0:
            continue
        rate = min(t1 - t0, cap) / (t1 - t0)
        tz = dt.timezone(dt.timedelta(hours=TZ))
        day = dt.datetime.fromtimestamp(t0, tz).date()
        span = (dt.datetime.fromtimestamp(t1, tz).date() - day).days
        for back in range(-1, span + 1):
            night = day + dt.timedelta(days=back)
            s = local_to_epoch(dt.datetime.combine(night, dt.time(20)), TZ)
            e = s + window.length_s
            overlap = max(0.0, min(t1, e) - max(t0, s))
            if overlap:
                out[night] = out.get(night, 0.0) + overlap * rate
    return out


@settings(max_examples=80, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4 * 86400), st.sampled_from([A, B])),
                min_size=2, max_size=60),
       st.sampled_from([600.0, 1800.0, 7200.0]))
def test_dwell_matches_interval_oracle(events, cap):
    base = local_to_epoch(THU, TZ)
    events = sorted(events, key=lambda e: e[0])
    times = [base + s for s, _ in events]
    cells = [c for _, c in events]
    lat, lon = GRID.centers([c.ix for c in cells], [c.iy for c in cells])
    traj = Trajectory.from_arrays("d", times, lat, lon, tz_offset_h=TZ, presorted=True)
    d = dwell_of(traj, max_gap_s=cap)
    assert np.all(d.seconds >= 0)
    got = {}
    night = d.part == NIGHT
    for day, s in zip(d.day[night].tolist(), d.seconds[night].tolist()):
        key = dt.date(1970, 1, 1) + dt.timedelta(days=day)
        got[key] = got.get(key, 0.0) + s
    want = oracle_night_seconds(times, cells, cap)
    assert set(got) == {k for k, v in want.items() if v > 0}
    for k, v in want.items():
        if v > 0:
            assert got[k] == pytest.approx(v, rel=1e-9, abs=1e-6)
            assert got[k] <= NightWindow().length_s + 1e-6
    pairs = sum(min(t1 - t0, cap) for t0, t1, c0, c1 in
                zip(times, times[1:], cells, cells[1:]) if c0 == c1 and t1 > t0)
    assert d.cell_total.sum() == pytest.approx(pairs, rel=1e-12, abs=1e-9)


def planted_sleeper(n_days=20, sleep_nights=10, seed=0):
    """Sleeps in A on the first ``sleep_nights`` nights, elsewhere after; weekdays in B."""
    ev = []
    rng = random.Random(seed)
    for k in range(n_days):
        day = THU + dt.timedelta(days=k)
        night_cell = A if k < sleep_nights else GridCell(rng.randint(400, 900), rng.randint(400, 900))
        ev += every(day.replace(hour=22), day + dt.timedelta(days=1, hours=6), 15, night_cell)
        if day.weekday() < 5:
            ev += every(day.replace(hour=9), day.replace(hour=17), 15, B)
    return make_traj(sorted(ev, key=lambda e: e[0]))


def test_planted_sleeper_home():
    traj = planted_sleeper()
    home = detect_home(dwell_of(traj), traj)
    assert home.home_cell == A and home.basis is Basis.NIGHT_RULE
    assert home.qualifying_nights == 10
    assert home.home_point == GRID.center(A)


def test_active_day_threshold():
    # n nights of sleep also make the morning after the last night active.
    traj = planted_sleeper(n_days=13, sleep_nights=13)
    assert len(traj.active_days) == 14
    assert detect_home(dwell_of(traj), traj) is None
    traj = planted_sleeper(n_days=14, sleep_nights=14)
    assert len(traj.active_days) == 15
    assert detect_home(dwell_of(traj), traj).home_cell == A


def weekend_device(weekend_hours):
    """No night pings; 10:00-17:00 every day, wandering except a Saturday stay in C."""
    ev = []
    for k in range(21):
        day = THU + dt.timedelta(days=k)
        ev += wandering(day.replace(hour=10), day.replace(hour=17), 10, seed=k)
    sat = SAT.replace(hour=10)
    stay_end = sat + dt.timedelta(hours=weekend_hours)
    ev = [e for e in ev if not sat <= e[0] <= stay_end]
    ev += every(sat, stay_end + dt.timedelta(seconds=1), 10, C)
    return make_traj(sorted(ev, key=lambda e: e[0]))


def test_weekend_fallback():
    traj = weekend_device(7)
    home = detect_home(dwell_of(traj), traj)
    assert home.home_cell == C and home.basis is Basis.WEEKEND_FALLBACK


def test_weekend_fallback_threshold():
    assert detect_home(dwell_of(t := weekend_device(6)), t).home_cell == C
    short = weekend_device(5.5)
    assert detect_home(dwell_of(short), short) is None


def test_too_few_nights_falls_back_to_weekend_cell():
    # A gets 4 long nights (more night dwell than C's weekend), C gets 7 weekend hours.
    ev = []
    for k in range(21):
        day = THU + dt.timedelta(days=k)
        ev += wandering(day.replace(hour=10), day.replace(hour=17), 10, seed=k)
    for k in range(4):
        day = THU + dt.timedelta(days=7 * k)
        ev += every(day.replace(hour=20), day + dt.timedelta(days=1, hours=7), 15, A)
    sat = SAT.replace(hour=10)
    ev = [e for e in ev if not sat <= e[0] <= sat + dt.timedelta(hours=7)]
    ev += every(sat, sat + dt.timedelta(hours=7, seconds=1), 10, C)
    traj = make_traj(sorted(ev, key=lambda e: e[0]))
    d = dwell_of(traj)
    assert totals(d)[A][0] > totals(d)[C][1]
    home = detect_home(d, traj)
    assert home.home_cell == C and home.basis is Basis.WEEKEND_FALLBACK


def two_cell_nights(first, second, extra_day_for=None):
    ev = []
    for k in range(20):
        day = THU + dt.timedelta(days=k)
        ev += wandering(day.replace(hour=10), day.replace(hour=17), 15, seed=k)
        cell = first if k % 2 == 0 else second
        ev += every(day.replace(hour=21), day.replace(hour=23, minute=1), 10, cell)
    if extra_day_for is not None:
        # Extra Wednesday daytime dwell (neither night nor weekend).
        wed = dt.datetime(2022, 9, 7, 17, 30)
        ev += every(wed, wed + dt.timedelta(hours=1), 10, extra_day_for)
    return make_traj(sorted(ev, key=lambda e: e[0]))


def test_tie_broken_by_total_dwell():
    traj = two_cell_nights(A, B, extra_day_for=B)
    assert detect_home(dwell_of(traj), traj).home_cell == B


def test_tie_broken_by_cell_index():
    lo, hi = GridCell(3, 900), GridCell(4, -900)
    for first, second in ((lo, hi), (hi, lo)):
        traj = two_cell_nights(first, second)
        night, weekend, _, _ = totals(dwell_of(traj))[lo]
        assert (night, weekend) == totals(dwell_of(traj))[hi][:2]
        assert detect_home(dwell_of(traj), traj).home_cell == lo


def test_detect_homes_permutation_and_workers():
    trajs = [planted_sleeper(seed=s) for s in range(6)]
    trajs = [Trajectory.from_arrays(f"dev{k}", t.ts, t.lat, t.lon, tz_offset_h=TZ)
             for k, t in enumerate(trajs)]
    trajs.append(weekend_device(7))
    trajs.append(planted_sleeper(n_days=10))
    base = detect_homes(trajs, GRID)
    for seed in range(3):
        shuffled = trajs[:]
        random.Random(seed).shuffle(shuffled)
        assert detect_homes(shuffled, GRID, workers=3) == base
    assert [h.device_id for h in base] == sorted(h.device_id for h in base)


def test_before_restricts_evidence():
    traj = planted_sleeper(n_days=20, sleep_nights=20)
    cut = local_to_epoch(THU + dt.timedelta(days=14), TZ)
    assert detect_homes([traj], GRID, before=cut) == []
    assert len(detect_homes([traj], GRID)) == 1


random_day = st.tuples(st.sampled_from([A, B, C]), st.sampled_from([A, B, C]),
                       st.integers(0, 12), st.booleans())


def schedule_traj(days):
    ev = []
    for k, (night_cell, day_cell, n_night, day_pings) in enumerate(days):
        day = THU + dt.timedelta(days=k)
        if day_pings:
            ev += every(day.replace(hour=9), day.replace(hour=12), 15, day_cell)
        ev += list(every(day.replace(hour=21), day + dt.timedelta(days=1, hours=6), 45,
                         night_cell))[:n_night]
    return make_traj(sorted(ev, key=lambda e: e[0]))


@settings(max_examples=60, deadline=None)
@given(st.lists(random_day, min_size=15, max_size=24))
def test_home_record_invariants(days):
    traj = schedule_traj(days)
    d = dwell_of(traj)
    home = detect_home(d, traj)
    if home is None:
        return
    t = totals(d)[home.home_cell]
    if home.basis is Basis.NIGHT_RULE:
        assert home.qualifying_nights >= 5
        assert t[2] == home.qualifying_nights
    else:
        assert t[1] >= 6 * 3600


@settings(max_examples=60, deadline=None)
@given(st.lists(random_day, min_size=10, max_size=24), st.data())
def test_active_day_nonresidents_stay_nonresident(days, data):
    traj = schedule_traj(days)
    if len(traj.active_days) >= 15:
        return
    keep = data.draw(st.lists(st.booleans(), min_size=len(traj), max_size=len(traj)))
    keep = np.array(keep, dtype=bool)
    sub = Trajectory.from_arrays("d", traj.ts[keep], traj.lat[keep], traj.lon[keep],
                                 tz_offset_h=TZ)
    assert detect_home(dwell_of(sub), sub) is None


@settings(max_examples=60, deadline=None)
@given(st.lists(random_day, min_size=15, max_size=24), st.integers(0, 24 * 86400))
def test_truncation_never_creates_night_rule_home(days, cut_s):
    traj = schedule_traj(days)
    _, _, nights = dwell_of(traj).per_cell()
    if len(nights) and nights.max() >= 5:
        return
    sub = traj.window(None, local_to_epoch(THU, TZ) + cut_s)
    home = detect_home(dwell_of(sub), sub)
    assert home is None or home.basis is not Basis.NIGHT_RULE


def test_removing_a_ping_can_bridge_a_pair():
    # Known limit of ping-removal monotonicity: dropping the B ping joins two A pings.
    t = THU.replace(hour=21)
    full = make_traj([(t, A), (t + dt.timedelta(minutes=10), B), (t + dt.timedelta(minutes=20), A)])
    assert len(dwell_of(full).cells) == 0
    bridged = Trajectory.from_arrays("d", full.ts[[0, 2]], full.lat[[0, 2]], full.lon[[0, 2]],
                                     tz_offset_h=TZ)
    assert totals(dwell_of(bridged))[A][:3] == (1200.0, 0.0, 1)


def test_homes_csv_round_trip(tmp_path):
    homes = [HomeRecord("a", A, GRID.center(A), Basis.NIGHT_RULE, 7, "12071000100"),
             HomeRecord("b", C, GRID.center(C), Basis.WEEKEND_FALLBACK, 0, None)]
    path = tmp_path / "homes.csv"
    write_homes_csv(path, homes)
    assert path.read_text().splitlines()[0] == \
        "device_id,home_lat,home_lon,home_tract_id,basis,qualifying_nights"
    assert read_homes_csv(path, GRID) == homes
