import json
import logging
import shutil
from datetime import datetime, timedelta
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evsim.algorithms import SortedSchedulingAlgo, UncontrolledCharging
from evsim.cli import main
from evsim.engine import ACTIVE_TOL, SimConfig, SimRecord, Simulator
from evsim.hardware import deliverable_energy, kwh_to_amp_periods
from evsim.metrics import (capacity_sweep, compute_metrics, constraint_violations,
                           export_load_profile, sweep_csv)
from evsim.network import build_auto_network
from evsim.scenario_io import (BatterySpec, MixtureComponent, MixtureSpec, ScenarioError,
                               assign_stations, load_scenario, read_session_file, sample_events,
                               sessions_to_events, to_period)
from evsim.signals import Tariff

from helpers import brute_currents, ev, queue_of, single_phase, unconstrained

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
START = datetime(2021, 6, 7)  # a Monday
CFG = SimConfig(period_minutes=5, start=START)


def rec(sid="s1", station="A", t0="2021-06-07T08:00:00", t1="2021-06-07T10:00:00", kwh=10.0, **kw):
    return {"session_id": sid, "station_id": station, "connection_time": t0,
            "disconnect_time": t1, "energy_kwh": kwh, **kw}


def plugins(queue):
    return [e.ev for e in queue.events() if e.kind == "plugin"]


# -- session records -------------------------------------------------------

def test_ten_kwh_record_converts():
    (e,) = plugins(sessions_to_events([rec()], CFG))
    assert e.requested_energy == pytest.approx(576.92, abs=0.01)
    assert (e.arrival, e.departure) == (96, 120)


def test_empty_file_gives_empty_queue(tmp_path):
    p = tmp_path / "empty.json"
    p.write_text("")
    assert len(sessions_to_events(read_session_file(p), CFG)) == 0
    p.write_text("[]")
    assert len(sessions_to_events(read_session_file(p), CFG)) == 0


def test_missing_estimate_defaults_to_truth_and_flags():
    (a, b) = plugins(sessions_to_events(
        [rec("a"), rec("b", "B", estimated_departure="2021-06-07T09:00:00")], CFG))
    assert a.estimated_departure == a.departure and a.estimate_flagged
    assert b.estimated_departure == 108 and not b.estimate_flagged


def test_snapping_floor_and_ceil():
    (e,) = plugins(sessions_to_events([rec(t0="2021-06-07T08:03:00", t1="2021-06-07T08:06:00")], CFG))
    assert (e.arrival, e.departure) == (96, 98)
    assert to_period(datetime(2021, 6, 7, 0, 10), START, 5, "ceil") == 2


def test_bad_records_are_skipped(caplog):
    records = [rec("ok"), {"session_id": "x"}, rec("back", t1="2021-06-07T07:00:00"),
               rec("neg", kwh=-1), rec("ghost", station="Z"),
               rec("early", t0="2021-06-06T23:00:00")]
    with caplog.at_level(logging.WARNING):
        q = sessions_to_events(records, CFG, network=unconstrained(["A"]))
    assert [e.session_id for e in plugins(q)] == ["ok"]
    assert len(caplog.records) == 5


def test_zero_duration_after_snapping_is_dropped(caplog):
    # a microsecond stay on a grid point snaps to an empty window
    r = rec(t0="2021-06-07T08:00:00", t1="2021-06-07T08:00:00.000001")
    with caplog.at_level(logging.WARNING):
        assert len(sessions_to_events([r], SimConfig(period_minutes=60, start=START))) == 0
    assert "zero duration" in caplog.text
    # off the grid the same stay still gets one period
    r = rec(t0="2021-06-07T08:10:00", t1="2021-06-07T08:10:00.000001")
    assert len(sessions_to_events([r], SimConfig(period_minutes=60, start=START))) == 2


def test_timezone_offsets_and_field_map():
    r = {"id": "a", "evse": "A", "start": "2021-06-07T15:00:00+00:00", "end": "2021-06-07T17:00:00+00:00",
         "kwh": 5.0}
    fmap = {"session_id": "id", "station_id": "evse", "connection_time": "start",
            "disconnect_time": "end", "energy_kwh": "kwh"}
    (e,) = plugins(sessions_to_events([r], CFG, timezone="America/Los_Angeles", field_map=fmap))
    assert e.arrival == 96  # 08:00 local
    assert e.station_id == "A"


def test_requested_kwh_preferred():
    (e,) = plugins(sessions_to_events([rec(requested_kwh=20.0)], CFG))
    assert e.requested_energy == pytest.approx(kwh_to_amp_periods(20, 208, 5))


def test_estimate_noise_is_seeded():
    records = [rec(f"s{k}", f"S{k}", estimated_departure="2021-06-07T09:30:00") for k in range(20)]
    a = [e.estimated_departure for e in plugins(sessions_to_events(records, CFG, estimate_noise=3, seed=1))]
    b = [e.estimated_departure for e in plugins(sessions_to_events(records, CFG, estimate_noise=3, seed=1))]
    assert a == b and len(set(a)) > 1


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 200), st.integers(1, 60), st.floats(0.0, 40.0),
                          st.one_of(st.none(), st.floats(1.0, 80.0))), min_size=1, max_size=8))
def test_round_trip_uncontrolled_delivers_min_of_request_and_room(spec):
    records = []
    for k, (t0, dur, kwh, cap) in enumerate(spec):
        a = START + timedelta(minutes=5 * t0)
        records.append(rec(f"s{k}", f"S{k}", a.isoformat(), (a + timedelta(minutes=dur)).isoformat(), kwh))
    net = unconstrained([f"S{k}" for k in range(len(spec))])
    battery = BatterySpec(capacity_kwh=spec[0][3])
    q = sessions_to_events(records, CFG, net, battery)
    record = Simulator(net, UncontrolledCharging(), q, CFG).run()
    done = {s["session_id"]: s for s in record.sessions}
    for e in plugins(q):
        s = done[e.session_id]
        window = 32.0 * (e.departure - e.arrival)
        # sessions within ACTIVE_TOL of done are not scheduled
        assert s["delivered_energy"] == pytest.approx(min(deliverable_energy(e), window), rel=1e-9,
                                                      abs=ACTIVE_TOL)


# -- mixture sampling --------------------------------------------------------

def point_mass(**kw):
    return MixtureSpec([MixtureComponent(1.0, [9.0, 4.0, 10.0], np.zeros((3, 3)))], **kw)


def test_weekend_has_no_events():
    cfg = SimConfig(period_minutes=5, start=datetime(2021, 6, 12))  # Saturday
    assert len(sample_events(point_mass(arrivals_per_day=10), 2, seed=0, config=cfg)) == 0
    assert len(sample_events(point_mass(arrivals_per_day=10), 3, seed=0, config=cfg)) == 20


def test_point_mass_sessions_identical():
    evs = plugins(sample_events(point_mass(arrivals_per_day=5), 1, seed=3, config=CFG))
    assert len(evs) == 5
    assert {(e.arrival, e.departure) for e in evs} == {(108, 156)}
    assert all(e.requested_energy == pytest.approx(576.92, abs=0.01) for e in evs)


def test_same_seed_same_queue():
    spec = MixtureSpec.load(CONFIGS / "mixture_weekday.json")
    a = [e.to_dict() for e in sample_events(spec, 5, seed=11, config=CFG).events()]
    b = [e.to_dict() for e in sample_events(spec, 5, seed=11, config=CFG).events()]
    c = [e.to_dict() for e in sample_events(spec, 5, seed=12, config=CFG).events()]
    assert a == b and a != c


def test_rejection_budget_exhausted():
    spec = MixtureSpec([MixtureComponent(1.0, [9.0, -5.0, 10.0], np.eye(3) * 1e-4)], arrivals_per_day=1)
    with pytest.raises(ScenarioError, match="redraws"):
        sample_events(spec, 1, seed=0, config=CFG)


@pytest.mark.parametrize("bad", [
    {"components": [{"weight": 0.5, "mean": [9, 4, 10], "covariance": np.eye(3).tolist()}]},
    {"components": [{"weight": 1.0, "mean": [9, 4, 10], "covariance": (-np.eye(3)).tolist()}]},
    {"components": [{"weight": 1.0, "mean": [9, 4, 10], "covariance": [[1, 1, 0], [0, 1, 0], [0, 0, 1]]}]},
    {"components": [{"weight": 1.0, "mean": [9, 4], "covariance": np.eye(3).tolist()}]},
    {"components": [{"weight": 1.0, "mean": [9, 4, 10], "covariance": np.eye(3).tolist()}],
     "weekday_mask": [True] * 5},
])
def test_invalid_mixtures_rejected(bad):
    with pytest.raises(ScenarioError):
        MixtureSpec.from_dict(bad)


def test_assign_stations_lowest_free():
    q = queue_of([ev("a", None, 0, 10, 5), ev("b", None, 2, 5, 5), ev("c", None, 3, 6, 5),
                  ev("d", None, 5, 9, 5)])
    out = plugins(assign_stations(q, ["S2", "S1"]))
    assert [(e.session_id, e.station_id) for e in out] == [("a", "S1"), ("b", "S2"), ("d", "S2")]
    assert len(assign_stations(q, ["S2", "S1"])) == 6


# -- metrics -----------------------------------------------------------------

def test_full_service_demand_met_one():
    net = single_phase(["A", "B"], 64.0)
    record = Simulator(net, UncontrolledCharging(), queue_of([ev("a", "A", 0, 5, 50), ev("b", "B", 1, 4, 30)])).run()
    rep = compute_metrics(record, Tariff.flat(0.1))
    assert rep.demand_met == 1.0 and rep.violations == 0 and rep.total_cost > 0


def test_overload_matches_oracle():
    net = single_phase(["A", "B"], 16.0)
    evs = [ev("a", "A", 0, 4, 200), ev("b", "B", 0, 4, 200)]
    record = Simulator(net, UncontrolledCharging(), queue_of(evs)).run()
    oracle = brute_currents(net, {"A": 32.0, "B": 32.0})["cap"] - 16.0
    rep = compute_metrics(record)
    assert oracle == pytest.approx(48.0)
    assert rep.violations == 4
    assert rep.max_overload == pytest.approx(oracle, abs=1e-9)
    assert rep.max_overload_frac == pytest.approx(3.0)
    safe = Simulator(net, SortedSchedulingAlgo("llf"), queue_of(evs)).run()
    assert constraint_violations(safe)[0] == 0


def test_no_sessions_report():
    record = Simulator(single_phase(["A"], 32), UncontrolledCharging(), []).run()
    rep = compute_metrics(record, Tariff.flat(0.1, 10.0))
    assert rep.demand_met is None and rep.total_cost == 0.0


# -- capacity sweeps ---------------------------------------------------------

@pytest.fixture(scope="module")
def sweep_scenario():
    return load_scenario(CONFIGS / "scenario_sweep.json")


BASELINES = ["round_robin", "fcfs", "edf", "llf"]


def test_sweep_monotone_and_bounded(sweep_scenario):
    caps = [5, 10, 15, 20, 30]
    rows = capacity_sweep(sweep_scenario, BASELINES, caps)
    by = {(r.algorithm, r.capacity_kw): r for r in rows}
    for a in BASELINES + ["offline"]:
        met = [by[(a, float(c))].demand_met for c in caps]
        assert all(x <= y + (1e-4 if a == "offline" else 0.0) for x, y in zip(met, met[1:])), (a, met)
    for c in caps:
        off = by[("offline", float(c))].energy_delivered
        for a in BASELINES:
            assert by[(a, float(c))].violations == 0
            assert by[(a, float(c))].energy_delivered <= off * 1.01


def test_sweep_unconstrained_capacity_meets_offline(sweep_scenario):
    rows = capacity_sweep(sweep_scenario, BASELINES + ["uncontrolled"], [1000.0])
    off = next(r for r in rows if r.algorithm == "offline")
    for r in rows:
        assert r.demand_met == pytest.approx(off.demand_met, abs=1e-3)


def test_sweep_parallel_identical(sweep_scenario):
    serial = sweep_csv(capacity_sweep(sweep_scenario, ["llf", "edf"], [10, 20], jobs=1))
    parallel = sweep_csv(capacity_sweep(sweep_scenario, ["llf", "edf"], [10, 20], jobs=2))
    assert serial == parallel
    assert serial.splitlines()[0].startswith("capacity_kw,algorithm,demand_met")


# -- load profiles -----------------------------------------------------------

def _parse(text):
    lines = text.strip().splitlines()
    return lines[0].split(","), np.array([[float(x) for x in line.split(",")[1:]] for line in lines[1:]])


def test_balanced_three_phase_profile():
    net = build_auto_network(["a", "b", "c"], 100.0, "three")
    record = Simulator(net, UncontrolledCharging(), queue_of([ev(s, s, 0, 6, 100) for s in "abc"])).run()
    header, data = _parse(export_load_profile(record, phases=True))
    assert header == ["timestamp", "total_kw", "kw_phase_A", "kw_phase_B", "kw_phase_C"]
    assert np.allclose(data[:, 1], data[:, 2], atol=1e-6) and np.allclose(data[:, 2], data[:, 3], atol=1e-6)
    assert np.allclose(data[:, 1:].sum(axis=1), data[:, 0], atol=1e-9)
    assert np.allclose(data[:, 0], record.aggregate_power)


def test_zero_charging_profile():
    record = Simulator(single_phase(["A"], 32.0), UncontrolledCharging(), queue_of([ev("a", "A", 0, 3, 0)])).run()
    _, data = _parse(export_load_profile(record))
    assert data.shape[0] == record.n_periods and np.all(data == 0)


# -- scenario files and CLI --------------------------------------------------

SHIPPED = sorted(p.name for p in CONFIGS.glob("*.json") if p.name != "sessions_example.json")


@pytest.mark.parametrize("name", SHIPPED)
def test_validate_shipped_configs(name, capsys):
    assert main(["validate", str(CONFIGS / name)]) == 0
    assert "ok" in capsys.readouterr().out


def test_missing_tariff_names_path(tmp_path, capsys):
    doc = json.loads((CONFIGS / "scenario_sweep.json").read_text())
    doc["tariff"] = "no_such_tariff.json"
    shutil.copy(CONFIGS / "mixture_weekday.json", tmp_path)
    cfg = tmp_path / "scenario.json"
    cfg.write_text(json.dumps(doc))
    with pytest.raises(ScenarioError, match="no_such_tariff.json"):
        load_scenario(cfg)
    assert main(["run", "--config", str(cfg), "--out-dir", str(tmp_path / "out")]) != 0
    assert str(tmp_path / "no_such_tariff.json") in capsys.readouterr().err


def test_run_twice_is_byte_identical(tmp_path, capsys):
    for d in ("one", "two"):
        assert main(["run", "--config", str(CONFIGS / "scenario_sweep.json"), "--seed", "3",
                     "--out-dir", str(tmp_path / d)]) == 0
    files = sorted(p.name for p in (tmp_path / "one").iterdir())
    assert files == ["events.jsonl", "metrics.json", "record.csv", "summary.json"]
    for f in files:
        assert (tmp_path / "one" / f).read_bytes() == (tmp_path / "two" / f).read_bytes()


def test_run_then_export(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--config", str(CONFIGS / "scenario_site.json"), "--algorithm", "edf",
                 "--out-dir", str(out)]) == 0
    record = SimRecord.load(out)
    assert record.algorithm == "edf"
    assert main(["export", str(out), "--phases", "--out", str(tmp_path / "p.csv")]) == 0
    header, data = _parse((tmp_path / "p.csv").read_text())
    assert data.shape[0] == record.n_periods
    assert np.allclose(data[:, 1:].sum(axis=1), data[:, 0], atol=1e-9)


def test_sweep_cli(tmp_path, capsys):
    assert main(["sweep", "--config", str(CONFIGS / "scenario_sweep.json"), "--algorithm", "llf,edf",
                 "--capacity-list", "10,20", "--no-offline", "--out-dir", str(tmp_path)]) == 0
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert len(lines) == 5


def test_scenario_loads_site_sessions():
    scen = load_scenario(CONFIGS / "scenario_site.json")
    assert len(scen.network.evses) == 12 and len(scen.events) > 0
    assert all(e.ev.station_id in scen.network.evses for e in scen.events.events() if e.kind == "plugin")
