from datetime import datetime, timedelta

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evsim.engine import SimConfig, Simulator
from evsim.algorithms import UncontrolledCharging
from evsim.signals import (BUILTIN_TARIFFS, Tariff, TariffError, TimeSeriesSignal, bill_profile,
                           billing_cost, builtin_tariff, price_at, signal_at)

from helpers import ev, queue_of, single_phase

TOU = {"name": "tou", "demand_charge": 10.0, "seasons": [
    {"days": "weekday", "bands": [{"start": 0, "end": 12, "price": 0.1},
                                  {"start": 12, "end": 18, "price": 0.3},
                                  {"start": 18, "end": 24, "price": 0.1}]},
    {"days": "weekend", "bands": [{"start": 0, "end": 24, "price": 0.05}]}]}
MONDAY = datetime(2021, 6, 7)


def test_price_examples():
    assert price_at(Tariff.flat(0.1), datetime(2020, 2, 29, 3, 17)) == 0.1
    t = Tariff.from_dict(TOU)
    assert price_at(t, MONDAY.replace(hour=13)) == 0.3
    assert price_at(t, MONDAY.replace(hour=11, minute=59)) == 0.1
    assert price_at(t, MONDAY.replace(hour=18)) == 0.1
    assert price_at(t, datetime(2021, 6, 12, 13)) == 0.05  # Saturday


def test_seasons_wrap_the_year():
    t = builtin_tariff("tou_demand")
    assert price_at(t, datetime(2021, 7, 6, 13)) == 0.30  # summer weekday
    assert price_at(t, datetime(2021, 1, 5, 13)) == 0.20  # winter weekday
    assert price_at(t, datetime(2021, 12, 31, 23, 30)) == 0.12


def test_builtins_load():
    for name in BUILTIN_TARIFFS:
        assert builtin_tariff(name).name == name
    with pytest.raises(TariffError):
        builtin_tariff("sce")


def _bands(*spans):
    return {"name": "bad", "seasons": [{"bands": [{"start": a, "end": b, "price": 0.1} for a, b in spans]}]}


@pytest.mark.parametrize("spans", [[(0, 12), (11, 24)], [(0, 12), (13, 24)], [(0, 20)], [(1, 24)]])
def test_band_overlap_or_gap_rejected(spans):
    with pytest.raises(TariffError):
        Tariff.from_dict(_bands(*spans))


def test_season_overlap_or_gap_rejected():
    gap = {"name": "g", "seasons": [{"start": "01-01", "end": "06-30",
                                      "bands": [{"start": 0, "end": 24, "price": 0.1}]}]}
    with pytest.raises(TariffError, match="missing"):
        Tariff.from_dict(gap)
    both = {"name": "o", "seasons": [{"bands": [{"start": 0, "end": 24, "price": 0.1}]},
                                     {"days": "weekend", "bands": [{"start": 0, "end": 24, "price": 0.1}]}]}
    with pytest.raises(TariffError, match="overlapping"):
        Tariff.from_dict(both)


def test_negative_price_rejected():
    with pytest.raises(TariffError):
        Tariff.from_dict({"name": "n", "seasons": [{"bands": [{"start": 0, "end": 24, "price": -0.1}]}]})


def test_tariff_round_trip():
    t = Tariff.from_dict(TOU)
    assert Tariff.from_dict(t.to_dict()).to_dict() == t.to_dict()


def hourly_profile():
    # 100 kWh off-peak and 50 kWh on-peak, peak 20 kW, on a Monday
    p = np.zeros(24)
    p[0:5] = 20.0
    p[12:14] = 20.0
    p[14] = 10.0
    return p


def test_bill_example():
    bill = bill_profile(hourly_profile(), MONDAY, 60, Tariff.from_dict(TOU))
    assert bill.energy_kwh == 150.0 and bill.peak_kw == 20.0
    assert bill.energy_cost == 25.0 and bill.demand_cost == 200.0
    assert bill.total == 225.0 and bill.per_kwh == 1.5


def test_zero_demand_charge_total_is_energy():
    t = Tariff.from_dict({**TOU, "demand_charge": 0.0})
    bill = bill_profile(hourly_profile(), MONDAY, 60, t)
    assert bill.total == bill.energy_cost


def test_zero_energy_has_no_per_kwh():
    assert bill_profile(np.zeros(5), MONDAY, 60, Tariff.flat(0.1, 10.0)).per_kwh is None


def test_economies_of_scale():
    t = Tariff.from_dict(TOU)
    base = hourly_profile()
    doubled = base.copy()
    doubled[5:12] = np.r_[20.0, 20.0, 20.0, 20.0, 20.0, 0.0, 0.0]  # another 100 kWh, same peak
    doubled[15:18] = np.r_[20.0, 20.0, 10.0]  # another 50 kWh on-peak
    a, b = (bill_profile(p, MONDAY, 60, t) for p in (base, doubled))
    assert b.energy_kwh == 2 * a.energy_kwh and b.peak_kw == a.peak_kw
    assert b.per_kwh < a.per_kwh


def test_demand_charge_per_calendar_month():
    t = Tariff.flat(0.0, 10.0)
    start = datetime(2021, 1, 31, 23)
    bill = bill_profile([5.0, 7.0], start, 60, t)  # one period in January, one in February
    assert bill.demand_cost == pytest.approx(120.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=2, max_size=96), st.data())
def test_energy_cost_additive_over_partitions(values, data):
    t = builtin_tariff("tou_demand")
    k = data.draw(st.integers(1, len(values) - 1))
    start = datetime(2021, 5, 31, 20)
    whole = bill_profile(values, start, 15, t)
    left = bill_profile(values[:k], start, 15, t)
    right = bill_profile(values[k:], start + timedelta(minutes=15 * k), 15, t)
    assert left.energy_cost + right.energy_cost == pytest.approx(whole.energy_cost, rel=1e-12, abs=1e-12)


def test_billing_cost_of_record():
    net = single_phase(["A"], 32.0)
    cfg = SimConfig(period_minutes=60, start=MONDAY)
    rec = Simulator(net, UncontrolledCharging(), queue_of([ev("a", "A", 0, 10, 64)]), cfg).run()
    bill = billing_cost(rec, Tariff.flat(0.1, 10.0))
    kw = 32 * 208 / 1000
    assert bill.energy_kwh == pytest.approx(2 * kw)
    assert bill.total == pytest.approx(0.1 * 2 * kw + 10 * kw)
    assert billing_cost(rec, Tariff.flat(0.1), rec.voltages).energy_kwh == pytest.approx(2 * kw)


# -- time series -------------------------------------------------------------

def test_signal_at_examples():
    sig = TimeSeriesSignal(MONDAY, 5, [1.0, 2.0, 3.0])
    assert signal_at(sig, 1) == 2.0
    with pytest.warns(UserWarning):
        assert signal_at(sig, 3) == 0.0
    assert list(sig.window(2, 3)) == [3.0, 0.0, 0.0]


def test_period_mismatch_rejected():
    sig = TimeSeriesSignal(MONDAY, 15, [1.0, 2.0], name="load")
    with pytest.raises(ValueError, match="resample"):
        Simulator(single_phase(["A"], 32), UncontrolledCharging(), [], SimConfig(period_minutes=5),
                  signals={"external_load": sig})


def test_csv_loader(tmp_path):
    p = tmp_path / "solar.csv"
    p.write_text("timestamp,kw\n2021-06-07T00:00,0\n2021-06-07T00:15,1.5\n2021-06-07T00:30,2.5\n")
    sig = TimeSeriesSignal.from_csv(p)
    assert sig.period_minutes == 15 and sig.name == "solar" and list(sig.values) == [0, 1.5, 2.5]
    bad = tmp_path / "bad.csv"
    bad.write_text("timestamp,kw\n2021-06-07T00:00,0\n2021-06-07T00:15,1\n2021-06-07T00:45,1\n")
    with pytest.raises(ValueError, match="uniformly"):
        TimeSeriesSignal.from_csv(bad)
