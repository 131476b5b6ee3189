"""Tariffs, external time series (building load, solar) and bill calculation."""

from __future__ import annotations

import csv
import json
import logging
import warnings
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from importlib import resources
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

_log = logging.getLogger(__name__)

DAY_TYPES = ("weekday", "weekend")


class TariffError(ValueError):
    pass


@dataclass(frozen=True)
class Band:
    start: float  # hour of day, inclusive
    end: float  # hour of day, exclusive
    price: float  # $/kWh


@dataclass(frozen=True)
class Season:
    start: Tuple[int, int]  # (month, day), inclusive
    end: Tuple[int, int]  # (month, day), inclusive; may wrap past Dec 31
    days: str  # all | weekday | weekend
    bands: Tuple[Band, ...]

    def covers(self, d: date) -> bool:
        md = (d.month, d.day)
        if self.start <= self.end:
            in_range = self.start <= md <= self.end
        else:
            in_range = md >= self.start or md <= self.end
        if not in_range:
            return False
        if self.days == "all":
            return True
        return self.days == ("weekend" if d.weekday() >= 5 else "weekday")

    def price(self, hour: float) -> float:
        for b in self.bands:
            if b.start <= hour < b.end:
                return b.price
        raise TariffError(f"hour {hour} not covered")


@dataclass
class Tariff:
    name: str
    seasons: List[Season]
    demand_charge: float = 0.0  # $/kW of monthly peak

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.demand_charge < 0:
            raise TariffError("demand charge must be non-negative")
        for s in self.seasons:
            if s.days not in ("all",) + DAY_TYPES:
                raise TariffError(f"unknown day type {s.days!r}")
            bands = sorted(s.bands, key=lambda b: b.start)
            if not bands or bands[0].start != 0 or bands[-1].end != 24:
                raise TariffError(f"{self.name}: bands must span 0-24h")
            for a, b in zip(bands, bands[1:]):
                if a.end != b.start:
                    raise TariffError(f"{self.name}: bands overlap or leave a gap at {a.end}h")
            for b in bands:
                if b.start >= b.end:
                    raise TariffError(f"{self.name}: empty band {b}")
                if b.price < 0:
                    raise TariffError(f"{self.name}: negative price {b.price}")
        # leap year; one weekday and one weekend instance of every calendar day
        for d0 in (date(2020, 1, 1) + timedelta(days=k) for k in range(366)):
            for d in (d0, _other_day_type(d0)):
                n = sum(s.covers(d) for s in self.seasons)
                if n != 1:
                    kind = "missing" if n == 0 else "overlapping"
                    raise TariffError(f"{self.name}: {kind} season for {d0:%m-%d} "
                                      f"({'weekend' if d.weekday() >= 5 else 'weekday'})")

    def season_for(self, when: datetime) -> Season:
        for s in self.seasons:
            if s.covers(when.date()):
                return s
        raise TariffError(f"{self.name}: no season covers {when}")

    def price_at(self, when: datetime) -> float:
        hour = when.hour + when.minute / 60.0 + when.second / 3600.0
        return self.season_for(when).price(hour)

    def to_dict(self) -> dict:
        return {"name": self.name, "demand_charge": self.demand_charge,
                "seasons": [{"start": f"{s.start[0]:02d}-{s.start[1]:02d}",
                             "end": f"{s.end[0]:02d}-{s.end[1]:02d}", "days": s.days,
                             "bands": [{"start": b.start, "end": b.end, "price": b.price}
                                       for b in s.bands]} for s in self.seasons]}

    @classmethod
    def from_dict(cls, d) -> "Tariff":
        try:
            seasons = [Season(_month_day(s.get("start", "01-01")), _month_day(s.get("end", "12-31")),
                              s.get("days", "all"),
                              tuple(Band(float(b["start"]), float(b["end"]), float(b["price"]))
                                    for b in s["bands"]))
                       for s in d["seasons"]]
        except (KeyError, TypeError) as exc:
            raise TariffError(f"malformed tariff: {exc!r}") from exc
        return cls(d.get("name", "tariff"), seasons, float(d.get("demand_charge", 0.0)))

    @classmethod
    def load(cls, path) -> "Tariff":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @classmethod
    def flat(cls, price: float, demand_charge: float = 0.0) -> "Tariff":
        return cls(f"flat_{price}", [Season((1, 1), (12, 31), "all", (Band(0, 24, price),))],
                   demand_charge)


def _other_day_type(d: date) -> date:
    # nearest day of the other type, same month/day in another year
    want_weekend = d.weekday() < 5
    for year in range(2020, 2040):
        try:
            cand = d.replace(year=year)
        except ValueError:  # Feb 29
            continue
        if (cand.weekday() >= 5) == want_weekend:
            return cand
    raise AssertionError("unreachable")


def _month_day(s: str) -> Tuple[int, int]:
    m, d = s.split("-")
    return int(m), int(d)


BUILTIN_TARIFFS = ("flat", "tou_demand")


def builtin_tariff(name: str) -> Tariff:
    """Packaged tariffs. ``tou_demand`` uses placeholder prices, not a real utility's rates."""
    if name not in BUILTIN_TARIFFS:
        raise TariffError(f"unknown built-in tariff {name!r}; choose from {BUILTIN_TARIFFS}")
    text = resources.files("evsim.data.tariffs").joinpath(f"{name}.json").read_text()
    return Tariff.from_dict(json.loads(text))


def price_at(tariff: Tariff, when: datetime) -> float:
    return tariff.price_at(when)


@dataclass
class TimeSeriesSignal:
    start: datetime
    period_minutes: float
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    name: str = "signal"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)

    def check_period(self, period_minutes: float):
        if abs(self.period_minutes - period_minutes) > 1e-9:
            raise ValueError(f"{self.name}: {self.period_minutes}-minute series used with a "
                             f"{period_minutes}-minute simulation; resample it first")

    def at(self, index: int) -> float:
        if 0 <= index < len(self.values):
            return float(self.values[index])
        warnings.warn(f"{self.name}: index {index} outside series of length {len(self.values)}; using 0")
        return 0.0

    def window(self, first: int, n: int) -> np.ndarray:
        """``n`` values from ``first`` on, zero-padded past the end (no warning)."""
        out = np.zeros(n)
        lo, hi = max(first, 0), min(first + n, len(self.values))
        if hi > lo:
            out[lo - first:hi - first] = self.values[lo:hi]
        return out

    @classmethod
    def from_csv(cls, path, name: Optional[str] = None) -> "TimeSeriesSignal":
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        if len(rows) < 2:
            raise ValueError(f"{path}: need a header and at least one row")
        stamps = [datetime.fromisoformat(r[0]) for r in rows[1:]]
        values = [float(r[1]) for r in rows[1:]]
        if len(stamps) > 1:
            steps = {(b - a).total_seconds() for a, b in zip(stamps, stamps[1:])}
            if len(steps) != 1:
                raise ValueError(f"{path}: timestamps are not uniformly spaced")
            period = steps.pop() / 60.0
        else:
            period = 0.0
        return cls(stamps[0], period, np.array(values), name or Path(path).stem)


def signal_at(signal: TimeSeriesSignal, index: int) -> float:
    return signal.at(index)


@dataclass
class Bill:
    energy_cost: float
    demand_cost: float
    energy_kwh: float
    peak_kw: float

    @property
    def total(self) -> float:
        return self.energy_cost + self.demand_cost

    @property
    def per_kwh(self) -> Optional[float]:
        return self.total / self.energy_kwh if self.energy_kwh > 0 else None

    def to_dict(self) -> dict:
        return {"energy_cost": self.energy_cost, "demand_cost": self.demand_cost,
                "total_cost": self.total, "energy_kwh": self.energy_kwh,
                "peak_kw": self.peak_kw, "cost_per_kwh": self.per_kwh}


def bill_profile(power_kw: Sequence[float], start: datetime, period_minutes: float,
                 tariff: Tariff) -> Bill:
    """Energy charges per period plus demand charge on each calendar month's peak."""
    p = np.asarray(power_kw, dtype=float)
    dt_h = period_minutes / 60.0
    energy_cost = 0.0
    month_peaks: Dict[Tuple[int, int], float] = {}
    for t, kw in enumerate(p):
        when = start + timedelta(minutes=period_minutes * t)
        energy_cost += tariff.price_at(when) * kw * dt_h
        key = (when.year, when.month)
        month_peaks[key] = max(month_peaks.get(key, 0.0), kw)
    demand_cost = tariff.demand_charge * sum(month_peaks.values())
    return Bill(float(energy_cost), float(demand_cost), float(p.sum() * dt_h),
                float(p.max()) if len(p) else 0.0)


def billing_cost(record, tariff: Tariff, voltages: Optional[Dict[str, float]] = None) -> Bill:
    """Bill a finished simulation. With ``voltages`` the power series is rebuilt from actual currents."""
    if voltages is None:
        power = record.aggregate_power
    else:
        power = sum(record.actuals[s] * voltages[s] / 1000.0 for s in record.station_ids)
    return bill_profile(power, record.start, record.period_minutes, tariff)
