"""EVSE pilot quantization, EV sessions and battery charging dynamics.

Energy is tracked in amp-periods: one period of charging at r amps delivers r
amp-periods. Conversion to kWh needs the nominal voltage and the period length.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Tuple

DEADBAND_MIN = 6.0


@dataclass(frozen=True)
class PilotModel:
    """Allowable pilot signals for one EVSE.

    kind is ``continuous`` (any value in [min_rate, max_rate], or 0),
    ``deadband`` (continuous, but nothing in (0, 6) A), or ``finite`` (only the
    listed set points, plus 0).
    """

    kind: str = "continuous"
    max_rate: float = 32.0
    min_rate: float = 0.0
    allowed: Tuple[float, ...] = ()

    def __post_init__(self):
        if self.kind not in ("continuous", "deadband", "finite"):
            raise ValueError(f"unknown pilot model {self.kind!r}")
        if self.kind == "finite":
            vals = tuple(sorted(float(a) for a in self.allowed))
            if not vals or vals[0] < 0:
                raise ValueError("finite pilot set must be non-empty and non-negative")
            object.__setattr__(self, "allowed", vals)
            object.__setattr__(self, "max_rate", vals[-1])
            object.__setattr__(self, "min_rate", vals[0])
        elif self.kind == "deadband":
            object.__setattr__(self, "min_rate", max(self.min_rate, DEADBAND_MIN))
        if not self.max_rate >= self.min_rate >= 0:
            raise ValueError(f"need max_rate >= min_rate >= 0, got {self.max_rate}, {self.min_rate}")

    def clamp(self, requested: float) -> float:
        if requested <= 0:
            return 0.0
        if self.kind == "finite":
            k = bisect.bisect_right(self.allowed, requested + 1e-9)
            return self.allowed[k - 1] if k else 0.0
        if requested < self.min_rate - 1e-9:
            return 0.0
        return min(float(requested), self.max_rate)

    def step_up(self, rate: float) -> Optional[float]:
        """Next allowed pilot above ``rate``, or None at the top."""
        if self.kind == "finite":
            k = bisect.bisect_right(self.allowed, rate + 1e-9)
            return self.allowed[k] if k < len(self.allowed) else None
        if rate >= self.max_rate - 1e-9:
            return None
        if rate < self.min_rate:
            return max(self.min_rate, min(rate + 1.0, self.max_rate))
        return min(rate + 1.0, self.max_rate)

    def ceil(self, x: float) -> float:
        """Smallest allowed nonzero pilot at or above ``x`` (capped at the maximum)."""
        if x <= 0:
            return 0.0
        if self.kind == "finite":
            k = bisect.bisect_left(self.allowed, x - 1e-9)
            return self.allowed[min(k, len(self.allowed) - 1)]
        return min(max(x, self.min_rate), self.max_rate)

    def step_down(self, rate: float) -> float:
        """Next allowed pilot below ``rate`` (0 at the bottom)."""
        if self.kind == "finite":
            k = bisect.bisect_left(self.allowed, rate - 1e-9)
            return self.allowed[k - 1] if k else 0.0
        lower = rate - 1.0
        return lower if lower >= self.min_rate and lower > 0 else 0.0

    def to_dict(self) -> dict:
        d = {"model": self.kind, "max_rate": self.max_rate, "min_rate": self.min_rate}
        if self.kind == "finite":
            d["allowed"] = list(self.allowed)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "PilotModel":
        kind = d.get("model", "continuous")
        if kind == "finite":
            return cls("finite", allowed=tuple(d["allowed"]))
        return cls(kind, float(d.get("max_rate", 32.0)), float(d.get("min_rate", 0.0)))


def clamp_pilot(model: PilotModel, requested: float) -> float:
    if requested < 0:
        raise ValueError("requested pilot must be non-negative")
    return model.clamp(requested)


@dataclass
class Battery:
    """Ideal battery: follows the pilot up to its charger limit and remaining room."""

    capacity: float
    charge: float = 0.0
    max_rate: float = 32.0
    init_charge: Optional[float] = None

    kind = "ideal"

    def __post_init__(self):
        if self.max_rate <= 0:
            raise ValueError("battery max_rate must be positive")
        if not 0 <= self.charge <= self.capacity:
            raise ValueError(f"charge {self.charge} outside [0, {self.capacity}]")
        if self.init_charge is None:
            self.init_charge = self.charge

    @property
    def soc(self) -> float:
        return self.charge / self.capacity if self.capacity > 0 else 1.0

    @property
    def headroom(self) -> float:
        return self.capacity - self.charge

    def rate_for(self, pilot: float) -> float:
        return max(0.0, min(pilot, self.max_rate, self.headroom))

    def step(self, pilot: float) -> float:
        """Charge for one period under ``pilot``; returns the actual rate."""
        if pilot < 0:
            raise ValueError("pilot must be non-negative")
        r = self.rate_for(pilot)
        self.charge = min(self.capacity, self.charge + r)
        return r

    def to_dict(self) -> dict:
        return {"kind": self.kind, "capacity": self.capacity, "charge": self.charge,
                "max_rate": self.max_rate, "init_charge": self.init_charge}


@dataclass
class TwoStageBattery(Battery):
    """Bulk stage at the ideal rate, then linear taper above ``threshold`` SoC."""

    threshold: float = 0.8

    kind = "two_stage"

    def __post_init__(self):
        super().__post_init__()
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")

    def rate_for(self, pilot: float) -> float:
        if self.soc <= self.threshold:
            return super().rate_for(pilot)
        taper = (1.0 - self.soc) * self.max_rate / (1.0 - self.threshold)
        # the taper is below the headroom for any sane capacity; min keeps charge <= capacity
        return max(0.0, min(taper, pilot, self.headroom))

    def to_dict(self) -> dict:
        return {**super().to_dict(), "threshold": self.threshold}


def battery_from_dict(d: Mapping) -> Battery:
    kw = dict(capacity=float(d["capacity"]), charge=float(d.get("charge", 0.0)),
              max_rate=float(d.get("max_rate", 32.0)),
              init_charge=None if d.get("init_charge") is None else float(d["init_charge"]))
    if d.get("kind", "ideal") == "two_stage":
        return TwoStageBattery(threshold=float(d.get("threshold", 0.8)), **kw)
    return Battery(**kw)


def battery_step(battery: Battery, pilot: float) -> float:
    return battery.step(pilot)


def make_battery(requested: float, capacity: float, max_rate: float = 32.0,
                 kind: str = "ideal", threshold: float = 0.8) -> Battery:
    """Battery whose initial charge leaves room for exactly ``requested`` (capacity permitting)."""
    init = capacity - min(requested, capacity)
    if kind == "two_stage":
        return TwoStageBattery(capacity, init, max_rate, threshold=threshold)
    if kind != "ideal":
        raise ValueError(f"unknown battery kind {kind!r}")
    return Battery(capacity, init, max_rate)


@dataclass
class SessionEV:
    session_id: str
    station_id: Optional[str]
    arrival: int
    departure: int
    requested_energy: float
    battery: Battery
    estimated_departure: Optional[int] = None
    delivered_energy: float = 0.0
    estimate_flagged: bool = False

    def __post_init__(self):
        if self.departure <= self.arrival:
            raise ValueError(f"session {self.session_id}: departure must follow arrival")
        if self.estimated_departure is None:
            self.estimated_departure = self.departure

    @property
    def max_rate(self) -> float:
        return self.battery.max_rate

    def charge(self, pilot: float) -> float:
        r = self.battery.step(pilot)
        self.delivered_energy += r
        return r

    def to_dict(self) -> dict:
        return {"session_id": self.session_id, "station_id": self.station_id,
                "arrival": self.arrival, "departure": self.departure,
                "estimated_departure": self.estimated_departure,
                "requested_energy": self.requested_energy,
                "delivered_energy": self.delivered_energy,
                "estimate_flagged": self.estimate_flagged,
                "battery": self.battery.to_dict()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "SessionEV":
        return cls(str(d["session_id"]), d.get("station_id"), int(d["arrival"]), int(d["departure"]),
                   float(d["requested_energy"]), battery_from_dict(d["battery"]),
                   d.get("estimated_departure"), float(d.get("delivered_energy", 0.0)),
                   bool(d.get("estimate_flagged", False)))


def kwh_to_amp_periods(energy_kwh: float, voltage: float, period_minutes: float) -> float:
    if energy_kwh <= 0 or voltage <= 0 or period_minutes <= 0:
        raise ValueError("energy, voltage and period length must be positive")
    return energy_kwh * 1000.0 * 60.0 / (voltage * period_minutes)


def amp_periods_to_kwh(amp_periods: float, voltage: float, period_minutes: float) -> float:
    return amp_periods * voltage * period_minutes / 60.0 / 1000.0


def deliverable_energy(ev: SessionEV) -> float:
    """Requested energy capped by the battery's room at plug-in."""
    b = ev.battery
    return min(ev.requested_energy, b.capacity - b.init_charge)


def remaining_demand(ev: SessionEV) -> float:
    return max(0.0, deliverable_energy(ev) - ev.delivered_energy)
