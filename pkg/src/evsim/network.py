"""Charging network: EVSE registry, current-magnitude constraints, space assignment."""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .hardware import PilotModel, SessionEV, remaining_demand

_log = logging.getLogger(__name__)

FEASIBILITY_TOL = 1e-6
BISECTION_TOL = 0.01

# Three-phase round-robin order for auto-built sites.
THREE_PHASE_ANGLES = (0.0, -120.0, 120.0)


class NetworkError(ValueError):
    pass


@dataclass
class EvseNode:
    station_id: str
    phase: float = 0.0
    voltage: float = 208.0
    pilot: PilotModel = field(default_factory=PilotModel)

    @property
    def max_rate(self) -> float:
        return self.pilot.max_rate

    @property
    def min_rate(self) -> float:
        return self.pilot.min_rate

    def to_dict(self) -> dict:
        return {"station_id": self.station_id, "phase": self.phase,
                "voltage": self.voltage, **self.pilot.to_dict()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvseNode":
        return cls(str(d["station_id"]), float(d.get("phase", 0.0)),
                   float(d.get("voltage", 208.0)), PilotModel.from_dict(d))


@dataclass
class PhasorConstraint:
    """Limit on ``|sum_i A_i r_i exp(j phi_i)|``.

    With ``phasor=False`` the phase angles are ignored and the constraint is the
    plain weighted sum ``sum_i A_i r_i`` (used for aggregate power caps, where the
    coefficients are kW per amp and the limit is in kW).
    """

    id: str
    coefficients: Dict[str, float]
    limit: float
    phasor: bool = True

    def __post_init__(self):
        if self.limit < 0:
            raise NetworkError(f"constraint {self.id!r}: negative limit {self.limit}")

    def to_dict(self) -> dict:
        return {"id": self.id, "coefficients": dict(self.coefficients),
                "limit": self.limit, "phasor": self.phasor}

    @classmethod
    def from_dict(cls, d: Mapping) -> "PhasorConstraint":
        return cls(str(d["id"]), {str(k): float(v) for k, v in d["coefficients"].items()},
                   float(d["limit"]), bool(d.get("phasor", True)))


class Network:
    """EVSEs plus the constraints on their charging currents.

    In deterministic mode every EV carries its station id. In stochastic mode
    arrivals take the lowest open station id or wait in a FIFO queue.
    """

    def __init__(self, evses: Iterable[EvseNode] = (), constraints: Iterable[PhasorConstraint] = (),
                 stochastic: bool = False, early_departure: bool = False):
        self.evses: Dict[str, EvseNode] = {}
        for e in evses:
            if e.station_id in self.evses:
                raise NetworkError(f"duplicate station id {e.station_id!r}")
            self.evses[e.station_id] = e
        self.constraints: List[PhasorConstraint] = []
        for c in constraints:
            self.add_constraint(c)
        self.stochastic = stochastic
        self.early_departure = early_departure
        self.plugged: Dict[str, SessionEV] = {}
        self.waiting: deque = deque()
        self.swap_count = 0
        self._compiled = None

    # -- structure -------------------------------------------------------

    @property
    def station_ids(self) -> List[str]:
        return list(self.evses)

    def add_evse(self, evse: EvseNode):
        if evse.station_id in self.evses:
            raise NetworkError(f"duplicate station id {evse.station_id!r}")
        self.evses[evse.station_id] = evse
        self._compiled = None

    def add_constraint(self, c: PhasorConstraint):
        unknown = set(c.coefficients) - set(self.evses)
        if unknown:
            raise NetworkError(f"constraint {c.id!r} references unknown EVSEs {sorted(unknown)}")
        if any(c.id == o.id for o in self.constraints):
            raise NetworkError(f"duplicate constraint id {c.id!r}")
        self.constraints.append(c)
        self._compiled = None

    def copy_structure(self, constraints: Optional[Sequence[PhasorConstraint]] = None) -> "Network":
        """Fresh network with the same EVSEs and (optionally replaced) constraints, no sessions."""
        return Network(
            [EvseNode(e.station_id, e.phase, e.voltage, e.pilot) for e in self.evses.values()],
            [PhasorConstraint(c.id, dict(c.coefficients), c.limit, c.phasor)
             for c in (self.constraints if constraints is None else constraints)],
            stochastic=self.stochastic, early_departure=self.early_departure)

    def compiled(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray, List[str]]:
        """Complex coefficient matrix (constraints x EVSEs), limits, phasor mask, station order."""
        if self._compiled is None:
            ids = self.station_ids
            col = {s: k for k, s in enumerate(ids)}
            M = np.zeros((len(self.constraints), len(ids)), dtype=complex)
            for j, c in enumerate(self.constraints):
                for s, a in c.coefficients.items():
                    k = col[s]
                    if c.phasor:
                        M[j, k] = a * np.exp(1j * math.radians(self.evses[s].phase))
                    else:
                        M[j, k] = a
            limits = np.array([c.limit for c in self.constraints], dtype=float)
            phasor = np.array([c.phasor for c in self.constraints], dtype=bool)
            self._maxes = np.array([self.evses[s].max_rate for s in ids])
            self._compiled = (M, limits, phasor, ids)
        return self._compiled

    def rate_vector(self, rates: Mapping[str, float]) -> np.ndarray:
        _, _, _, ids = self.compiled()
        unknown = set(rates) - set(self.evses)
        if unknown:
            raise NetworkError(f"unknown EVSE ids {sorted(unknown)}")
        r = np.array([float(rates.get(s, 0.0)) for s in ids])
        if np.any(r < 0):
            bad = [s for s in ids if rates.get(s, 0.0) < 0]
            raise NetworkError(f"negative rates for {bad}")
        return r

    # -- constraint evaluation -------------------------------------------

    def constraint_currents_vec(self, r: np.ndarray) -> np.ndarray:
        M, _, phasor, _ = self.compiled()
        z = M @ r
        return np.where(phasor, np.abs(z), z.real)

    def constraint_currents(self, rates: Mapping[str, float]) -> Dict[str, float]:
        vals = self.constraint_currents_vec(self.rate_vector(rates))
        return {c.id: float(v) for c, v in zip(self.constraints, vals)}

    def is_feasible_vec(self, r: np.ndarray, tol: float = FEASIBILITY_TOL) -> bool:
        _, limits, _, ids = self.compiled()
        if np.any(r < -tol):
            return False
        if np.any(r > self._maxes + tol):
            return False
        if not len(limits):
            return True
        return bool(np.all(self.constraint_currents_vec(r) <= limits + tol))

    def is_feasible(self, rates: Mapping[str, float], tol: float = FEASIBILITY_TOL) -> bool:
        if tol < 0:
            raise NetworkError("tolerance must be non-negative")
        return self.is_feasible_vec(self.rate_vector(rates), tol)

    def max_feasible_rate(self, station_id: str, fixed: Mapping[str, float], upper: float,
                          tol: float = BISECTION_TOL) -> float:
        """Largest rate in [0, upper] for ``station_id`` keeping ``fixed`` feasible.

        Bisection is valid because, with the other rates held, the feasible set
        of one coordinate is an interval containing 0.
        """
        if station_id not in self.evses:
            raise NetworkError(f"unknown EVSE id {station_id!r}")
        if upper < 0:
            raise NetworkError("upper bound must be non-negative")
        base = dict(fixed)
        base[station_id] = 0.0
        r = self.rate_vector(base)
        if not self.is_feasible_vec(r):
            raise NetworkError("fixed rates are infeasible on their own")
        k = self.station_ids.index(station_id)
        return _bisect_coordinate(self, r, k, min(upper, self.evses[station_id].max_rate), tol)

    # -- sessions --------------------------------------------------------

    def plug(self, ev: SessionEV, now: int) -> Optional[str]:
        """Attach an arriving EV. Returns the station id, or None if it was queued."""
        if self.stochastic:
            free = self.open_stations()
            if not free:
                self.waiting.append(ev)
                return None
            ev.station_id = free[0]
        elif ev.station_id not in self.evses:
            raise NetworkError(f"EV {ev.session_id!r} arrived at unknown station {ev.station_id!r}")
        if ev.station_id in self.plugged:
            raise NetworkError(f"station {ev.station_id!r} already occupied by "
                               f"{self.plugged[ev.station_id].session_id!r}")
        self.plugged[ev.station_id] = ev
        return ev.station_id

    def unplug(self, session_id: str, now: int) -> Optional[SessionEV]:
        """Detach a session (plugged or still waiting). Returns the EV that took its place, if any."""
        for sid, ev in self.plugged.items():
            if ev.session_id == session_id:
                del self.plugged[sid]
                return self._fill(sid, now)
        for ev in self.waiting:
            if ev.session_id == session_id:
                self.waiting.remove(ev)
                _log.debug("session %s left from the waiting queue", session_id)
                break
        return None

    def _fill(self, station_id: str, now: int) -> Optional[SessionEV]:
        if not (self.stochastic and self.waiting):
            return None
        head = self.waiting.popleft()
        head.arrival = now
        head.station_id = station_id
        self.plugged[station_id] = head
        self.swap_count += 1
        return head

    def finished_sessions(self, tol: float = 1e-6) -> List[SessionEV]:
        """Plugged sessions whose demand is met and whose spot someone is waiting for."""
        if not (self.stochastic and self.early_departure and self.waiting):
            return []
        return [ev for sid, ev in sorted(self.plugged.items()) if remaining_demand(ev) <= tol]

    def open_stations(self) -> List[str]:
        return sorted(s for s in self.evses if s not in self.plugged)

    def session_at(self, station_id: str) -> Optional[SessionEV]:
        return self.plugged.get(station_id)

    # -- persistence -----------------------------------------------------

    def to_dict(self) -> dict:
        return {"evses": [e.to_dict() for e in self.evses.values()],
                "constraints": [c.to_dict() for c in self.constraints],
                "stochastic": self.stochastic, "early_departure": self.early_departure}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Network":
        return cls([EvseNode.from_dict(e) for e in d["evses"]],
                   [PhasorConstraint.from_dict(c) for c in d.get("constraints", [])],
                   stochastic=bool(d.get("stochastic", False)),
                   early_departure=bool(d.get("early_departure", False)))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "Network":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _bisect_coordinate(net: Network, r: np.ndarray, k: int, upper: float, tol: float) -> float:
    r = r.copy()
    r[k] = upper
    if net.is_feasible_vec(r):
        return upper
    lo, hi = 0.0, upper
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        r[k] = mid
        if net.is_feasible_vec(r):
            lo = mid
        else:
            hi = mid
    return lo


def constraint_currents(network: Network, rates: Mapping[str, float]) -> Dict[str, float]:
    return network.constraint_currents(rates)


def is_feasible(network: Network, rates: Mapping[str, float], tolerance: float = FEASIBILITY_TOL) -> bool:
    return network.is_feasible(rates, tolerance)


def max_feasible_rate(network: Network, station_id: str, fixed: Mapping[str, float],
                      upper: float, tol: float = BISECTION_TOL) -> float:
    return network.max_feasible_rate(station_id, fixed, upper, tol)


def build_auto_network(station_ids: Sequence[str], transformer_cap: float, phasing: str = "single",
                       voltage: Optional[float] = None, pilot: Optional[PilotModel] = None,
                       stochastic: bool = False, early_departure: bool = False,
                       aggregate_only: bool = False) -> Network:
    """Simple site where the transformer is the only constraint.

    ``transformer_cap`` is in kW. Single-phase: one row with limit cap/V (default
    208 V). Three-phase: stations go round-robin onto phases 0, -120, 120 degrees
    at the line-to-neutral voltage (default 120 V); each phase gets a line-current
    row with limit cap/(3 V_LN), and an aggregate row caps sum V_i r_i at cap.
    ``aggregate_only`` drops the per-phase rows (a balanced-system assumption).
    """
    if transformer_cap <= 0:
        raise NetworkError("transformer capacity must be positive")
    if not station_ids:
        raise NetworkError("station list is empty")
    pilot = pilot or PilotModel()
    if phasing == "single":
        v = 208.0 if voltage is None else float(voltage)
        evses = [EvseNode(s, 0.0, v, pilot) for s in station_ids]
        cons = [PhasorConstraint("transformer", {s: 1.0 for s in station_ids},
                                 transformer_cap * 1000.0 / v)]
        return Network(evses, cons, stochastic, early_departure)
    if phasing != "three":
        raise NetworkError(f"unknown phasing {phasing!r}")
    v = 120.0 if voltage is None else float(voltage)
    evses = [EvseNode(s, THREE_PHASE_ANGLES[k % 3], v, pilot) for k, s in enumerate(station_ids)]
    cons = []
    if not aggregate_only:
        line_limit = transformer_cap * 1000.0 / (3.0 * v)
        for p, name in zip(THREE_PHASE_ANGLES, "ABC"):
            members = {e.station_id: 1.0 for e in evses if e.phase == p}
            cons.append(PhasorConstraint(f"phase_{name}", members, line_limit))
    cons.append(PhasorConstraint("aggregate_power", {e.station_id: e.voltage / 1000.0 for e in evses},
                                 float(transformer_cap), phasor=False))
    return Network(evses, cons, stochastic, early_departure)


def stochastic_assign(network: Network, ev: SessionEV, now: int) -> Optional[str]:
    """Place an arrival on the lowest open station id; None means it joined the waiting queue."""
    if not network.stochastic:
        raise NetworkError("stochastic_assign requires a stochastic network")
    return network.plug(ev, now)
