"""Discrete-time, event-driven simulation loop and its recorded output."""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from .events import Event, EventQueue, RecomputeEvent
from .hardware import PilotModel, SessionEV, deliverable_energy, remaining_demand
from .network import Network, NetworkError
from .signals import Tariff, TimeSeriesSignal

_log = logging.getLogger(__name__)

ACTIVE_TOL = 1e-6


class SimulationError(RuntimeError):
    pass


@dataclass
class SimConfig:
    period_minutes: float = 5.0
    start: datetime = datetime(2019, 1, 1)
    horizon: Optional[int] = None
    voltage: float = 208.0
    recompute_period: Optional[int] = None

    def __post_init__(self):
        if self.period_minutes <= 0:
            raise ValueError("period length must be positive")
        if self.recompute_period is not None and self.recompute_period < 1:
            raise ValueError("recompute period must be at least one period")

    def datetime_of(self, period: int) -> datetime:
        return self.start + timedelta(minutes=self.period_minutes * period)


@dataclass(frozen=True)
class SessionInfo:
    """What a scheduling algorithm may know about a plugged-in session."""

    session_id: str
    station_id: str
    arrival: int
    estimated_departure: int
    requested_energy: float
    delivered_energy: float
    remaining_demand: float
    max_rate: float


class AlgoView:
    """Read-only window onto the simulation for scheduling algorithms.

    Exposes estimated (never actual) departures and the network's structure
    without its session state.
    """

    def __init__(self, sim: "Simulator"):
        self._sim = sim

    @property
    def now(self) -> int:
        return self._sim.t

    @property
    def period_minutes(self) -> float:
        return self._sim.config.period_minutes

    @property
    def network(self) -> Network:
        return self._sim.structure

    @property
    def sessions(self) -> List[SessionInfo]:
        return self._sim.active_sessions()

    @property
    def tariff(self) -> Optional[Tariff]:
        return self._sim.tariff

    @property
    def signals(self) -> Mapping[str, TimeSeriesSignal]:
        return self._sim.signals

    @property
    def peak_so_far(self) -> float:
        """Highest aggregate kW recorded so far in the current billing month."""
        return self._sim.month_peak()

    def pilot_model(self, station_id: str) -> PilotModel:
        return self._sim.structure.evses[station_id].pilot

    def max_pilot(self, station_id: str) -> float:
        return self.pilot_model(station_id).max_rate

    def voltage(self, station_id: str) -> float:
        return self._sim.structure.evses[station_id].voltage

    def datetime_of(self, period: int) -> datetime:
        return self._sim.config.datetime_of(period)

    def price(self, period: int) -> float:
        if self._sim.tariff is None:
            raise SimulationError("no tariff configured")
        return self._sim.tariff.price_at(self.datetime_of(period))

    def signal_window(self, name: str, first: int, n: int) -> np.ndarray:
        sig = self._sim.signals.get(name)
        return np.zeros(n) if sig is None else sig.window(first, n)

    def is_feasible(self, rates: Mapping[str, float]) -> bool:
        return self._sim.structure.is_feasible(rates)


@dataclass
class SimRecord:
    station_ids: List[str]
    constraint_ids: List[str]
    limits: np.ndarray
    phases: Dict[str, float]
    voltages: Dict[str, float]
    start: datetime
    period_minutes: float
    pilots: Dict[str, np.ndarray]
    actuals: Dict[str, np.ndarray]
    currents: Dict[str, np.ndarray]
    aggregate_power: np.ndarray
    events: List[dict] = field(default_factory=list)
    sessions: List[dict] = field(default_factory=list)
    swaps: int = 0
    diagnostics: List[dict] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)
    algorithm: str = ""

    @property
    def n_periods(self) -> int:
        return len(self.aggregate_power)

    def timestamps(self) -> List[datetime]:
        return [self.start + timedelta(minutes=self.period_minutes * t) for t in range(self.n_periods)]

    def energy_delivered(self) -> float:
        """Total amp-periods delivered over all sessions."""
        return float(sum(s["delivered_energy"] for s in self.sessions))

    def energy_requested(self) -> float:
        return float(sum(s["deliverable_energy"] for s in self.sessions))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["period", "timestamp"]
                   + [f"pilot:{s}" for s in self.station_ids]
                   + [f"actual:{s}" for s in self.station_ids]
                   + [f"current:{c}" for c in self.constraint_ids]
                   + ["aggregate_kw"])
        for t, ts in enumerate(self.timestamps()):
            w.writerow([t, ts.isoformat()]
                       + [_fmt(self.pilots[s][t]) for s in self.station_ids]
                       + [_fmt(self.actuals[s][t]) for s in self.station_ids]
                       + [_fmt(self.currents[c][t]) for c in self.constraint_ids]
                       + [_fmt(self.aggregate_power[t])])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"algorithm": self.algorithm, "start": self.start.isoformat(),
                "period_minutes": self.period_minutes, "n_periods": self.n_periods,
                "stations": [{"station_id": s, "phase": self.phases[s], "voltage": self.voltages[s]}
                             for s in self.station_ids],
                "constraints": [{"id": c, "limit": float(lim)}
                                for c, lim in zip(self.constraint_ids, self.limits)],
                "swaps": self.swaps, "sessions": self.sessions, "events": self.events,
                "diagnostics": self.diagnostics, "warnings": self.warnings}

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "record.csv").write_text(self.to_csv())
        (out / "summary.json").write_text(json.dumps(self.summary(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, out_dir) -> "SimRecord":
        out = Path(out_dir)
        summ = json.loads((out / "summary.json").read_text())
        with open(out / "record.csv", newline="") as f:
            rows = list(csv.reader(f))
        header, body = rows[0], rows[1:]
        cols = {h: np.array([float(r[k]) for r in body]) for k, h in enumerate(header) if k >= 2}
        stations = [s["station_id"] for s in summ["stations"]]
        cons = [c["id"] for c in summ["constraints"]]
        return cls(
            stations, cons, np.array([c["limit"] for c in summ["constraints"]]),
            {s["station_id"]: s["phase"] for s in summ["stations"]},
            {s["station_id"]: s["voltage"] for s in summ["stations"]},
            datetime.fromisoformat(summ["start"]), summ["period_minutes"],
            {s: cols[f"pilot:{s}"] for s in stations}, {s: cols[f"actual:{s}"] for s in stations},
            {c: cols[f"current:{c}"] for c in cons}, cols.get("aggregate_kw", np.zeros(0)),
            summ["events"], summ["sessions"], summ["swaps"], summ["diagnostics"],
            summ["warnings"], summ["algorithm"])


def _fmt(x) -> str:
    return repr(float(x))


class Simulator:
    """Runs one scenario: events in, scheduling algorithm in the loop, SimRecord out.

    ``network`` and the events are copied, so they can seed many runs. Constraint
    currents are always recorded against ``network``, even when an algorithm
    was handed a simplified constraint set of its own.
    """

    def __init__(self, network: Network, algorithm, events, config: Optional[SimConfig] = None,
                 tariff: Optional[Tariff] = None, signals: Optional[Mapping[str, TimeSeriesSignal]] = None):
        self.config = config or SimConfig()
        self.network = network.copy_structure()
        self.structure = network.copy_structure()
        self.algorithm = algorithm
        src = events.events() if isinstance(events, EventQueue) else list(events)
        self.queue = EventQueue(copy.deepcopy(src))
        self.tariff = tariff
        self.signals = dict(signals or {})
        for sig in self.signals.values():
            sig.check_period(self.config.period_minutes)
        self.t = 0
        self.view = AlgoView(self)
        self.sessions: Dict[str, SessionEV] = {}
        self._schedule: Optional[Dict[str, List[float]]] = None
        self._sched_time = 0
        self._done = False
        self._event_log: List[dict] = []
        self._warnings: List[str] = []
        self._diagnostics: List[dict] = []
        self._pilots: List[np.ndarray] = []
        self._actuals: List[np.ndarray] = []
        self._currents: List[np.ndarray] = []
        self._power: List[float] = []
        self._month_peaks: Dict[tuple, float] = {}
        self._ids = self.network.station_ids
        self._volts = np.array([self.network.evses[s].voltage for s in self._ids])
        if self.config.recompute_period:
            self.queue.enqueue(RecomputeEvent(0))

    # -- state queries ---------------------------------------------------

    def active_sessions(self) -> List[SessionInfo]:
        out = []
        for sid in sorted(self.network.plugged):
            ev = self.network.plugged[sid]
            rem = remaining_demand(ev)
            if rem > ACTIVE_TOL:
                out.append(SessionInfo(ev.session_id, sid, ev.arrival, ev.estimated_departure,
                                       ev.requested_energy, ev.delivered_energy, rem, ev.max_rate))
        return out

    def month_peak(self) -> float:
        when = self.config.datetime_of(self.t)
        return self._month_peaks.get((when.year, when.month), 0.0)

    def finished(self) -> bool:
        if self._done:
            return True
        if self.config.horizon is not None and self.t >= self.config.horizon:
            return True
        return self._idle()

    def _idle(self) -> bool:
        return (not self.network.plugged and not self.network.waiting
                and self.queue.has_only("recompute"))

    # -- loop ------------------------------------------------------------

    def _apply(self, e: Event):
        t = self.t
        if e.kind == "plugin":
            ev = e.ev
            try:
                station = self.network.plug(ev, t)
            except NetworkError as exc:
                msg = f"period {t}: session {ev.session_id} not plugged in ({exc})"
                _log.warning(msg)
                self._warnings.append(msg)
                return
            self.sessions[ev.session_id] = ev
            self._log(t, "plugin", ev.session_id, station, None if station else "queued")
        elif e.kind == "unplug":
            plugged = any(ev.session_id == e.session_id for ev in self.network.plugged.values())
            head = self.network.unplug(e.session_id, t)
            self._log(t, "unplug", e.session_id, None, None if plugged else "not plugged")
            if head is not None:
                self._log(t, "swap", head.session_id, head.station_id, None)
        elif e.kind == "recompute":
            if self.config.recompute_period:
                self.queue.enqueue(RecomputeEvent(t + self.config.recompute_period))

    def _log(self, t, kind, session_id, station_id, note):
        entry = {"period": t, "kind": kind, "session_id": session_id}
        if station_id is not None:
            entry["station_id"] = station_id
        if note:
            entry["note"] = note
        self._event_log.append(entry)

    def step(self) -> bool:
        """Advance one period. Returns False once the simulation has finished."""
        if self.finished():
            self._done = True
            return False
        t = self.t
        events = self.queue.pop_due(t)
        for e in events:
            self._apply(e)
        changed = bool(events)
        for ev in self.network.finished_sessions(ACTIVE_TOL):
            if not self.network.waiting:
                break
            head = self.network.unplug(ev.session_id, t)
            self._log(t, "unplug", ev.session_id, None, "early departure")
            if head is not None:
                self._log(t, "swap", head.session_id, head.station_id, None)
            changed = True
        if self._idle():
            # the last event has been executed; nothing left to charge
            self._done = True
            return False
        if changed or self._schedule is None:
            self._run_algorithm()
        pilots = self._current_pilots()
        actual = np.zeros(len(self._ids))
        for k, sid in enumerate(self._ids):
            ev = self.network.plugged.get(sid)
            if ev is None:
                pilots[k] = 0.0
            else:
                actual[k] = ev.charge(pilots[k])
        power = float(actual @ self._volts) / 1000.0
        self._pilots.append(pilots)
        self._actuals.append(actual)
        self._currents.append(self.network.constraint_currents_vec(actual))
        self._power.append(power)
        when = self.config.datetime_of(t)
        key = (when.year, when.month)
        self._month_peaks[key] = max(self._month_peaks.get(key, 0.0), power)
        self.t += 1
        return True

    def _run_algorithm(self):
        try:
            sched = self.algorithm.schedule(self.view)
        except Exception as exc:
            raise SimulationError(f"algorithm {getattr(self.algorithm, 'name', self.algorithm)!r} "
                                  f"failed at period {self.t}: {exc}") from exc
        clean = {}
        for sid, rates in sched.items():
            if sid not in self.network.evses:
                msg = f"period {self.t}: schedule for unknown station {sid!r} ignored"
                _log.warning(msg)
                self._warnings.append(msg)
                continue
            rates = [float(r) for r in np.atleast_1d(rates)]
            clean[sid] = rates if rates else [0.0]
        self._schedule = clean
        self._sched_time = self.t
        diag = getattr(self.algorithm, "last_diagnostics", None)
        if diag:
            self._diagnostics.append({"period": self.t, **diag})

    def _current_pilots(self) -> np.ndarray:
        col = self.t - self._sched_time
        out = np.zeros(len(self._ids))
        for k, sid in enumerate(self._ids):
            rates = self._schedule.get(sid)
            if not rates:
                continue
            r = rates[min(col, len(rates) - 1)]
            if r < 0:
                msg = f"period {self.t}: negative rate {r} for {sid} treated as 0"
                self._warnings.append(msg)
                r = 0.0
            out[k] = self.network.evses[sid].pilot.clamp(r)
        return out

    def run(self) -> SimRecord:
        while self.step():
            pass
        return self.record()

    def record(self) -> SimRecord:
        n = len(self._power)
        ids = self._ids
        P = np.array(self._pilots).reshape(n, len(ids))
        A = np.array(self._actuals).reshape(n, len(ids))
        cids = [c.id for c in self.network.constraints]
        C = np.array(self._currents).reshape(n, len(cids))
        ledger = []
        for ev in sorted(self.sessions.values(), key=lambda e: e.session_id):
            ledger.append({"session_id": ev.session_id, "station_id": ev.station_id,
                           "arrival": ev.arrival, "departure": ev.departure,
                           "estimated_departure": ev.estimated_departure,
                           "requested_energy": ev.requested_energy,
                           "deliverable_energy": deliverable_energy(ev),
                           "delivered_energy": ev.delivered_energy,
                           "estimate_flagged": ev.estimate_flagged})
        return SimRecord(
            ids, cids, np.array([c.limit for c in self.network.constraints]),
            {s: self.network.evses[s].phase for s in ids},
            {s: self.network.evses[s].voltage for s in ids},
            self.config.start, self.config.period_minutes,
            {s: P[:, k].copy() for k, s in enumerate(ids)},
            {s: A[:, k].copy() for k, s in enumerate(ids)},
            {c: C[:, j].copy() for j, c in enumerate(cids)},
            np.array(self._power), list(self._event_log), ledger, self.network.swap_count,
            list(self._diagnostics), list(self._warnings), getattr(self.algorithm, "name", ""))


def step(sim: Simulator) -> bool:
    return sim.step()


def run(sim: Simulator) -> SimRecord:
    return sim.run()


def simulate(network: Network, algorithm, events, config: Optional[SimConfig] = None,
             **kwargs) -> SimRecord:
    return Simulator(network, algorithm, events, config, **kwargs).run()
