"""Scenario configs, session-record ingestion and Gaussian-mixture event generation.

A scenario is one JSON document; every file it names is resolved relative
to the document's own directory. See ``configs/SCHEMA.md`` for the fields.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence
from zoneinfo import ZoneInfo

import numpy as np

from .engine import SimConfig
from .events import EventQueue, PluginEvent, UnplugEvent
from .hardware import PilotModel, SessionEV, kwh_to_amp_periods, make_battery
from .network import Network, build_auto_network
from .signals import BUILTIN_TARIFFS, Tariff, TimeSeriesSignal, builtin_tariff

_log = logging.getLogger(__name__)

MAX_REDRAWS = 100

# canonical field -> key in the session file; override per scenario with "field_map"
DEFAULT_FIELDS = {
    "session_id": "session_id",
    "station_id": "station_id",
    "connection_time": "connection_time",
    "disconnect_time": "disconnect_time",
    "energy_kwh": "energy_kwh",
    "estimated_departure": "estimated_departure",
    "requested_kwh": "requested_kwh",
}


class ScenarioError(ValueError):
    pass


@dataclass
class BatterySpec:
    """How to attach a battery to every generated or ingested session.

    ``capacity_kwh=None`` sizes each battery to its own request, so the full
    request is always deliverable.
    """

    kind: str = "ideal"
    capacity_kwh: Optional[float] = None
    max_rate: float = 32.0
    threshold: float = 0.8

    @classmethod
    def from_dict(cls, d: Optional[Mapping]) -> "BatterySpec":
        d = dict(d or {})
        spec = cls(d.get("kind", "ideal"), d.get("capacity_kwh"), float(d.get("max_rate", 32.0)),
                   float(d.get("threshold", 0.8)))
        if spec.kind not in ("ideal", "two_stage"):
            raise ScenarioError(f"unknown battery kind {spec.kind!r}")
        return spec

    def build(self, demand: float, voltage: float, period_minutes: float):
        cap = demand
        if self.capacity_kwh is not None:
            cap = max(demand, kwh_to_amp_periods(self.capacity_kwh, voltage, period_minutes))
        return make_battery(demand, max(cap, 1e-9), self.max_rate, self.kind, self.threshold)


# -- time handling ------------------------------------------------------

def parse_time(value, tz: Optional[ZoneInfo]) -> datetime:
    """ISO string (or datetime) to a naive wall-clock time in the scenario timezone."""
    when = value if isinstance(value, datetime) else datetime.fromisoformat(str(value))
    if when.tzinfo is not None:
        if tz is not None:
            when = when.astimezone(tz)
        when = when.replace(tzinfo=None)
    return when


def to_period(when: datetime, start: datetime, period_minutes: float, snap: str = "floor") -> int:
    """Period index of ``when``; ``snap`` is floor (arrivals) or ceil (departures)."""
    x = (when - start).total_seconds() / 60.0 / period_minutes
    # the 1e-9 absorbs float noise from exact grid times
    return int(math.floor(x + 1e-9)) if snap == "floor" else int(math.ceil(x - 1e-9))


# -- session files ------------------------------------------------------

def read_session_file(path) -> List[dict]:
    """JSON list of records, a JSON object with a ``sessions`` list, or JSON lines."""
    text = Path(path).read_text()
    if not text.strip():
        return []
    try:
        data = json.loads(text)
    except json.JSONDecodeError:
        return [json.loads(line) for line in text.splitlines() if line.strip()]
    if isinstance(data, dict):
        data = data.get("sessions", data.get("_items", []))
    return list(data)


def sessions_to_events(records: Sequence[Mapping], config: SimConfig,
                       network: Optional[Network] = None, battery: Optional[BatterySpec] = None,
                       timezone: Optional[str] = None, field_map: Optional[Mapping] = None,
                       estimate_noise: float = 0.0, seed: Optional[int] = None) -> EventQueue:
    """One plugin and one unplug event per valid record.

    Arrivals are floored and departures ceiled onto the period grid. Malformed
    records and records with no duration left after snapping are skipped with
    a log line. A missing estimate falls back to the actual departure and the
    session is flagged. ``estimate_noise`` adds Gaussian noise (std, in
    periods) to the estimates that were given.
    """
    fields = {**DEFAULT_FIELDS, **(field_map or {})}
    tz = ZoneInfo(timezone) if timezone else None
    battery = battery or BatterySpec()
    rng = np.random.default_rng(seed)
    queue = EventQueue()
    P = config.period_minutes
    for n, rec in enumerate(records):
        try:
            sid = str(rec[fields["session_id"]])
            station = rec.get(fields["station_id"])
            t0 = parse_time(rec[fields["connection_time"]], tz)
            t1 = parse_time(rec[fields["disconnect_time"]], tz)
            energy = float(rec[fields["energy_kwh"]])
            req = rec.get(fields["requested_kwh"])
            req = energy if req is None else float(req)
            est_raw = rec.get(fields["estimated_departure"])
            if t1 <= t0 or energy < 0 or req < 0:
                raise ValueError("disconnect must follow connect and energy must be non-negative")
        except (KeyError, TypeError, ValueError) as exc:
            _log.warning("skipping malformed session record %d: %s", n, exc)
            continue
        if network is not None and not network.stochastic and station not in network.evses:
            _log.warning("skipping session %s: unknown station %r", sid, station)
            continue
        arrival = to_period(t0, config.start, P, "floor")
        departure = to_period(t1, config.start, P, "ceil")
        if arrival < 0:
            _log.warning("skipping session %s: connects before the simulation start", sid)
            continue
        if departure <= arrival:
            _log.warning("dropping session %s: zero duration after snapping", sid)
            continue
        flagged = est_raw is None
        if flagged:
            est = departure
        else:
            est = to_period(parse_time(est_raw, tz), config.start, P, "ceil")
            if estimate_noise > 0:
                est += int(round(rng.normal(0.0, estimate_noise)))
            est = max(est, arrival + 1)
        volts = config.voltage
        if network is not None and station in network.evses:
            volts = network.evses[station].voltage
        demand = kwh_to_amp_periods(req, volts, P) if req > 0 else 0.0
        ev = SessionEV(sid, None if network is not None and network.stochastic else station,
                       arrival, departure, demand, battery.build(demand, volts, P), est,
                       estimate_flagged=flagged)
        queue.enqueue(PluginEvent(arrival, ev))
        queue.enqueue(UnplugEvent(departure, sid))
    return queue


# -- Gaussian mixture ---------------------------------------------------

@dataclass
class MixtureComponent:
    weight: float
    mean: np.ndarray  # (arrival hour, sojourn hours, energy kWh)
    covariance: np.ndarray


@dataclass
class MixtureSpec:
    components: List[MixtureComponent]
    arrivals_per_day: float = 100.0
    arrival_process: str = "fixed"  # or "poisson"
    weekday_mask: Sequence[bool] = (True, True, True, True, True, False, False)

    def __post_init__(self):
        if not self.components:
            raise ScenarioError("mixture needs at least one component")
        w = np.array([c.weight for c in self.components], float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-6:
            raise ScenarioError(f"mixture weights must be non-negative and sum to 1 (got {w.sum():.6g})")
        for k, c in enumerate(self.components):
            c.mean = np.asarray(c.mean, float)
            c.covariance = np.asarray(c.covariance, float)
            if c.mean.shape != (3,) or c.covariance.shape != (3, 3):
                raise ScenarioError(f"component {k}: mean must have 3 entries, covariance 3x3")
            if not np.allclose(c.covariance, c.covariance.T, atol=1e-9):
                raise ScenarioError(f"component {k}: covariance is not symmetric")
            if np.linalg.eigvalsh(c.covariance).min() < -1e-9:
                raise ScenarioError(f"component {k}: covariance is not positive semidefinite")
        if self.arrival_process not in ("fixed", "poisson"):
            raise ScenarioError(f"unknown arrival process {self.arrival_process!r}")
        if len(self.weekday_mask) != 7:
            raise ScenarioError("weekday mask needs 7 entries (Monday first)")

    @classmethod
    def from_dict(cls, d: Mapping) -> "MixtureSpec":
        comps = [MixtureComponent(float(c["weight"]), c["mean"], c["covariance"])
                 for c in d["components"]]
        arr = d.get("arrivals_per_day", 100)
        if isinstance(arr, Mapping):
            return cls(comps, float(arr.get("value", 100)), arr.get("kind", "fixed"),
                       tuple(d.get("weekday_mask", cls.weekday_mask)))
        return cls(comps, float(arr), d.get("arrival_process", "fixed"),
                   tuple(d.get("weekday_mask", cls.weekday_mask)))

    @classmethod
    def load(cls, path) -> "MixtureSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _draw(spec: MixtureSpec, rng: np.random.Generator) -> np.ndarray:
    w = np.array([c.weight for c in spec.components])
    for _ in range(MAX_REDRAWS + 1):
        c = spec.components[rng.choice(len(w), p=w)]
        x = rng.multivariate_normal(c.mean, c.covariance, method="eigh")
        if x[1] > 0 and x[2] > 0 and 0 <= x[0] < 24:
            return x
    raise ScenarioError(f"rejection sampling failed {MAX_REDRAWS} redraws; check the mixture")


def sample_events(spec: MixtureSpec, days: int, seed: int, config: Optional[SimConfig] = None,
                  battery: Optional[BatterySpec] = None, voltage: Optional[float] = None) -> EventQueue:
    """Synthetic arrivals: N per enabled weekday, each (arrival hour, sojourn, kWh) from the mixture.

    Sessions carry no station id; they suit stochastic networks, or
    :func:`assign_stations` for fixed ones.
    """
    config = config or SimConfig()
    battery = battery or BatterySpec()
    volts = voltage or config.voltage
    P = config.period_minutes
    rng = np.random.default_rng(seed)
    queue = EventQueue()
    day0 = datetime(config.start.year, config.start.month, config.start.day)
    offset_min = (day0 - config.start).total_seconds() / 60.0
    for d in range(days):
        date = day0 + timedelta(days=d)
        if not spec.weekday_mask[date.weekday()]:
            continue
        n = int(spec.arrivals_per_day) if spec.arrival_process == "fixed" \
            else int(rng.poisson(spec.arrivals_per_day))
        for k in range(n):
            hour, sojourn, kwh = _draw(spec, rng)
            m0 = offset_min + (d * 24 + hour) * 60.0
            arrival = max(0, int(math.floor(m0 / P + 1e-9)))
            departure = max(arrival + 1, int(math.ceil((m0 + sojourn * 60.0) / P - 1e-9)))
            demand = kwh_to_amp_periods(kwh, volts, P)
            ev = SessionEV(f"d{d:03d}-{k:04d}", None, arrival, departure, demand,
                           battery.build(demand, volts, P))
            queue.enqueue(PluginEvent(arrival, ev))
            queue.enqueue(UnplugEvent(departure, ev.session_id))
    return queue


def assign_stations(queue: EventQueue, station_ids: Sequence[str]) -> EventQueue:
    """Give each session the lowest-id station free for its whole stay; drop the rest.

    Used to run unassigned (sampled) sessions on deterministic networks.
    """
    events = queue.events()
    plugins = sorted((e for e in events if e.kind == "plugin"),
                     key=lambda e: (e.timestamp, e.sequence))
    busy_until = {s: 0 for s in sorted(station_ids)}
    kept = set()
    for e in plugins:
        free = [s for s, t in busy_until.items() if t <= e.ev.arrival]
        if not free:
            _log.info("no free station for session %s; dropped", e.ev.session_id)
            continue
        e.ev.station_id = free[0]
        busy_until[free[0]] = e.ev.departure
        kept.add(e.ev.session_id)
    out = EventQueue()
    for e in events:
        sid = e.ev.session_id if e.kind == "plugin" else e.session_id
        if e.kind == "recompute" or sid in kept:
            out.enqueue(e)
    return out


# -- scenario documents -------------------------------------------------

@dataclass
class Scenario:
    name: str
    config: SimConfig
    network: Network
    events: EventQueue
    algorithm: str = "llf"
    algorithm_params: dict = field(default_factory=dict)
    tariff: Optional[Tariff] = None
    signals: Dict[str, TimeSeriesSignal] = field(default_factory=dict)
    seed: int = 0
    auto: Optional[dict] = None  # auto-network parameters, used by capacity sweeps
    sweep: dict = field(default_factory=dict)


def _resolve(base: Path, value) -> Path:
    p = Path(value)
    return p if p.is_absolute() else base / p


def _need_file(path: Path, what: str) -> Path:
    if not path.is_file():
        raise ScenarioError(f"{what} file not found: {path}")
    return path


def load_tariff(spec, base: Path) -> Optional[Tariff]:
    if spec is None:
        return None
    if isinstance(spec, Mapping):
        return Tariff.from_dict(spec)
    if spec in BUILTIN_TARIFFS:
        return builtin_tariff(spec)
    return Tariff.load(_need_file(_resolve(base, spec), "tariff"))


def auto_network(auto: Mapping, capacity: Optional[float] = None, aggregate_only: bool = False) -> Network:
    ids = auto.get("stations") or [f"S{k + 1:02d}" for k in range(int(auto["n_stations"]))]
    pilot = PilotModel.from_dict(auto["pilot"]) if "pilot" in auto else None
    return build_auto_network(list(ids), float(capacity if capacity is not None else auto["transformer_cap"]),
                              auto.get("phasing", "single"), auto.get("voltage"), pilot,
                              bool(auto.get("stochastic", False)), bool(auto.get("early_departure", False)),
                              aggregate_only)


def load_scenario(path, seed: Optional[int] = None) -> Scenario:
    """Read a scenario document and everything it references."""
    path = Path(path)
    _need_file(path, "scenario config")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: invalid JSON ({exc})") from exc
    base = path.parent
    tzname = doc.get("timezone")
    tz = ZoneInfo(tzname) if tzname else None
    start = parse_time(doc.get("start", "2019-01-01T00:00:00"), tz)
    config = SimConfig(float(doc.get("period_minutes", 5)), start, doc.get("horizon"),
                       float(doc.get("voltage", 208.0)), doc.get("recompute_period"))
    seed = int(doc.get("seed", 0)) if seed is None else int(seed)

    net_doc = doc.get("network")
    if net_doc is None:
        raise ScenarioError(f"{path}: missing 'network'")
    auto = None
    if isinstance(net_doc, str) or "file" in net_doc:
        net_path = _need_file(_resolve(base, net_doc if isinstance(net_doc, str) else net_doc["file"]),
                              "network")
        network = Network.load(net_path)
    else:
        auto = dict(net_doc["auto"])
        network = auto_network(auto)

    battery = BatterySpec.from_dict(doc.get("battery"))
    ev_doc = doc.get("events", {})
    if "sessions" in ev_doc:
        records = read_session_file(_need_file(_resolve(base, ev_doc["sessions"]), "sessions"))
        events = sessions_to_events(records, config, network, battery, tzname, ev_doc.get("field_map"),
                                    float(ev_doc.get("estimate_noise", 0.0)), seed)
    elif "mixture" in ev_doc:
        mix = ev_doc["mixture"]
        spec = MixtureSpec.from_dict(mix) if isinstance(mix, Mapping) else \
            MixtureSpec.load(_need_file(_resolve(base, mix), "mixture"))
        volts = next(iter(network.evses.values())).voltage if network.evses else config.voltage
        events = sample_events(spec, int(ev_doc.get("days", 1)), seed, config, battery, volts)
        if not network.stochastic:
            events = assign_stations(events, network.station_ids)
    elif "events" in ev_doc:
        events = EventQueue.from_jsonl(_need_file(_resolve(base, ev_doc["events"]), "events"))
    else:
        raise ScenarioError(f"{path}: 'events' needs one of sessions, mixture or events")

    algo = doc.get("algorithm", "llf")
    if isinstance(algo, Mapping):
        algo_name, algo_params = algo["name"], dict(algo.get("params", {}))
    else:
        algo_name, algo_params = str(algo), {}

    signals = {}
    for name, sig_path in (doc.get("signals") or {}).items():
        signals[name] = TimeSeriesSignal.from_csv(_need_file(_resolve(base, sig_path), f"signal {name!r}"),
                                                  name)
    return Scenario(doc.get("name", path.stem), config, network, events, algo_name, algo_params,
                    load_tariff(doc.get("tariff"), base), signals, seed, auto, dict(doc.get("sweep", {})))
