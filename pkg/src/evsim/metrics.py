"""Run-level metrics, capacity sweeps and grid load-profile export."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .algorithms import make_algorithm
from .engine import SimRecord, Simulator
from .hardware import deliverable_energy
from .network import FEASIBILITY_TOL, Network
from .scenario_io import Scenario, auto_network
from .signals import Tariff, billing_cost

_log = logging.getLogger(__name__)


@dataclass
class MetricsReport:
    demand_met: Optional[float]  # None when nothing was requested
    energy_requested: float  # amp-periods, capped by battery room
    energy_delivered: float
    swaps: int
    peak_kw: Optional[float]  # None for the offline bound
    violations: int  # periods with any constraint over its limit
    max_overload: float  # worst excess over a limit (constraint units)
    max_overload_frac: float  # same, relative to that limit
    total_cost: Optional[float] = None
    cost_per_kwh: Optional[float] = None
    energy_cost: Optional[float] = None
    demand_cost: Optional[float] = None
    algorithm: str = ""
    capacity_kw: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


def constraint_violations(record: SimRecord, tol: float = FEASIBILITY_TOL):
    """(violating period count, max excess, max excess / limit) over the run."""
    if not record.constraint_ids or record.n_periods == 0:
        return 0, 0.0, 0.0
    C = np.column_stack([record.currents[c] for c in record.constraint_ids])
    lim = np.asarray(record.limits, float)
    excess = C - lim
    bad = np.any(excess > tol, axis=1)
    worst = float(max(0.0, excess.max()))
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(lim > 0, excess / lim, np.where(excess > tol, np.inf, 0.0))
    return int(bad.sum()), worst, float(max(0.0, rel.max()))


def compute_metrics(record: SimRecord, tariff: Optional[Tariff] = None) -> MetricsReport:
    requested = float(sum(s["deliverable_energy"] for s in record.sessions))
    delivered = float(sum(s["delivered_energy"] for s in record.sessions))
    demand_met = None
    if record.sessions and requested > 0:
        demand_met = min(1.0, delivered / requested)
    n_bad, worst, worst_rel = constraint_violations(record)
    peak = float(record.aggregate_power.max()) if record.n_periods else 0.0
    rep = MetricsReport(demand_met, requested, delivered, int(record.swaps), peak, n_bad, worst,
                        worst_rel, algorithm=record.algorithm)
    if tariff is not None:
        if record.n_periods:
            bill = billing_cost(record, tariff)
            rep.total_cost, rep.cost_per_kwh = bill.total, bill.per_kwh
            rep.energy_cost, rep.demand_cost = bill.energy_cost, bill.demand_cost
        else:
            rep.total_cost, rep.energy_cost, rep.demand_cost = 0.0, 0.0, 0.0
    return rep


def run_scenario(scenario: Scenario, algorithm: Optional[str] = None,
                 network: Optional[Network] = None) -> SimRecord:
    name = algorithm or scenario.algorithm
    params = scenario.algorithm_params if name == scenario.algorithm else {}
    algo = make_algorithm(name, **params)
    sim = Simulator(network or scenario.network, algo, scenario.events, scenario.config,
                    scenario.tariff, scenario.signals)
    return sim.run()


# -- capacity sweeps ------------------------------------------------------

SWEEP_FIELDS = ("capacity_kw", "algorithm", "demand_met", "energy_delivered", "energy_requested",
                "swaps", "peak_kw", "violations", "max_overload", "max_overload_frac",
                "total_cost", "cost_per_kwh")


def _sweep_cell(args):
    scenario, name, cap = args
    net = auto_network(scenario.auto, cap)
    if name == "offline":
        from .mpc import offline_optimal
        res = offline_optimal(scenario.events, net)
        requested = float(sum(deliverable_energy(e.ev) for e in scenario.events.events()
                              if e.kind == "plugin"))
        met = min(1.0, res.delivered / requested) if requested > 0 else None
        return MetricsReport(met, requested, res.delivered, 0, None, 0, 0.0, 0.0,
                             algorithm="offline", capacity_kw=cap)
    rep = compute_metrics(run_scenario(scenario, name, net), scenario.tariff)
    rep.capacity_kw = cap
    return rep


def capacity_sweep(scenario: Scenario, algorithms: Sequence[str], capacities: Sequence[float],
                   offline: bool = True, jobs: int = 1) -> List[MetricsReport]:
    """One run per (algorithm, capacity) on auto-built networks, plus the offline bound.

    Rows come back sorted by (capacity, algorithm) regardless of ``jobs``.
    """
    if scenario.auto is None:
        raise ValueError("capacity sweeps need an auto-built network in the scenario")
    names = list(algorithms) + (["offline"] if offline and not scenario.auto.get("stochastic") else [])
    cells = [(scenario, name, float(cap)) for cap in capacities for name in names]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_cell, cells))
    else:
        rows = [_sweep_cell(c) for c in cells]
    return sorted(rows, key=lambda r: (r.capacity_kw, r.algorithm))


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def sweep_csv(rows: Sequence[MetricsReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_FIELDS)
    for r in sorted(rows, key=lambda r: (r.capacity_kw, r.algorithm)):
        d = r.to_dict()
        w.writerow([_cell(d[f]) for f in SWEEP_FIELDS])
    return buf.getvalue()


# -- load profiles --------------------------------------------------------

def _phase_label(angle: float) -> str:
    names = {0.0: "A", -120.0: "B", 120.0: "C"}
    return f"kw_phase_{names.get(float(angle), f'{angle:g}deg')}"


def export_load_profile(record: SimRecord, phases: bool = False) -> str:
    """CSV of per-period aggregate kW, plus kW per phase angle when ``phases``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["timestamp", "total_kw"]
    groups: Dict[float, List[str]] = {}
    if phases:
        for s in record.station_ids:
            groups.setdefault(float(record.phases[s]), []).append(s)
        header += [_phase_label(a) for a in groups]
    w.writerow(header)
    per_phase = {a: sum((record.actuals[s] * record.voltages[s] / 1000.0 for s in ss),
                        np.zeros(record.n_periods))
                 for a, ss in groups.items()}
    for t, when in enumerate(record.timestamps()):
        row = [when.isoformat(), repr(float(record.aggregate_power[t]))]
        row += [repr(float(per_phase[a][t])) for a in groups]
        w.writerow(row)
    return buf.getvalue()
