"""Receding-horizon scheduler and the perfect-information offline benchmark."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..algorithms import BaseAlgorithm, Schedule, effective_max, rate_cap, repair_quantized
from ..engine import AlgoView
from ..events import EventQueue
from ..hardware import deliverable_energy
from ..network import Network
from .program import (ObjectiveTerm, ProgramContext, ProgramSession, build_program,
                      equal_share, quick_charge, total_energy)
from .solver import solve_qp

_log = logging.getLogger(__name__)

NOISE_FLOOR = 1e-3  # amps; solver output below this is rounding noise


def default_terms() -> List[ObjectiveTerm]:
    return [quick_charge(), equal_share(1e-4)]


def _as_terms(terms) -> List[ObjectiveTerm]:
    if terms is None:
        return default_terms()
    return [t if isinstance(t, ObjectiveTerm) else ObjectiveTerm.from_dict(t) for t in terms]


def _context(view: AlgoView, terms: Sequence[ObjectiveTerm], H: int) -> ProgramContext:
    kinds = {t.kind for t in terms}
    ctx = ProgramContext(period_minutes=view.period_minutes, peak_so_far=view.peak_so_far)
    if view.tariff is not None:
        ctx.demand_charge = view.tariff.demand_charge
    if "energy_cost" in kinds:
        ctx.prices = np.array([view.price(view.now + t) for t in range(H)])
    if "load_flatten" in kinds:
        ctx.external_load = view.signal_window("external_load", view.now, H)
        ctx.solar = view.signal_window("solar", view.now, H)
    return ctx


def repair_column(net: Network, view: AlgoView, rates: Dict[str, float],
                  order: Sequence[str], caps: Dict[str, float]) -> Dict[str, float]:
    """Quantize one period's rates and make them truly feasible.

    Pilots are floored through each EVSE model. Rates the flooring reduced are
    stepped back up by one allowed level where the full network still allows it
    (earliest ``order`` first), then repaired exactly as the sorting algorithms do.
    """
    col = {sid: k for k, sid in enumerate(net.station_ids)}
    r = net.rate_vector({})
    for sid in order:
        r[col[sid]] = view.pilot_model(sid).clamp(max(0.0, rates.get(sid, 0.0)))
    if not net.is_feasible_vec(r, tol=0.0):
        # solver tolerance can leave rows a hair over; scale back onto the feasible set
        r = _scale_into(net, r)
        for sid in order:
            r[col[sid]] = view.pilot_model(sid).clamp(r[col[sid]])
    for sid in order:
        k = col[sid]
        if r[k] >= rates.get(sid, 0.0) - 1e-9:
            continue
        up = view.pilot_model(sid).step_up(r[k])
        if up is None or up > caps[sid] + 1e-9 or up > rates.get(sid, 0.0) + 1.0 + 1e-9:
            continue
        old = r[k]
        r[k] = up
        if not net.is_feasible_vec(r):
            r[k] = old
    repair_quantized(net, r, [col[s] for s in order], [view.pilot_model(s) for s in order])
    return {sid: float(r[col[sid]]) for sid in order}


def _scale_into(net: Network, r: np.ndarray) -> np.ndarray:
    # positive homogeneity: the largest feasible multiple of r, by bisection on the factor
    lo, hi = 0.0, 1.0
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        if net.is_feasible_vec(r * mid, tol=0.0):
            lo = mid
        else:
            hi = mid
    return r * lo


class MPCAlgorithm(BaseAlgorithm):
    """Solve a convex program over the active sessions' estimated windows each call.

    The full rate matrix is returned, so the engine plays successive columns
    until the next event (or recompute tick) triggers a re-solve.
    """

    name = "mpc"

    def __init__(self, terms=None, m: int = 12, max_horizon: Optional[int] = None,
                 energy_constraint: str = "cap", tol: float = 1e-4, max_iters: int = 50_000,
                 network: Optional[Network] = None):
        super().__init__(network)
        self.terms = _as_terms(terms)
        self.m = int(m)
        self.max_horizon = max_horizon
        self.energy_constraint = energy_constraint
        self.tol = tol
        self.max_iters = max_iters

    def horizon(self, view: AlgoView) -> int:
        H = max((s.estimated_departure - view.now for s in view.sessions), default=0)
        H = max(H, 1)
        return min(H, self.max_horizon) if self.max_horizon else H

    def schedule(self, view: AlgoView) -> Schedule:
        sessions = view.sessions
        if not sessions:
            self.last_diagnostics = {}
            return {}
        net = self.planning_network(view)
        H = self.horizon(view)
        prog_sessions = [ProgramSession(s.station_id, 0,
                                        max(1, s.estimated_departure - view.now),
                                        s.remaining_demand, effective_max(view, s))
                         for s in sessions]
        program = build_program(prog_sessions, net, H, self.terms, self.m,
                                _context(view, self.terms, H), self.energy_constraint)
        sol = solve_qp(program.qp, self.tol, self.max_iters)
        R = program.rates(sol.x)
        R[R < NOISE_FLOOR] = 0.0
        order = [s.station_id for s in sorted(sessions, key=lambda s: (s.estimated_departure,
                                                                        s.station_id))]
        caps = {s.station_id: rate_cap(view, s) for s in sessions}
        out: Dict[str, List[float]] = {s.station_id: [] for s in sessions}
        for t in range(H):
            column = {s.station_id: R[i, t] for i, s in enumerate(sessions)}
            fixed = repair_column(net, view, column, order, caps)
            for sid, v in fixed.items():
                out[sid].append(v)
        self.last_diagnostics = {"solver": sol.diagnostics(), "horizon": H}
        if not sol.converged:
            _log.warning("MPC solve at period %d did not converge", view.now)
        return out


def mpc_schedule(view: AlgoView, terms=None, horizon_policy: Optional[int] = None,
                 m: int = 12) -> Schedule:
    """One receding-horizon decision; ``horizon_policy`` caps the look-ahead in periods."""
    return MPCAlgorithm(terms, m, horizon_policy).schedule(view)


@dataclass
class OfflineResult:
    delivered: float  # amp-periods
    objective: float
    upper_bound: float  # certified bound on the objective
    rates: np.ndarray  # sessions x horizon
    session_ids: List[str] = field(default_factory=list)
    converged: bool = True


def offline_optimal(events, network: Network, terms=None, horizon: Optional[int] = None,
                    m: int = 12, outer: bool = True, tol: float = 1e-4,
                    max_iters: int = 50_000) -> OfflineResult:
    """Best schedule with perfect knowledge of every arrival, departure and demand.

    Rates are continuous and batteries ideal, and by default the network rows
    are the circumscribed polygon, so the delivered energy is an upper bound
    for any online algorithm on the same events.
    """
    if network.stochastic:
        raise ValueError("offline optimum needs fixed station assignments (deterministic network)")
    src = events.events() if isinstance(events, EventQueue) else list(events)
    plugins = [e.ev for e in src if e.kind == "plugin"]
    terms = [total_energy()] if terms is None else _as_terms(terms)
    if not plugins:
        return OfflineResult(0.0, 0.0, 0.0, np.zeros((0, 0)))
    for ev in plugins:
        if ev.station_id not in network.evses:
            raise ValueError(f"session {ev.session_id} names unknown station {ev.station_id!r}")
    H = horizon if horizon is not None else max(ev.departure for ev in plugins)
    sessions = [ProgramSession(ev.station_id, ev.arrival, ev.departure, deliverable_energy(ev),
                               min(ev.max_rate, network.evses[ev.station_id].pilot.max_rate))
                for ev in plugins]
    program = build_program(sessions, network, H, terms, m, outer=outer)
    sol = solve_qp(program.qp, tol, max_iters)
    R = program.rates(sol.x)
    delivered = float(sum(min(R[i].sum(), s.demand) for i, s in enumerate(sessions)))
    return OfflineResult(delivered, -sol.value, -sol.bound, R,
                         [ev.session_id for ev in plugins], sol.converged)
