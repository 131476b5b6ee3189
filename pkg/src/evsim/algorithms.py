"""Baseline online scheduling algorithms.

Every algorithm maps an :class:`~evsim.engine.AlgoView` to a schedule
``{station_id: [amps, ...]}``; entry k applies k periods after the call.
"""

from __future__ import annotations

import logging
from collections import deque
from typing import Callable, Dict, List, Mapping, Optional, Sequence

from .engine import AlgoView, SessionInfo
from .network import BISECTION_TOL, Network, _bisect_coordinate

_log = logging.getLogger(__name__)

Schedule = Dict[str, List[float]]


class BaseAlgorithm:
    """Subclasses implement :meth:`schedule`.

    ``network`` substitutes the constraint set the algorithm plans against
    (same EVSEs); the simulator still measures currents on the real network.
    """

    name = "base"

    def __init__(self, network: Optional[Network] = None):
        self.constraint_network = network
        self.last_diagnostics: dict = {}

    def planning_network(self, view: AlgoView) -> Network:
        return self.constraint_network if self.constraint_network is not None else view.network

    def schedule(self, view: AlgoView) -> Schedule:
        raise NotImplementedError


def effective_max(view: AlgoView, s: SessionInfo) -> float:
    return min(s.max_rate, view.max_pilot(s.station_id))


def rate_cap(view: AlgoView, s: SessionInfo) -> float:
    """Largest useful pilot: charger, EVSE and remaining-demand limits, rounded up to an allowed value."""
    return view.pilot_model(s.station_id).ceil(min(effective_max(view, s), s.remaining_demand))


def laxity(s: SessionInfo, now: int, max_rate: float) -> float:
    return (s.estimated_departure - now) - s.remaining_demand / max_rate


class UncontrolledCharging(BaseAlgorithm):
    """Every active EV at its EVSE's maximum pilot; constraints ignored."""

    name = "uncontrolled"

    def schedule(self, view: AlgoView) -> Schedule:
        return {s.station_id: [view.max_pilot(s.station_id)] for s in view.sessions}


class RoundRobin(BaseAlgorithm):
    name = "round_robin"

    def schedule(self, view: AlgoView) -> Schedule:
        net = self.planning_network(view)
        sessions = sorted(view.sessions, key=lambda s: (s.arrival, s.station_id))
        if not sessions:
            return {}
        ids = net.station_ids
        col = {sid: k for k, sid in enumerate(ids)}
        r = net.rate_vector({})
        caps = {s.station_id: rate_cap(view, s) for s in sessions}
        queue = deque(s.station_id for s in sessions)
        while queue:
            sid = queue.popleft()
            k = col[sid]
            model = view.pilot_model(sid)
            nxt = model.step_up(r[k])
            if nxt is not None and nxt > caps[sid] + 1e-9:
                nxt = caps[sid] if model.kind != "finite" and caps[sid] > r[k] + 1e-9 else None
            if nxt is None:
                continue
            old = r[k]
            r[k] = nxt
            if net.is_feasible_vec(r):
                queue.append(sid)
            else:
                r[k] = old
        return {s.station_id: [float(r[col[s.station_id]])] for s in sessions}


SORT_KEYS: Dict[str, Callable] = {
    "fcfs": lambda view, s: (s.arrival, s.station_id),
    "lcfs": lambda view, s: (-s.arrival, s.station_id),
    "edf": lambda view, s: (s.estimated_departure, s.station_id),
    "lrpt": lambda view, s: (-s.remaining_demand / effective_max(view, s), s.station_id),
    "llf": lambda view, s: (laxity(s, view.now, effective_max(view, s)), s.station_id),
}


class SortedSchedulingAlgo(BaseAlgorithm):
    """Sort active EVs by a metric, then give each its largest feasible rate in turn."""

    def __init__(self, key: str, network: Optional[Network] = None):
        super().__init__(network)
        if key not in SORT_KEYS:
            raise ValueError(f"unknown sort key {key!r}; choose from {sorted(SORT_KEYS)}")
        self.key = key
        self.name = key

    def schedule(self, view: AlgoView) -> Schedule:
        net = self.planning_network(view)
        order = sorted(view.sessions, key=lambda s: SORT_KEYS[self.key](view, s))
        if not order:
            self.last_diagnostics = {}
            return {}
        col = {sid: k for k, sid in enumerate(net.station_ids)}
        r = net.rate_vector({})
        for s in order:
            k = col[s.station_id]
            model = view.pilot_model(s.station_id)
            cap = rate_cap(view, s)
            best = _bisect_coordinate(net, r, k, cap, BISECTION_TOL)
            q = model.clamp(best)
            up = model.step_up(q)
            if up is not None and up <= min(cap, best + BISECTION_TOL) + 1e-9:
                r[k] = up
                if net.is_feasible_vec(r):
                    q = up
            r[k] = q
        sids = [s.station_id for s in order]
        repairs = repair_quantized(net, r, [col[sid] for sid in sids],
                                   [view.pilot_model(sid) for sid in sids])
        self.last_diagnostics = {"quantization_repairs": repairs} if repairs else {}
        return {sid: [float(r[col[sid]])] for sid in sids}


def repair_quantized(net: Network, r, order: Sequence[int], models: Sequence) -> int:
    """Make ``r`` feasible in place by stepping rates down in reverse processing order.

    One pass of single-step reductions first; if that is not enough the
    last-processed EVs are zeroed one by one. Returns the number of changes.
    """
    if net.is_feasible_vec(r):
        return 0
    changes = 0
    for k, model in zip(reversed(order), reversed(models)):
        if r[k] > 0:
            r[k] = model.step_down(r[k])
            changes += 1
            if net.is_feasible_vec(r):
                return changes
    for k in reversed(order):
        if r[k] > 0:
            r[k] = 0.0
            changes += 1
            _log.info("quantization repair zeroed station index %d", k)
            if net.is_feasible_vec(r):
                return changes
    return changes


def sorted_schedule(view: AlgoView, key: str, network: Optional[Network] = None) -> Schedule:
    return SortedSchedulingAlgo(key, network).schedule(view)


def round_robin(view: AlgoView, network: Optional[Network] = None) -> Schedule:
    return RoundRobin(network).schedule(view)


def uncontrolled(view: AlgoView) -> Schedule:
    return UncontrolledCharging().schedule(view)


ALGORITHM_NAMES = ("uncontrolled", "round_robin", "fcfs", "lcfs", "edf", "lrpt", "llf", "mpc")


def make_algorithm(name: str, network: Optional[Network] = None, **params) -> BaseAlgorithm:
    """Build an algorithm by its config name."""
    if name == "uncontrolled":
        return UncontrolledCharging()
    if name == "round_robin":
        return RoundRobin(network)
    if name in SORT_KEYS:
        return SortedSchedulingAlgo(name, network)
    if name == "mpc":
        from .mpc import MPCAlgorithm
        return MPCAlgorithm(network=network, **params)
    raise ValueError(f"unknown algorithm {name!r}; choose from {ALGORITHM_NAMES}")
