"""Shared builders and independent oracles for the test suite."""

from __future__ import annotations

import cmath
import itertools
import math
from typing import Dict, List, Sequence

import numpy as np

from evsim.algorithms import UncontrolledCharging
from evsim.engine import SimConfig, Simulator
from evsim.events import EventQueue, PluginEvent, UnplugEvent
from evsim.hardware import PilotModel, SessionEV, make_battery
from evsim.network import EvseNode, Network, PhasorConstraint


def ev(sid, station, arrival, departure, demand, capacity=None, max_rate=32.0, est=None,
       kind="ideal"):
    cap = demand if capacity is None else capacity
    return SessionEV(sid, station, arrival, departure, float(demand),
                     make_battery(demand, max(cap, 1e-9), max_rate, kind), est)


def queue_of(evs: Sequence[SessionEV]) -> EventQueue:
    q = EventQueue()
    for e in evs:
        q.enqueue(PluginEvent(e.arrival, e))
        q.enqueue(UnplugEvent(e.departure, e.session_id))
    return q


def single_phase(ids, limit, pilot=None) -> Network:
    pilot = pilot or PilotModel()
    return Network([EvseNode(s, 0.0, 208.0, pilot) for s in ids],
                   [PhasorConstraint("cap", {s: 1.0 for s in ids}, limit)])


def unconstrained(ids, pilot=None) -> Network:
    pilot = pilot or PilotModel()
    return Network([EvseNode(s, 0.0, 208.0, pilot) for s in ids], [])


def view_with(network: Network, evs: Sequence[SessionEV], now: int = 0, config=None, **kw):
    """An AlgoView with ``evs`` already plugged in at period ``now``."""
    sim = Simulator(network, UncontrolledCharging(), [], config or SimConfig(), **kw)
    sim.t = now
    for e in evs:
        sim.network.plug(e, now)
    return sim.view


def brute_currents(network: Network, rates: Dict[str, float]) -> Dict[str, float]:
    """Constraint currents from scratch with cmath, one term at a time."""
    out = {}
    for c in network.constraints:
        if c.phasor:
            z = 0j
            for sid, a in c.coefficients.items():
                phi = math.radians(network.evses[sid].phase)
                z += a * rates.get(sid, 0.0) * cmath.exp(1j * phi)
            out[c.id] = abs(z)
        else:
            out[c.id] = sum(a * rates.get(sid, 0.0) for sid, a in c.coefficients.items())
    return out


def brute_feasible(network: Network, rates: Dict[str, float], tol=1e-6) -> bool:
    for sid, r in rates.items():
        if r < 0 or r > network.evses[sid].pilot.max_rate:
            return False
    cur = brute_currents(network, rates)
    return all(cur[c.id] <= c.limit + tol for c in network.constraints)


def grid_oracle(program, step: float = 1.0) -> float:
    """Exhaustive search over a rate grid for a charging program.

    Every variable takes values on ``step`` multiples within its box; per-period
    rows must hold for each column and the per-session energy caps (or exact
    energies in equality mode) over the horizon. Demands must be multiples of
    ``step``. Returns the best maximization objective. Exploits per-period
    separability with a DP over remaining demand.
    """
    qp = program.qp
    H = program.horizon
    S = len(program.sessions)
    assert program.peak_var is None
    equality = qp.E.shape[0] > 0
    # split G rows: energy caps touch one session over several periods
    G = qp.G.tocsr()
    per_t_rows: Dict[int, List[int]] = {t: [] for t in range(H)}
    var_t = {k: t for (i, t), k in program.index.items()}
    for row in range(G.shape[0]):
        cols = G.indices[G.indptr[row]:G.indptr[row + 1]]
        ts = {var_t[k] for k in cols}
        if len(ts) == 1:
            per_t_rows[ts.pop()].append(row)
    demand = np.array([s.demand for s in program.sessions])
    units = np.round(demand / step).astype(int)
    for i, s in enumerate(program.sessions):
        cap_total = sum(qp.ub[k] for (j, t), k in program.index.items() if j == i)
        units[i] = min(units[i], int(math.floor(cap_total / step + 1e-9)))
    base = qp.value(np.zeros(qp.n))
    shape = tuple(u + 1 for u in units)
    V = np.zeros(shape)  # best gain from period t on, given remaining units
    if equality:
        V[:] = -np.inf
        V[(0,) * S] = 0.0
    for t in reversed(range(H)):
        ks = [program.index.get((i, t)) for i in range(S)]
        ranges = [range(int(math.floor(qp.ub[k] / step + 1e-9)) + 1) if k is not None else range(1)
                  for k in ks]
        Vn = np.full(shape, -np.inf)
        for combo in itertools.product(*ranges):
            x = np.zeros(qp.n)
            for i, k in enumerate(ks):
                if k is not None:
                    x[k] = combo[i] * step
            rows = per_t_rows[t]
            if rows and np.any(G[rows] @ x > qp.h[rows] + 1e-9):
                continue
            if any(c > u for c, u in zip(combo, units)):
                continue
            gain = -(qp.value(x) - base)
            # Vn[rem] = max(gain + V[rem - combo]) for rem >= combo
            src = tuple(slice(0, u + 1 - c) for c, u in zip(combo, units))
            dst = tuple(slice(c, u + 1) for c, u in zip(combo, units))
            np.maximum(Vn[dst], gain + V[src], out=Vn[dst])
        V = Vn
    return float(-base + V[tuple(units)])


def random_network(rng: np.random.Generator, n_evse=None, n_cons=None) -> Network:
    n_evse = n_evse or int(rng.integers(1, 6))
    n_cons = n_cons if n_cons is not None else int(rng.integers(1, 5))
    ids = [f"E{k}" for k in range(n_evse)]
    angles = [0.0, -120.0, 120.0, 30.0, -90.0, 150.0]
    evses = [EvseNode(s, float(rng.choice(angles)), 208.0, PilotModel(max_rate=float(rng.choice([16, 32, 40]))))
             for s in ids]
    cons = []
    for j in range(n_cons):
        members = [s for s in ids if rng.random() < 0.7] or [ids[0]]
        phasor = bool(rng.random() < 0.85)
        coef = {s: float(rng.choice([-1.0, 1.0, 0.5] if phasor else [0.208, 0.12, 1.0])) for s in members}
        cons.append(PhasorConstraint(f"c{j}", coef, float(rng.uniform(5, 80)), phasor))
    return Network(evses, cons)


def random_view(seed, pilot_kind="continuous"):
    """A random network with most stations occupied, viewed at period 5."""
    rng = np.random.default_rng(seed)
    net = random_network(rng, n_evse=int(rng.integers(1, 6)))
    if pilot_kind != "continuous":
        pilot = PilotModel("finite", allowed=(8, 16, 24, 32)) if pilot_kind == "finite" \
            else PilotModel("deadband", max_rate=32)
        net = Network([EvseNode(e.station_id, e.phase, e.voltage, pilot) for e in net.evses.values()],
                      net.constraints)
    evs = []
    for k, s in enumerate(net.evses):
        if rng.random() < 0.8:
            evs.append(ev(f"e{k}", s, int(rng.integers(0, 5)), int(rng.integers(6, 30)),
                          float(rng.uniform(1, 400)), max_rate=float(rng.choice([16, 32]))))
    return net, view_with(net, evs, now=5)


def tiny_cases():
    """Small charging problems: (name, network, sessions, horizon, terms, build options).

    Demands are whole amp-periods and per-period rows are the only coupling,
    so the 1 A grid search is exact on the grid.
    """
    from evsim.mpc.program import (ProgramContext, ProgramSession, energy_cost, equal_share,
                                   load_flatten, quick_charge, total_energy)
    one = unconstrained(["A"])
    three = Network([EvseNode("A", 0.0), EvseNode("B", -120.0), EvseNode("C", 120.0)],
                    [PhasorConstraint("line_ab", {"A": 1.0, "B": -1.0}, 24.0),
                     PhasorConstraint("line_bc", {"B": 1.0, "C": -1.0}, 20.0),
                     PhasorConstraint("neutral", {"A": 1.0, "B": 1.0, "C": 1.0}, 12.0)])
    three_sessions = [ProgramSession("A", 0, 3, 24.0, 16.0), ProgramSession("B", 0, 3, 30.0, 16.0),
                      ProgramSession("C", 0, 3, 18.0, 16.0)]
    pair = Network([EvseNode("A", 0.0), EvseNode("B", 120.0)],
                   [PhasorConstraint("feeder", {"A": 1.0, "B": 1.0}, 20.0)])
    return [
        ("energy_cost_two_prices", one, [ProgramSession("A", 0, 2, 10.0, 32.0)], 2, [energy_cost()],
         {"context": ProgramContext(prices=np.array([1.0, 2.0])), "energy_constraint": "equality"}),
        ("shared_single_phase_row", single_phase(["A", "B"], 16.0),
         [ProgramSession("A", 0, 2, 32.0, 32.0), ProgramSession("B", 0, 2, 32.0, 32.0)], 2,
         [quick_charge()], {}),
        ("three_phase_quick_charge", three, three_sessions, 3, [quick_charge(), equal_share(1e-4)], {}),
        ("three_phase_total_energy", three, three_sessions, 3, [total_energy()], {}),
        ("staggered_windows", pair,
         [ProgramSession("A", 0, 3, 40.0, 16.0), ProgramSession("B", 1, 4, 30.0, 16.0)], 4,
         [quick_charge()], {}),
        ("solar_flattening", one, [ProgramSession("A", 0, 3, 20.0, 16.0)], 3, [load_flatten()],
         {"context": ProgramContext(solar=np.array([2.08, 1.04, 0.0]))}),
    ]


def tiny_programs():
    """(name, program) for every entry of :func:`tiny_cases`; each has at most nine variables."""
    from evsim.mpc.program import build_program
    return [(name, build_program(sessions, net, H, terms, **opts))
            for name, net, sessions, H, terms, opts in tiny_cases()]
