"""Receding-horizon charging programs: variables, linearized network rows, objective terms."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from ..network import Network, PhasorConstraint
from .solver import InfeasibleProgram, QuadraticProgram, Solution, solve_qp

COEF_EPS = 1e-12  # coefficients below this are rounding noise (cos of a right angle)

TERM_KINDS = ("quick_charge", "energy_cost", "demand_charge", "load_flatten", "equal_share",
              "total_energy")


@dataclass
class ObjectiveTerm:
    """One weighted objective component (maximized).

    ``params`` by kind: demand_charge takes ``rate`` ($/kW, defaults to the
    tariff's); equal_share takes ``eps``; load_flatten reads the ``external_load``
    and ``solar`` signals from the context.
    """

    kind: str
    weight: float = 1.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TERM_KINDS:
            raise ValueError(f"unknown objective term {self.kind!r}; choose from {TERM_KINDS}")
        if self.kind == "equal_share" and self.params.get("eps", 1e-4) <= 0:
            raise ValueError("equal_share needs eps > 0")

    @classmethod
    def from_dict(cls, d) -> "ObjectiveTerm":
        return cls(d["kind"], float(d.get("weight", 1.0)),
                   {k: v for k, v in d.items() if k not in ("kind", "weight")})


def quick_charge(weight: float = 1.0) -> ObjectiveTerm:
    return ObjectiveTerm("quick_charge", weight)


def equal_share(eps: float = 1e-4, weight: float = 1.0) -> ObjectiveTerm:
    return ObjectiveTerm("equal_share", weight, {"eps": eps})


def energy_cost(weight: float = 1.0) -> ObjectiveTerm:
    return ObjectiveTerm("energy_cost", weight)


def demand_charge(weight: float = 1.0, rate: Optional[float] = None) -> ObjectiveTerm:
    return ObjectiveTerm("demand_charge", weight, {} if rate is None else {"rate": rate})


def load_flatten(weight: float = 1.0) -> ObjectiveTerm:
    return ObjectiveTerm("load_flatten", weight)


def total_energy(weight: float = 1.0) -> ObjectiveTerm:
    return ObjectiveTerm("total_energy", weight)


@dataclass
class ProgramSession:
    """A session as the optimizer sees it; periods are relative to the program start."""

    station_id: str
    start: int  # first period it may charge
    end: int  # exclusive
    demand: float  # amp-periods still to deliver
    max_rate: float


@dataclass
class ProgramContext:
    """Per-period data for the objective terms; arrays have one entry per horizon period."""

    period_minutes: float = 5.0
    prices: Optional[np.ndarray] = None
    external_load: Optional[np.ndarray] = None
    solar: Optional[np.ndarray] = None
    demand_charge: float = 0.0
    peak_so_far: float = 0.0


def linearize_magnitude(constraint: PhasorConstraint, phases: Dict[str, float], m: int,
                        outer: bool = False) -> List[Tuple[Dict[str, float], float]]:
    """Replace ``|sum_i A_i r_i e^{j phi_i}| <= R`` by ``m`` half-planes.

    Row k is ``Re(z e^{-j theta_k}) <= R cos(pi/m)`` with theta_k = 2 pi k / m,
    an inscribed polygon, so the rows imply the true constraint. ``outer=True``
    drops the cos factor (circumscribed polygon, a relaxation).
    """
    if m < 3:
        raise ValueError("need at least 3 half-planes")
    rhs = constraint.limit if outer else constraint.limit * math.cos(math.pi / m)
    rows = []
    for k in range(m):
        theta = 2 * math.pi * k / m
        coef = {s: a * math.cos(math.radians(phases[s]) - theta)
                for s, a in constraint.coefficients.items()}
        rows.append(({s: v for s, v in coef.items() if abs(v) > COEF_EPS}, rhs))
    return rows


def constraint_rows(constraint: PhasorConstraint, phases: Dict[str, float], m: int,
                    outer: bool = False) -> List[Tuple[Dict[str, float], float]]:
    """Linear rows for one constraint, exact whenever the constraint is linear in r >= 0.

    Arithmetic constraints give one row. Phasor constraints whose terms all lie on
    one line give at most two exact rows. Anything else is linearized.
    """
    coefs = {s: a for s, a in constraint.coefficients.items() if a != 0}
    if not constraint.phasor:
        return [(coefs, constraint.limit)]
    if not coefs:
        return []
    vecs = {s: a * np.exp(1j * math.radians(phases[s])) for s, a in coefs.items()}
    ref = next(iter(vecs.values()))
    u = ref / abs(ref)
    proj = {s: (v * np.conj(u)) for s, v in vecs.items()}
    if all(abs(p.imag) <= 1e-9 * max(1.0, abs(p)) for p in proj.values()):
        signed = {s: p.real for s, p in proj.items() if abs(p.real) > COEF_EPS}
        rows = [(signed, constraint.limit)]
        if any(v < 0 for v in signed.values()):
            rows.append(({s: -v for s, v in signed.items()}, constraint.limit))
        return rows
    return linearize_magnitude(PhasorConstraint(constraint.id, coefs, constraint.limit),
                               phases, m, outer)


@dataclass
class ChargingProgram:
    sessions: List[ProgramSession]
    horizon: int
    qp: QuadraticProgram
    index: Dict[Tuple[int, int], int]  # (session, period) -> variable
    peak_var: Optional[int] = None

    @property
    def n_vars(self) -> int:
        return self.qp.n

    def objective(self, x: np.ndarray) -> float:
        """Maximization objective value."""
        return -self.qp.value(x)

    def rates(self, x: np.ndarray) -> np.ndarray:
        R = np.zeros((len(self.sessions), self.horizon))
        for (i, t), k in self.index.items():
            R[i, t] = x[k]
        return R

    def vector(self, R: np.ndarray) -> np.ndarray:
        x = np.zeros(self.n_vars)
        for (i, t), k in self.index.items():
            x[k] = R[i, t]
        if self.peak_var is not None:
            x[self.peak_var] = self._min_peak(x)
        return x

    def _min_peak(self, x):
        # smallest feasible peak variable for the given rates
        G, h = self.qp.G, self.qp.h
        col = G[:, self.peak_var].toarray().ravel()
        rows = col < 0
        if not rows.any():
            return 0.0
        x0 = x.copy()
        x0[self.peak_var] = 0.0
        need = (G[rows] @ x0 - h[rows]) / -col[rows]
        return float(np.clip(max(0.0, need.max()), self.qp.lb[self.peak_var], self.qp.ub[self.peak_var]))


def build_program(sessions: Sequence[ProgramSession], network: Network, horizon: int,
                  terms: Sequence[ObjectiveTerm], m: int = 12,
                  context: Optional[ProgramContext] = None, energy_constraint: str = "cap",
                  outer: bool = False) -> ChargingProgram:
    """Assemble the convex program over ``horizon`` periods.

    Variables r[i, t] exist only inside each session's window; their box is
    [0, max_rate]. Per session, sum_t r[i, t] <= demand (or == with
    ``energy_constraint="equality"``). Network rows repeat every period.
    """
    if horizon < 1:
        raise ValueError("horizon must be at least one period")
    if energy_constraint not in ("cap", "equality"):
        raise ValueError(f"unknown energy constraint {energy_constraint!r}")
    ctx = context or ProgramContext()
    H = horizon
    index: Dict[Tuple[int, int], int] = {}
    ub: List[float] = []
    for i, s in enumerate(sessions):
        for t in range(max(s.start, 0), min(s.end, H)):
            index[(i, t)] = len(ub)
            ub.append(max(0.0, s.max_rate))
    n_r = len(ub)
    volts = np.array([network.evses[s.station_id].voltage for s in sessions]) if sessions else np.zeros(0)
    var_i = np.empty(n_r, int)
    var_t = np.empty(n_r, int)
    for (i, t), k in index.items():
        var_i[k], var_t[k] = i, t
    kw_per_amp = volts[var_i] / 1000.0 if n_r else np.zeros(0)

    kinds = [term.kind for term in terms]
    peak_var = n_r if "demand_charge" in kinds else None
    n = n_r + (1 if peak_var is not None else 0)
    lb = np.zeros(n)
    ubv = np.zeros(n)
    ubv[:n_r] = ub
    if peak_var is not None:
        ubv[peak_var] = max(ctx.peak_so_far, float(np.sum(kw_per_amp * ubv[:n_r]))) + 1.0

    c = np.zeros(n)
    F_rows, F_cols, F_vals, g, w = [], [], [], [], []
    n_frows = 0
    for term in terms:
        if term.kind == "quick_charge":
            c[:n_r] -= term.weight * (H - var_t) / H
        elif term.kind == "total_energy":
            c[:n_r] -= term.weight
        elif term.kind == "energy_cost":
            if ctx.prices is None:
                raise ValueError("energy_cost term needs prices")
            kwh_per_amp = kw_per_amp * ctx.period_minutes / 60.0
            c[:n_r] += term.weight * np.asarray(ctx.prices)[var_t] * kwh_per_amp
        elif term.kind == "demand_charge":
            rate = float(term.params.get("rate", ctx.demand_charge))
            c[peak_var] += term.weight * rate
        elif term.kind == "equal_share":
            eps = float(term.params.get("eps", 1e-4))
            F_rows.extend(range(n_frows, n_frows + n_r))
            F_cols.extend(range(n_r))
            F_vals.extend([1.0] * n_r)
            g.extend([0.0] * n_r)
            w.extend([term.weight * eps] * n_r)
            n_frows += n_r
        elif term.kind == "load_flatten":
            base = np.zeros(H)
            if ctx.external_load is not None:
                base += np.asarray(ctx.external_load)[:H]
            if ctx.solar is not None:
                base -= np.asarray(ctx.solar)[:H]
            F_rows.extend(n_frows + var_t)
            F_cols.extend(range(n_r))
            F_vals.extend(kw_per_amp)
            g.extend(base)
            w.extend([term.weight] * H)
            n_frows += H

    G_rows, G_cols, G_vals, h = [], [], [], []
    n_g = 0

    def add_row(entries, rhs):
        nonlocal n_g
        for k, v in entries:
            G_rows.append(n_g)
            G_cols.append(k)
            G_vals.append(v)
        h.append(rhs)
        n_g += 1

    phases = {sid: e.phase for sid, e in network.evses.items()}
    by_station: Dict[str, List[int]] = {}
    for i, s in enumerate(sessions):
        by_station.setdefault(s.station_id, []).append(i)
    net_rows = []
    for con in network.constraints:
        net_rows.extend(constraint_rows(con, phases, m, outer))
    for t in range(H):
        for coef, rhs in net_rows:
            entries = [(index[(i, t)], a) for sid, a in coef.items()
                       for i in by_station.get(sid, ()) if (i, t) in index and abs(a) > COEF_EPS]
            if entries:
                add_row(entries, rhs)
    if peak_var is not None:
        for t in range(H):
            entries = [(index[(i, t)], kw_per_amp[index[(i, t)]]) for i in range(len(sessions))
                       if (i, t) in index]
            add_row(entries + [(peak_var, -1.0)], ctx.peak_so_far)

    E_rows, E_cols, E_vals, e = [], [], [], []
    for i, s in enumerate(sessions):
        ks = [index[(i, t)] for t in range(H) if (i, t) in index]
        if energy_constraint == "cap":
            if ks and s.demand < sum(ubv[k] for k in ks):
                add_row([(k, 1.0) for k in ks], max(0.0, s.demand))
        else:
            if sum(ubv[k] for k in ks) < s.demand - 1e-9:
                raise InfeasibleProgram(f"session at {s.station_id} cannot receive {s.demand} "
                                        f"within its window")
            for k in ks:
                E_rows.append(len(e))
                E_cols.append(k)
                E_vals.append(1.0)
            e.append(max(0.0, s.demand))

    G = sp.csr_matrix((G_vals, (G_rows, G_cols)), shape=(n_g, n))
    E = sp.csr_matrix((E_vals, (E_rows, E_cols)), shape=(len(e), n))
    F = sp.csr_matrix((F_vals, (F_rows, F_cols)), shape=(n_frows, n))
    qp = QuadraticProgram(c, lb, ubv, G, np.array(h, float), E, np.array(e, float),
                          F, np.array(g, float), np.array(w, float))
    return ChargingProgram(list(sessions), H, qp, index, peak_var)


def solve(program: ChargingProgram, tol: float = 1e-4, max_iters: int = 50_000,
          x0: Optional[np.ndarray] = None) -> Solution:
    return solve_qp(program.qp, tol, max_iters, x0)
