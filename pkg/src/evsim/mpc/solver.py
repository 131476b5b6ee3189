"""First-order primal-dual solver for box-constrained convex quadratic programs.

Solves

    minimize    c'x + sum_k w_k (F_k x + g_k)^2
    subject to  G x <= h,  E x = e,  lb <= x <= ub

with a restarted, preconditioned primal-dual hybrid gradient method
(Condat-Vu step for the smooth quadratic part). Bounds are handled by
projection, linear rows by their multipliers. A Lagrangian lower bound built
from the current multipliers certifies optimality, which needs finite bounds.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp

_log = logging.getLogger(__name__)

CHECK_EVERY = 64


class InfeasibleProgram(ValueError):
    pass


@dataclass
class QuadraticProgram:
    """Minimization form. ``F``/``g``/``w`` may be None for a linear objective."""

    c: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    G: sp.csr_matrix
    h: np.ndarray
    E: Optional[sp.csr_matrix] = None
    e: Optional[np.ndarray] = None
    F: Optional[sp.csr_matrix] = None
    g: Optional[np.ndarray] = None
    w: Optional[np.ndarray] = None

    def __post_init__(self):
        n = len(self.c)
        self.c = np.asarray(self.c, float)
        self.lb = np.asarray(self.lb, float)
        self.ub = np.asarray(self.ub, float)
        if not (np.all(np.isfinite(self.lb)) and np.all(np.isfinite(self.ub))):
            raise ValueError("all variable bounds must be finite")
        if np.any(self.lb > self.ub + 1e-12):
            raise InfeasibleProgram("a lower bound exceeds its upper bound")
        self.G = sp.csr_matrix(self.G, shape=(len(self.h), n))
        self.h = np.asarray(self.h, float)
        if self.E is None:
            self.E = sp.csr_matrix((0, n))
            self.e = np.zeros(0)
        self.E = sp.csr_matrix(self.E, shape=(len(self.e), n))
        self.e = np.asarray(self.e, float)
        if self.F is None:
            self.F = sp.csr_matrix((0, n))
            self.g = np.zeros(0)
            self.w = np.zeros(0)
        self.F = sp.csr_matrix(self.F, shape=(len(self.g), n))
        self.g = np.asarray(self.g, float)
        self.w = np.asarray(self.w, float)
        if np.any(self.w < 0):
            raise ValueError("quadratic weights must be non-negative (convexity)")

    @property
    def n(self) -> int:
        return len(self.c)

    def value(self, x: np.ndarray) -> float:
        q = self.F @ x + self.g
        return float(self.c @ x + np.sum(self.w * q * q))

    def gradient(self, x: np.ndarray) -> np.ndarray:
        q = self.F @ x + self.g
        return self.c + 2.0 * (self.F.T @ (self.w * q))

    def violation(self, x: np.ndarray) -> float:
        """Worst row violation, each relative to ``1 + |rhs|``."""
        v = 0.0
        if self.G.shape[0]:
            v = max(v, float(np.max((self.G @ x - self.h) / (1.0 + np.abs(self.h)))))
        if self.E.shape[0]:
            v = max(v, float(np.max(np.abs(self.E @ x - self.e) / (1.0 + np.abs(self.e)))))
        return max(v, 0.0)

    def lower_bound(self, x: np.ndarray, y_ineq: np.ndarray, y_eq: np.ndarray) -> float:
        """Weak-duality bound on the optimal value from any y_ineq >= 0.

        Uses f(u) >= f(x) + grad f(x)'(u - x) and minimizes the linearized
        Lagrangian over the box in closed form.
        """
        grad = self.gradient(x) + self.G.T @ y_ineq + self.E.T @ y_eq
        lin = np.where(grad > 0, grad * (self.lb - x), grad * (self.ub - x))
        return float(self.value(x) + y_ineq @ (self.G @ x - self.h)
                     + y_eq @ (self.E @ x - self.e) + lin.sum())


@dataclass
class Solution:
    x: np.ndarray
    value: float  # minimization objective
    bound: float  # certified lower bound on the optimum
    converged: bool
    iterations: int
    violation: float
    y_ineq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    y_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def gap(self) -> float:
        return self.value - self.bound

    def diagnostics(self) -> dict:
        return {"iterations": self.iterations, "converged": self.converged,
                "violation": self.violation, "gap": self.gap}


def _ruiz(K: sp.csr_matrix, iters: int = 10):
    m, n = K.shape
    dr, dc = np.ones(m), np.ones(n)
    A = K.copy()
    for _ in range(iters):
        if A.nnz == 0:
            break
        rmax = np.sqrt(abs(A).max(axis=1).toarray().ravel())
        cmax = np.sqrt(abs(A).max(axis=0).toarray().ravel())
        rmax[rmax == 0] = 1.0
        cmax[cmax == 0] = 1.0
        rmax = np.clip(rmax, 1e-4, 1e4)
        cmax = np.clip(cmax, 1e-4, 1e4)
        A = sp.diags(1 / rmax) @ A @ sp.diags(1 / cmax)
        dr /= rmax
        dc /= cmax
    # Pock-Chambolle (alpha=1) pass on top
    if A.nnz:
        rs = np.sqrt(np.asarray(abs(A).sum(axis=1)).ravel())
        cs = np.sqrt(np.asarray(abs(A).sum(axis=0)).ravel())
        rs[rs == 0] = 1.0
        cs[cs == 0] = 1.0
        A = sp.diags(1 / rs) @ A @ sp.diags(1 / cs)
        dr /= rs
        dc /= cs
    return sp.csr_matrix(A), dr, dc


def _norm_est(apply, apply_t, n: int, iters: int = 60) -> float:
    if n == 0:
        return 0.0
    rng = np.random.default_rng(0)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    s = 0.0
    for _ in range(iters):
        u = apply_t(apply(v))
        s = np.linalg.norm(u)
        if s == 0:
            return 0.0
        v = u / s
    return float(np.sqrt(s))


class _Scaled:
    """The program in scaled variables x = dc * xs, rows multiplied by dr, objective by 1/so."""

    def __init__(self, prog: QuadraticProgram):
        self.prog = prog
        K = sp.vstack([prog.G, prog.E]).tocsr()
        self.m_ineq = prog.G.shape[0]
        self.K, self.dr, self.dc = _ruiz(K)
        self.KT = self.K.T.tocsr()
        self.b = np.concatenate([prog.h, prog.e]) * self.dr
        self.lb = prog.lb / self.dc
        self.ub = prog.ub / self.dc
        c = prog.c * self.dc
        Fs = (prog.F @ sp.diags(self.dc)).tocsr() if prog.F.shape[0] else prog.F
        L = 2.0 * _norm_est(lambda v: np.sqrt(prog.w) * (Fs @ v),
                            lambda u: Fs.T @ (np.sqrt(prog.w) * u), prog.n) ** 2
        self.so = max(float(np.max(np.abs(c))) if len(c) else 0.0, L, 1e-12)
        self.c = c / self.so
        self.F = Fs
        self.FT = Fs.T.tocsr()
        self.g = prog.g
        self.w2 = 2.0 * prog.w / self.so
        self.L = L / self.so
        self.normK = _norm_est(lambda v: self.K @ v, lambda u: self.KT @ u, prog.n)

    def grad(self, xs):
        if self.F.shape[0]:
            return self.c + self.FT @ (self.w2 * (self.F @ xs + self.g))
        return self.c

    def project_dual(self, y):
        y[:self.m_ineq] = np.maximum(y[:self.m_ineq], 0.0)
        return y

    def unscale(self, xs, ys):
        x = np.clip(xs * self.dc, self.prog.lb, self.prog.ub)
        y = ys * self.dr * self.so
        return x, y[:self.m_ineq], y[self.m_ineq:]

    def kkt(self, xs, ys):
        r = self.K @ xs - self.b
        r[:self.m_ineq] = np.maximum(r[:self.m_ineq], 0.0)
        gr = self.grad(xs) + self.KT @ ys
        d = xs - np.clip(xs - gr, self.lb, self.ub)
        gap = abs(float(ys @ (self.K @ xs - self.b)))
        return float(np.sqrt(r @ r + d @ d + gap * gap))


def solve_qp(prog: QuadraticProgram, tol: float = 1e-4, max_iters: int = 50_000,
             x0: Optional[np.ndarray] = None) -> Solution:
    """Restarted PDHG. Stops when every row is violated by at most ``tol`` relative
    to its right-hand side and the duality gap is within ``tol`` relative to the
    objective; otherwise returns the best iterate with ``converged=False``."""
    n = prog.n
    if n == 0:
        v = prog.value(np.zeros(0))
        return Solution(np.zeros(0), v, v, True, 0, 0.0,
                        np.zeros(prog.G.shape[0]), np.zeros(prog.E.shape[0]))
    S = _Scaled(prog)
    m = S.K.shape[0]

    xs = np.zeros(n) if x0 is None else np.asarray(x0, float) / S.dc
    xs = np.clip(xs, S.lb, S.ub)
    ys = np.zeros(m)
    if m == 0 or S.normK == 0:
        return _projected_gradient(prog, S, xs, tol, max_iters)

    bnorm = np.linalg.norm(S.b)
    cnorm = np.linalg.norm(S.c)
    omega = cnorm / bnorm if bnorm > 1e-12 and cnorm > 1e-12 else 1.0
    eta = 0.95 / S.normK

    def steps(omega):
        sigma = eta * omega
        tau = eta / omega
        if S.L > 0:
            tau = min(tau, 0.95 / (S.L / 2 + sigma * S.normK ** 2))
        return tau, sigma

    tau, sigma = steps(omega)
    x_sum, y_sum, n_avg = np.zeros(n), np.zeros(m), 0
    x_start, y_start = xs.copy(), ys.copy()
    kkt_restart = S.kkt(xs, ys)
    kkt_last_candidate = np.inf
    since_restart = 0
    best = None

    def evaluate(xc, yc, it):
        x, yi, ye = S.unscale(xc, yc)
        val = prog.value(x)
        lb = prog.lower_bound(x, yi, ye)
        viol = prog.violation(x)
        ok = viol <= tol and (val - lb) <= tol * (1.0 + abs(val))
        return Solution(x, val, lb, ok, it, viol, yi, ye)

    it = 0
    while it < max_iters:
        for _ in range(CHECK_EVERY):
            g = S.grad(xs) + S.KT @ ys
            x_new = np.clip(xs - tau * g, S.lb, S.ub)
            y_new = S.project_dual(ys + sigma * (S.K @ (2.0 * x_new - xs) - S.b))
            xs, ys = x_new, y_new
            x_sum += xs
            y_sum += ys
            n_avg += 1
        it += CHECK_EVERY
        since_restart += CHECK_EVERY
        x_avg, y_avg = x_sum / n_avg, y_sum / n_avg
        k_cur, k_avg = S.kkt(xs, ys), S.kkt(x_avg, y_avg)
        if k_avg < k_cur:
            cand_x, cand_y, k_cand = x_avg, y_avg, k_avg
        else:
            cand_x, cand_y, k_cand = xs, ys, k_cur
        sol = evaluate(cand_x, cand_y, it)
        if best is None or (sol.converged, -sol.violation - sol.gap) > (best.converged, -best.violation - best.gap):
            best = sol
        if sol.converged:
            return sol
        restart = (k_cand <= 0.2 * kkt_restart
                   or (k_cand <= 0.8 * kkt_restart and k_cand > kkt_last_candidate)
                   or since_restart >= 0.36 * it)
        kkt_last_candidate = k_cand
        if restart:
            dx = np.linalg.norm(cand_x - x_start)
            dy = np.linalg.norm(cand_y - y_start)
            if dx > 1e-10 and dy > 1e-10:
                omega = float(np.exp(0.5 * np.log(dy / dx) + 0.5 * np.log(omega)))
                tau, sigma = steps(omega)
            xs, ys = cand_x.copy(), cand_y.copy()
            x_start, y_start = xs.copy(), ys.copy()
            x_sum[:], y_sum[:], n_avg = 0.0, 0.0, 0
            kkt_restart = k_cand
            kkt_last_candidate = np.inf
            since_restart = 0
    _log.warning("solver stopped at %d iterations (violation %.3g, gap %.3g)",
                 best.iterations, best.violation, best.gap)
    if prog.E.shape[0] and best.violation > 100 * tol:
        raise InfeasibleProgram(f"equality rows still violated by {best.violation:.3g}")
    best.iterations = it
    return best


def _projected_gradient(prog: QuadraticProgram, S: _Scaled, xs, tol, max_iters) -> Solution:
    """Box-only programs: accelerated projected gradient (or one step when linear)."""
    if S.L == 0:
        g = S.c
        xs = np.where(g > 0, S.lb, np.where(g < 0, S.ub, xs))
        x, _, _ = S.unscale(xs, np.zeros(0))
        v = prog.value(x)
        return Solution(x, v, prog.lower_bound(x, np.zeros(0), np.zeros(0)), True, 1, 0.0)
    step = 1.0 / S.L
    z, x_prev, t = xs.copy(), xs.copy(), 1.0
    it = 0
    sol = None
    while it < max_iters:
        for _ in range(CHECK_EVERY):
            x_new = np.clip(z - step * S.grad(z), S.lb, S.ub)
            t_new = 0.5 * (1 + np.sqrt(1 + 4 * t * t))
            z = x_new + ((t - 1) / t_new) * (x_new - x_prev)
            x_prev, t = x_new, t_new
        it += CHECK_EVERY
        x, _, _ = S.unscale(x_prev, np.zeros(0))
        v = prog.value(x)
        lb = prog.lower_bound(x, np.zeros(0), np.zeros(0))
        sol = Solution(x, v, lb, (v - lb) <= tol * (1 + abs(v)), it, 0.0)
        if sol.converged:
            break
    return sol
