"""
Reformulations of semi-continuous QPs and the machinery that picks their
parameters.

Perspective side: diagonal perturbations rho (min-eigenvalue heuristic, the
max e'rho SDP, and the bound-maximizing SDP_l), the SOCP relaxation, and
perspective cuts. Lift side: the lift-and-convexification model with
parameters (u, v) recovered from the SOCP optimum or read off SDP_q, and its
extension with squared-residual penalties (w, t) for problems with equality
sections (SDP_a). bound_compare runs the whole chain on one instance.
"""
import logging
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field

from conic import (AffineRows, ConicBuilder, ConicProblem, ConicSolution, ConicStatus,
                   MatrixExpr, VariableLayout, extract, solve_conic)
from core_linalg import PSD_TOL, inf_norm, min_eigenvalue, psd_tolerance, sym_eigen
from errors import ConvexityViolation, DegenerateInput, DimensionMismatch, InfeasibleProblem, NonConvergence
from model import Instance, SolverPoint, inequality_rows
from qp import QpProblem, QpStatus, solve_qp
from settings_manager import ConicSettings, QpSettings

logger = logging.getLogger(__name__)

RHO_TOL = 1e-8
DEGENERATE_Y = 1e-9
CUT_DEDUP_TOL = 1e-9
ROW_TOL = 1e-9
RHO_METHODS = ("sdp_l", "sdp_q", "sdp_simple", "mineig", "zero")


@dataclass(frozen=True)
class PerspectiveParams:
    rho: np.ndarray


@dataclass(frozen=True)
class LiftParams:
    u: np.ndarray
    v: np.ndarray


@dataclass(frozen=True)
class QcrParams:
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    t: np.ndarray

    @property
    def lift(self) -> LiftParams:
        return LiftParams(u=self.u, v=self.v)


# --- perspective cuts ---

@dataclass(frozen=True)
class PerspectiveCut:
    """phi_i >= 2 xbar x_i - xbar^2 y_i, written as a row  2 xbar x_i - xbar^2 y_i - phi_i <= 0."""
    index: int
    xbar: float

    def coefficients(self, layout: VariableLayout) -> np.ndarray:
        row = np.zeros(layout.size)
        row[layout.span("x").start + self.index] = 2.0 * self.xbar
        row[layout.span("y").start + self.index] = -self.xbar ** 2
        row[layout.span("phi").start + self.index] = -1.0
        return row

    def violation(self, x_i: float, y_i: float, phi_i: float) -> float:
        return 2.0 * self.xbar * x_i - self.xbar ** 2 * y_i - phi_i


class CutPool:
    """
    Global pool of perspective cuts shared by every node of a search.
    Cuts with the same index and xbar within 1e-9 are stored once.
    """
    def __init__(self, layout: VariableLayout):
        self.layout = layout
        self._cuts: List[PerspectiveCut] = []
        self._by_index: Dict[int, List[float]] = {}
        self._rows = np.zeros((0, layout.size))
        self._lock = threading.Lock()

    def add(self, cut: PerspectiveCut) -> bool:
        with self._lock:
            seen = self._by_index.setdefault(cut.index, [])
            if any(abs(cut.xbar - xb) <= CUT_DEDUP_TOL for xb in seen):
                return False
            seen.append(cut.xbar)
            self._cuts.append(cut)
            self._rows = np.vstack([self._rows, cut.coefficients(self.layout)])
            return True

    def rows(self) -> Tuple[np.ndarray, np.ndarray]:
        with self._lock:
            G = self._rows.copy()
        return G, np.zeros(G.shape[0])

    def __len__(self) -> int:
        return len(self._cuts)

    def __iter__(self):
        return iter(list(self._cuts))


def separate_perspective_cut(rho_i: float, x_i: float, y_i: float, a_i: float, b_i: float,
                             phi_i: float = 0.0, ctol: float = 1e-6, ytol: float = 1e-9,
                             index: int = 0) -> Optional[PerspectiveCut]:
    """
    Most violated perspective cut at (x_i, y_i, phi_i), or None when phi_i is
    within ctol of x_i^2 / y_i (0/0 counts as 0). Returns None for rho_i <= 0:
    such components carry no perspective term and never get cuts.
    """
    if rho_i <= 0.0 or y_i <= ytol:
        return None
    if phi_i >= x_i * x_i / y_i - ctol:
        return None
    xbar = float(np.clip(x_i / y_i, a_i, b_i))
    cut = PerspectiveCut(index=index, xbar=xbar)
    if cut.violation(x_i, y_i, phi_i) <= 0.0:
        return None
    return cut


# --- MIQP models ---

@dataclass
class Relaxation:
    status: QpStatus
    bound: float
    z: Optional[np.ndarray]
    iterations: int = 0

    @property
    def feasible(self) -> bool:
        return self.status is not QpStatus.INFEASIBLE


@dataclass
class MiqpModel:
    """
    min z'Pz + linear'z + constant over z = (x, y[, phi][, s]) subject to
    linear rows, box bounds and y binary. Cut rows from the pool are appended
    to the inequalities.
    """
    instance: Instance
    kind: str
    layout: VariableLayout
    quadratic: np.ndarray
    linear: np.ndarray
    constant: float
    ineq_matrix: np.ndarray
    ineq_rhs: np.ndarray
    eq_matrix: np.ndarray
    eq_rhs: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    switch_off: List[np.ndarray] = field(default_factory=list)
    rho: Optional[np.ndarray] = None
    cuts: Optional[CutPool] = None

    @property
    def num_vars(self) -> int:
        return self.layout.size

    @property
    def binary(self) -> np.ndarray:
        return self.layout.indices("y")

    def objective_value(self, z: np.ndarray) -> float:
        return float(z @ self.quadratic @ z + self.linear @ z + self.constant)

    def point(self, z: np.ndarray) -> SolverPoint:
        return SolverPoint(x=z[self.layout.span("x")].copy(), y=z[self.layout.span("y")].copy())

    def inequalities(self) -> Tuple[np.ndarray, np.ndarray]:
        if self.cuts is None or not len(self.cuts):
            return self.ineq_matrix, self.ineq_rhs
        G, g = self.cuts.rows()
        return np.vstack([self.ineq_matrix, G]), np.concatenate([self.ineq_rhs, g])

    def fixing(self, fixed_zero, fixed_one) -> Dict[int, float]:
        """Variable values implied by fixing binaries; y_i = 0 also zeroes its companions."""
        y = self.binary
        fixed: Dict[int, float] = {}
        for i in fixed_zero:
            fixed[int(y[i])] = 0.0
            for j in self.switch_off[i]:
                fixed[int(j)] = 0.0
        for i in fixed_one:
            fixed[int(y[i])] = 1.0
        return fixed

    def restrict(self, fixed: Dict[int, float]):
        """
        Substitute fixed variables out. Returns (QpProblem, free, fixed_idx,
        fixed_vals), or None when a row left without free variables is violated.
        """
        nv = self.num_vars
        idx = np.array(sorted(fixed), dtype=int)
        vals = np.array([fixed[i] for i in idx], dtype=float)
        free = np.setdiff1d(np.arange(nv), idx)
        P = self.quadratic

        G, g = self.inequalities()
        g_r = g - G[:, idx] @ vals
        G_r = G[:, free]
        empty = ~np.any(G_r != 0.0, axis=1)
        if np.any(g_r[empty] < -ROW_TOL):
            return None
        e_r = self.eq_rhs - self.eq_matrix[:, idx] @ vals
        E_r = self.eq_matrix[:, free]
        eq_empty = ~np.any(E_r != 0.0, axis=1)
        if np.any(np.abs(e_r[eq_empty]) > ROW_TOL):
            return None

        qp = QpProblem(
            hessian=2.0 * P[np.ix_(free, free)],
            linear=self.linear[free] + 2.0 * P[np.ix_(free, idx)] @ vals,
            ineq_matrix=G_r[~empty],
            ineq_rhs=g_r[~empty],
            eq_matrix=E_r[~eq_empty],
            eq_rhs=e_r[~eq_empty],
            lower=self.lower[free],
            upper=self.upper[free],
            constant=float(self.constant + vals @ P[np.ix_(idx, idx)] @ vals + self.linear[idx] @ vals),
        )
        return qp, free, idx, vals

    def relax(self, fixed: Optional[Dict[int, float]] = None,
              settings: Optional[QpSettings] = None) -> Relaxation:
        """Continuous relaxation with the given variables fixed."""
        restricted = self.restrict(fixed or {})
        if restricted is None:
            return Relaxation(status=QpStatus.INFEASIBLE, bound=np.inf, z=None)
        qp, free, idx, vals = restricted
        z = np.zeros(self.num_vars)
        z[idx] = vals
        if free.size == 0:
            return Relaxation(status=QpStatus.OPTIMAL, bound=qp.constant, z=z)
        sol = solve_qp(qp, settings)
        if sol.status is QpStatus.INFEASIBLE:
            return Relaxation(status=QpStatus.INFEASIBLE, bound=np.inf, z=None, iterations=sol.iterations)
        z[free] = sol.z
        return Relaxation(status=sol.status, bound=sol.obj, z=z, iterations=sol.iterations)

    def separate(self, z: np.ndarray, ctol: float, ytol: float) -> List[PerspectiveCut]:
        """Add every violated perspective cut at z to the pool; returns the new ones."""
        if self.cuts is None or self.rho is None:
            return []
        inst = self.instance
        x = z[self.layout.span("x")]
        y = z[self.layout.span("y")]
        phi = z[self.layout.span("phi")]
        added = []
        for i in range(inst.n):
            cut = separate_perspective_cut(self.rho[i], x[i], y[i], inst.lb[i], inst.ub[i],
                                           phi_i=phi[i], ctol=ctol, ytol=ytol, index=i)
            if cut is not None and self.cuts.add(cut):
                added.append(cut)
        return added


def split_paired_rows(A: np.ndarray, B: np.ndarray, d: np.ndarray):
    """
    Detect rows that come as a pair (row, -row) with negated rhs.
    Returns (unpaired indices, first index of every pair, partner array).
    """
    m = d.shape[0]
    partner = np.full(m, -1)
    for k in range(m):
        if partner[k] >= 0:
            continue
        for l in range(k + 1, m):
            if (partner[l] < 0 and d[l] == -d[k] and np.array_equal(A[l], -A[k])
                    and np.array_equal(B[l], -B[k])):
                partner[k], partner[l] = l, k
                break
    ineq = np.array([k for k in range(m) if partner[k] < 0], dtype=int)
    eq = np.array([k for k in range(m) if partner[k] > k], dtype=int)
    return ineq, eq, partner


def _skeleton(inst: Instance, extras=(), instance_rows: bool = True):
    n = inst.n
    layout = VariableLayout()
    layout.add("x", n)
    layout.add("y", n)
    for name, size in extras:
        layout.add(name, size)
    nv = layout.size
    ar = np.arange(n)

    semi = np.zeros((2 * n, nv))
    semi[ar, n + ar] = inst.lb
    semi[ar, ar] = -1.0
    semi[n + ar, ar] = 1.0
    semi[n + ar, n + ar] = -inst.ub
    G, g = [semi], [np.zeros(2 * n)]
    E, e = [np.zeros((0, nv))], [np.zeros(0)]

    if instance_rows:
        A, B, d = inequality_rows(inst)
        ineq, eq, _ = split_paired_rows(A, B, d)
        rows = np.zeros((d.shape[0], nv))
        rows[:, :n] = A
        rows[:, n:2 * n] = B
        G.append(rows[ineq])
        g.append(d[ineq])
        E.append(rows[eq])
        e.append(d[eq])

    lower = np.full(nv, -np.inf)
    upper = np.full(nv, np.inf)
    lower[n:2 * n] = 0.0
    upper[n:2 * n] = 1.0
    return layout, np.vstack(G), np.concatenate(g), np.vstack(E), np.concatenate(e), lower, upper


def _block_quadratic(n: int, nv: int, Q, u=None, v=None) -> np.ndarray:
    P = np.zeros((nv, nv))
    P[:n, :n] = Q
    if u is not None:
        ar = np.arange(n)
        P[ar, n + ar] = 0.5 * u
        P[n + ar, ar] = 0.5 * u
        P[n + ar, n + ar] = v
    return P


def build_plain(inst: Instance) -> MiqpModel:
    """The original problem as an MIQP in (x, y)."""
    n = inst.n
    layout, G, g, E, e, lower, upper = _skeleton(inst)
    return MiqpModel(
        instance=inst, kind="plain", layout=layout,
        quadratic=_block_quadratic(n, layout.size, inst.Q),
        linear=np.concatenate([inst.c, inst.h]), constant=0.0,
        ineq_matrix=G, ineq_rhs=g, eq_matrix=E, eq_rhs=e, lower=lower, upper=upper,
        switch_off=[np.array([i]) for i in range(n)],
    )


def _convexify(hessian: Callable[[np.ndarray], np.ndarray], v: np.ndarray, label: str) -> np.ndarray:
    """
    Shift v_i > 0 by the magnitude of a marginally negative eigenvalue of the
    lifted Hessian. Raises ConvexityViolation when the Hessian is clearly
    indefinite or stays indefinite after the shift.
    """
    H = hessian(v)
    lmin = min_eigenvalue(H, method="lapack")
    scale = 1.0 + inf_norm(H)
    if lmin >= -1e-14 * scale:
        return v
    if lmin <= -PSD_TOL * scale:
        raise ConvexityViolation(f"{label} Hessian has min eigenvalue {lmin:.3e} (scale {scale:.3e})")
    shifted = v + np.where(v > 0.0, -lmin, 0.0)
    H = hessian(shifted)
    lmin_after = min_eigenvalue(H, method="lapack")
    if lmin_after < -psd_tolerance(H):
        raise ConvexityViolation(f"{label} Hessian still indefinite after repair ({lmin_after:.3e})")
    logger.warning(f"{label} Hessian repaired: min eigenvalue {lmin:.3e} -> {lmin_after:.3e}")
    return shifted


def lifted_hessian(Q: np.ndarray, lp: LiftParams) -> np.ndarray:
    """[[Q, diag(u)/2], [diag(u)/2, diag(v)]]."""
    n = Q.shape[0]
    return _block_quadratic(n, 2 * n, Q, lp.u, lp.v)


def repair_lift_params(inst: Instance, lp: LiftParams) -> LiftParams:
    v = _convexify(lambda vv: lifted_hessian(inst.Q, LiftParams(u=lp.u, v=vv)), np.asarray(lp.v, float), "lifted")
    return LiftParams(u=np.asarray(lp.u, dtype=float), v=v)


def build_lcr(inst: Instance, lp: LiftParams) -> MiqpModel:
    """
    f(x,y) + sum(u_i x_i y_i + v_i y_i^2 - u_i x_i - v_i y_i); the added terms
    vanish whenever y is binary and x_i = 0 for y_i = 0.
    """
    n = inst.n
    if np.shape(lp.u) != (n,) or np.shape(lp.v) != (n,):
        raise DimensionMismatch(f"lift parameters must have {n} entries")
    lp = repair_lift_params(inst, lp)
    layout, G, g, E, e, lower, upper = _skeleton(inst)
    return MiqpModel(
        instance=inst, kind="lcr", layout=layout,
        quadratic=_block_quadratic(n, layout.size, inst.Q, lp.u, lp.v),
        linear=np.concatenate([inst.c - lp.u, inst.h - lp.v]), constant=0.0,
        ineq_matrix=G, ineq_rhs=g, eq_matrix=E, eq_rhs=e, lower=lower, upper=upper,
        switch_off=[np.array([i]) for i in range(n)],
    )


def build_pc(inst: Instance, rho: PerspectiveParams) -> MiqpModel:
    """
    x'(Q - diag(rho))x + c'x + h'y + rho'phi with phi_i >= 0,
    phi_i <= max(a_i^2, b_i^2) y_i and a cut pool seeded at xbar = a_i and b_i.
    """
    n = inst.n
    r = np.asarray(rho.rho, dtype=float)
    layout, G, g, E, e, lower, upper = _skeleton(inst, extras=[("phi", n)])
    nv = layout.size
    ar = np.arange(n)
    cap = np.zeros((n, nv))
    cap[ar, 2 * n + ar] = 1.0
    cap[ar, n + ar] = -np.maximum(inst.lb ** 2, inst.ub ** 2)
    lower[2 * n:] = 0.0

    quadratic = np.zeros((nv, nv))
    quadratic[:n, :n] = inst.Q - np.diag(r)
    model = MiqpModel(
        instance=inst, kind="pc", layout=layout, quadratic=quadratic,
        linear=np.concatenate([inst.c, inst.h, r]), constant=0.0,
        ineq_matrix=np.vstack([G, cap]), ineq_rhs=np.concatenate([g, np.zeros(n)]),
        eq_matrix=E, eq_rhs=e, lower=lower, upper=upper,
        switch_off=[np.array([i, 2 * n + i]) for i in range(n)],
        rho=r, cuts=CutPool(layout),
    )
    for i in range(n):
        if r[i] > 0.0:
            model.cuts.add(PerspectiveCut(index=i, xbar=float(inst.lb[i])))
            model.cuts.add(PerspectiveCut(index=i, xbar=float(inst.ub[i])))
    return model


def _qcr_rows(inst: Instance):
    A, B, d = inequality_rows(inst, include_equality=False)
    eq = inst.equality
    if eq is None:
        E, F, g = np.zeros((0, inst.n)), np.zeros((0, inst.n)), np.zeros(0)
    else:
        E, F, g = eq.E, eq.F, eq.g
    return A, B, d, E, F, g


def _qcr_objective(inst: Instance, params: QcrParams, nv: int, slack_cols: np.ndarray):
    """Quadratic, linear and constant parts of the penalized objective over (x, y, s)."""
    n = inst.n
    A, B, d, E, F, g = _qcr_rows(inst)
    m = d.shape[0]
    Mr = np.zeros((m, nv))
    Mr[:, :n] = A
    Mr[:, n:2 * n] = B
    has_slack = slack_cols >= 0
    Mr[np.flatnonzero(has_slack), slack_cols[has_slack]] = 1.0
    Me = np.zeros((E.shape[0], nv))
    Me[:, :n] = E
    Me[:, n:2 * n] = F
    t, w = np.asarray(params.t, float), np.asarray(params.w, float)

    def quadratic(v):
        P = _block_quadratic(n, nv, inst.Q, params.u, v)
        return P + (Me.T * w) @ Me + (Mr.T * t) @ Mr

    linear = np.zeros(nv)
    linear[:n] = inst.c - params.u
    linear[n:2 * n] = inst.h - params.v
    linear += -2.0 * Me.T @ (w * g) - 2.0 * Mr.T @ (t * d)
    constant = float(g @ (w * g) + d @ (t * d))
    return quadratic, linear, constant, Mr, Me


def build_qcr(inst: Instance, params: QcrParams) -> MiqpModel:
    """
    The lifted objective plus (Ex+Fy-g)'dg(w)(Ex+Fy-g) and
    (Ax+By+s-d)'dg(t)(Ax+By+s-d) over Ax + By + s = d, s >= 0, Ex + Fy = g.
    Paired rows (a row and its negation) already force their slacks to zero,
    so they get no slack variable and enter as a single equality.
    """
    n = inst.n
    A, B, d, E, F, g = _qcr_rows(inst)
    m = d.shape[0]
    if np.shape(params.t) != (m,) or np.shape(params.w) != (g.shape[0],):
        raise DimensionMismatch(f"expected {m} inequality weights and {g.shape[0]} equality weights")
    ineq, eq, _ = split_paired_rows(A, B, d)
    layout, G, gg, _, _, lower, upper = _skeleton(inst, extras=[("s", ineq.size)], instance_rows=False)
    nv = layout.size
    slack_cols = np.full(m, -1)
    slack_cols[ineq] = 2 * n + np.arange(ineq.size)
    lower[2 * n:] = 0.0

    quadratic, linear, constant, Mr, Me = _qcr_objective(inst, params, nv, slack_cols)
    v = _convexify(quadratic, np.asarray(params.v, dtype=float), "QCR")
    linear[n:2 * n] += np.asarray(params.v, dtype=float) - v

    return MiqpModel(
        instance=inst, kind="qcr", layout=layout,
        quadratic=quadratic(v), linear=linear, constant=constant,
        ineq_matrix=G, ineq_rhs=gg,
        eq_matrix=np.vstack([Mr[ineq], Mr[eq], Me]),
        eq_rhs=np.concatenate([d[ineq], d[eq], g]),
        lower=lower, upper=upper,
        switch_off=[np.array([i]) for i in range(n)],
    )


# --- perspective parameters ---

def is_feasible_rho(inst: Instance, rho: PerspectiveParams) -> bool:
    r = np.asarray(rho.rho, dtype=float)
    if np.any(r < -RHO_TOL):
        return False
    W = inst.Q - np.diag(r)
    return min_eigenvalue(W, method="lapack") >= -psd_tolerance(W)


def rho_uniform_mineig(inst: Instance) -> PerspectiveParams:
    lam = min_eigenvalue(inst.Q)
    return PerspectiveParams(rho=np.full(inst.n, max(0.0, lam)))


def _repair_rho(inst: Instance, rho: np.ndarray) -> np.ndarray:
    """Clip to rho >= 0 and pull rho back until Q - diag(rho) is PSD."""
    r = np.maximum(np.asarray(rho, dtype=float), 0.0)
    for _ in range(10):
        lmin = min_eigenvalue(inst.Q - np.diag(r), method="lapack")
        if lmin >= 0.0:
            return r
        r = np.maximum(r - abs(lmin) * (1.0 + 1e-9) - 1e-15, 0.0)
    logger.warning("could not repair rho; using the min-eigenvalue heuristic")
    return rho_uniform_mineig(inst).rho


def _checked_solve(problem: ConicProblem, settings: ConicSettings, label: str,
                   infeasible_on: Optional[ConicStatus] = None) -> Optional[ConicSolution]:
    """
    Solve and keep only usable answers. When `infeasible_on` is the status
    returned, the underlying relaxation is empty and InfeasibleProblem is raised.
    """
    sol = solve_conic(problem, settings)
    if infeasible_on is not None and sol.status is infeasible_on:
        raise InfeasibleProblem(f"{label}: relaxation is infeasible ({sol.status.value} certificate)")
    if sol.usable(settings.eps):
        logger.info(f"{label} solved: {sol.status.value}, objective {sol.primal_obj:.10g},"
                    f" {sol.iterations} iterations, {sol.solve_time:.2f}s")
        return sol
    logger.warning(f"{label} not usable ({sol.status.value}, residuals {sol.residuals})")
    return None


def rho_sdp_simple(inst: Instance, settings: Optional[ConicSettings] = None) -> PerspectiveParams:
    """max e'rho s.t. rho >= 0, Q - diag(rho) PSD."""
    settings = settings or ConicSettings()
    n = inst.n
    b = ConicBuilder()
    rho = b.variable("rho", n, nonneg=True)
    b.maximize(rho, 1.0)
    M = MatrixExpr(n)
    M.const_block(0, 0, inst.Q)
    M.term(np.arange(n), np.arange(n), rho, -1.0)
    b.psd(M)
    problem = b.build()
    sol = _checked_solve(problem, settings, "diagonal SDP")
    if sol is None:
        return rho_uniform_mineig(inst)
    return PerspectiveParams(rho=_repair_rho(inst, extract(sol, problem.layout, "rho")))


def build_sdp_l(inst: Instance) -> ConicProblem:
    """
    SDP whose optimal rho maximizes the perspective relaxation bound; tau is
    that bound. One 2x2 block per index plus the (n+1) block on Q - diag(rho).
    """
    n = inst.n
    A, B, d = inequality_rows(inst)
    m = d.shape[0]
    a, bb, c, h = inst.lb, inst.ub, inst.c, inst.h
    ar = np.arange(n)

    b = ConicBuilder()
    rho = b.variable("rho", n, nonneg=True)
    tau = b.variable("tau", 1)
    eta = b.variable("eta", m, nonneg=True)
    mu = b.variable("mu", n, nonneg=True)
    pi = b.variable("pi", n, nonneg=True)
    lam = b.variable("lambda", n)
    b.maximize(tau)

    for i in range(n):
        blk = MatrixExpr(2)
        blk.term(0, 0, rho[i], 1.0)
        blk.term(0, 0, mu[i], 1.0)
        blk.const(1, 0, 0.5 * c[i])
        blk.term(1, 0, lam[i], -0.5)
        blk.term(1, 0, mu[i], -0.5 * (a[i] + bb[i]))
        blk.const(1, 1, h[i])
        blk.term(1, 1, pi[i], 1.0)
        blk.term(1, 1, eta, B[:, i])
        blk.term(1, 1, mu[i], a[i] * bb[i])
        b.psd(blk)

    big = MatrixExpr(n + 1)
    big.const_block(0, 0, inst.Q)
    big.term(ar, ar, rho, -1.0)
    big.term(n, ar, lam, 0.5)
    if m:
        big.term(n, ar[None, :], eta[:, None], 0.5 * A)
        big.term(n, n, eta, -d)
    big.term(n, n, pi, -1.0)
    big.term(n, n, tau, -1.0)
    b.psd(big)
    return b.build()


@dataclass
class RhoResult:
    rho: PerspectiveParams
    tau: Optional[float]
    fallback: bool
    seconds: float


def solve_sdp_l(inst: Instance, settings: Optional[ConicSettings] = None) -> RhoResult:
    """
    rho* and tau* from SDP_l. An unusable conic answer falls back to the
    min-eigenvalue heuristic (tau is then unknown).
    """
    settings = settings or ConicSettings()
    start = time.perf_counter()
    problem = build_sdp_l(inst)
    sol = _checked_solve(problem, settings, "SDP_l")
    if sol is None:
        logger.warning("SDP_l fallback to the min-eigenvalue rho")
        return RhoResult(rho=rho_uniform_mineig(inst), tau=None, fallback=True,
                         seconds=time.perf_counter() - start)
    rho = _repair_rho(inst, extract(sol, problem.layout, "rho"))
    tau = float(extract(sol, problem.layout, "tau")[0])
    return RhoResult(rho=PerspectiveParams(rho=rho), tau=tau, fallback=False,
                     seconds=time.perf_counter() - start)


def _psd_factor(W: np.ndarray) -> np.ndarray:
    """F with F F' = W restricted to its positive eigenspace."""
    eig = sym_eigen(W, method="lapack")
    keep = eig.values > 1e-12 * (1.0 + inf_norm(W))
    return eig.vectors[:, keep] * np.sqrt(eig.values[keep])


def _linear_rows(builder: ConicBuilder, x, y, A, B, d):
    """Constrain d - A x - B y >= 0."""
    m = d.shape[0]
    if not m:
        return
    rows = AffineRows(m)
    rows.const = d.astype(float).copy()
    rr, cc = np.nonzero(A)
    rows.add_terms(rr, x[cc], -A[rr, cc])
    rr, cc = np.nonzero(B)
    rows.add_terms(rr, y[cc], -B[rr, cc])
    builder.nonneg(rows)


def build_socp_relax(inst: Instance, rho: PerspectiveParams) -> ConicProblem:
    """
    Continuous relaxation of the perspective reformulation as an SOCP:
        min theta + c'x + h'y + rho'phi
        ||F'x||^2 <= theta  (F F' = Q - diag(rho)),
        ||(x_i, (phi_i - y_i)/2)|| <= (phi_i + y_i)/2,
        instance rows, a_i y_i <= x_i <= b_i y_i, 0 <= y <= 1.
    """
    n = inst.n
    r = np.asarray(rho.rho, dtype=float)
    ar = np.arange(n)
    b = ConicBuilder()
    x = b.variable("x", n)
    y = b.variable("y", n)
    phi = b.variable("phi", n)
    theta = b.variable("theta", 1)
    b.minimize(theta, 1.0)
    b.minimize(x, inst.c)
    b.minimize(y, inst.h)
    b.minimize(phi, r)

    A, B, d = inequality_rows(inst)
    _linear_rows(b, x, y, A, B, d)

    semi = AffineRows(2 * n)
    semi.add_terms(ar, x, 1.0)
    semi.add_terms(ar, y, -inst.lb)
    semi.add_terms(n + ar, y, inst.ub)
    semi.add_terms(n + ar, x, -1.0)
    b.nonneg(semi)

    box = AffineRows(2 * n)
    box.add_terms(ar, y, 1.0)
    box.const[n:] = 1.0
    box.add_terms(n + ar, y, -1.0)
    b.nonneg(box)

    F = _psd_factor(inst.Q - np.diag(r))
    k = F.shape[1]
    epi = AffineRows(k + 2)
    epi.const[0], epi.const[1] = 0.5, -0.5
    epi.add_terms([0, 1], theta[0], 0.5)
    if k:
        rr, cc = np.nonzero(F.T)
        epi.add_terms(2 + rr, x[cc], F.T[rr, cc])
    b.soc(epi)

    for i in range(n):
        cone = AffineRows(3)
        cone.add_terms([0, 0, 1, 2, 2], [phi[i], y[i], x[i], phi[i], y[i]], [0.5, 0.5, 1.0, 0.5, -0.5])
        b.soc(cone)
    return b.build()


@dataclass
class SocpResult:
    value: float
    x: np.ndarray
    y: np.ndarray
    phi: np.ndarray
    solution: ConicSolution


def solve_socp_relax(inst: Instance, rho: PerspectiveParams,
                     settings: Optional[ConicSettings] = None) -> SocpResult:
    settings = settings or ConicSettings()
    problem = build_socp_relax(inst, rho)
    sol = _checked_solve(problem, settings, "SOCP relaxation", infeasible_on=ConicStatus.INFEASIBLE)
    if sol is None:
        raise NonConvergence("SOCP relaxation did not converge")
    return SocpResult(
        value=sol.primal_obj,
        x=extract(sol, problem.layout, "x"),
        y=extract(sol, problem.layout, "y"),
        phi=extract(sol, problem.layout, "phi"),
        solution=sol,
    )


def recover_lift_params(rho: PerspectiveParams, x_star, y_star, lb=None, ub=None) -> LiftParams:
    """
    Tangent lift at the SOCP optimum: with xbar_i = x*_i / y*_i (clamped into
    [lb_i, ub_i] when bounds are given), u_i = -2 rho_i xbar_i and
    v_i = rho_i xbar_i^2; indices with y*_i < 1e-9 get (0, 0).
    """
    r = np.asarray(rho.rho, dtype=float)
    x = np.asarray(x_star, dtype=float)
    y = np.asarray(y_star, dtype=float)
    if x.shape != r.shape or y.shape != r.shape:
        raise DimensionMismatch(f"rho has {r.shape[0]} entries, point has {x.shape}/{y.shape}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise DegenerateInput("relaxation point has non-finite entries")
    if np.any(y < -1e-6):
        raise DegenerateInput(f"relaxation point has y below zero ({y.min():.3e})")

    on = y >= DEGENERATE_Y
    xbar = np.zeros_like(r)
    xbar[on] = x[on] / y[on]
    if lb is not None and ub is not None:
        xbar[on] = np.clip(xbar[on], np.asarray(lb)[on], np.asarray(ub)[on])
    u = np.where(on, -2.0 * r * xbar, 0.0)
    v = np.where(on, r * xbar ** 2, 0.0)
    return LiftParams(u=u, v=v)


def lift_params_to_rho(lp: LiftParams) -> PerspectiveParams:
    """rho_i = u_i^2 / (4 v_i), and 0 where v_i = 0."""
    u = np.asarray(lp.u, dtype=float)
    v = np.asarray(lp.v, dtype=float)
    safe = np.where(v > 0.0, v, 1.0)
    return PerspectiveParams(rho=np.where(v > 0.0, u * u / (4.0 * safe), 0.0))


def build_sdp_q(inst: Instance) -> ConicProblem:
    """
    SDP over the lift parameters (u, v) directly: one (2n+1) block
    [[Q, diag(u)/2, alpha/2], [., diag(v), beta/2], [., ., -eta'd - e'pi - tau]].
    """
    n = inst.n
    A, B, d = inequality_rows(inst)
    m = d.shape[0]
    ar = np.arange(n)
    xs, ys, corner = ar, n + ar, 2 * n

    b = ConicBuilder()
    u = b.variable("u", n)
    v = b.variable("v", n)
    tau = b.variable("tau", 1)
    eta = b.variable("eta", m, nonneg=True)
    mu = b.variable("mu", n, nonneg=True)
    sigma = b.variable("sigma", n, nonneg=True)
    lam = b.variable("lambda", n, nonneg=True)
    pi = b.variable("pi", n, nonneg=True)
    b.maximize(tau)

    M = MatrixExpr(2 * n + 1)
    M.const_block(0, 0, inst.Q)
    M.term(ys, xs, u, 0.5)
    M.term(ys, ys, v, 1.0)

    M.const(corner, xs, 0.5 * inst.c)
    M.term(corner, xs, u, -0.5)
    M.term(corner, xs, mu, -0.5)
    M.term(corner, xs, sigma, 0.5)

    M.const(corner, ys, 0.5 * inst.h)
    M.term(corner, ys, v, -0.5)
    M.term(corner, ys, mu, 0.5 * inst.lb)
    M.term(corner, ys, sigma, -0.5 * inst.ub)
    M.term(corner, ys, lam, -0.5)
    M.term(corner, ys, pi, 0.5)
    if m:
        M.term(corner, xs[None, :], eta[:, None], 0.5 * A)
        M.term(corner, ys[None, :], eta[:, None], 0.5 * B)
        M.term(corner, corner, eta, -d)
    M.term(corner, corner, pi, -1.0)
    M.term(corner, corner, tau, -1.0)
    b.psd(M)
    return b.build()


def solve_sdp_q(inst: Instance, settings: Optional[ConicSettings] = None) -> Tuple[LiftParams, float]:
    settings = settings or ConicSettings()
    problem = build_sdp_q(inst)
    sol = _checked_solve(problem, settings, "SDP_q")
    if sol is None:
        raise NonConvergence("SDP_q did not converge")
    lp = LiftParams(u=extract(sol, problem.layout, "u"), v=extract(sol, problem.layout, "v"))
    return repair_lift_params(inst, lp), float(extract(sol, problem.layout, "tau")[0])


def rho_from_sdp_q(inst: Instance, settings: Optional[ConicSettings] = None) -> Tuple[PerspectiveParams, float, LiftParams]:
    """rho = u^2 / 4v from the SDP_q optimum; optimal for the bound-maximizing rho problem."""
    lp, tau = solve_sdp_q(inst, settings)
    rho = lift_params_to_rho(lp)
    return PerspectiveParams(rho=_repair_rho(inst, rho.rho)), tau, lp


def build_sdp_a(inst: Instance, fix_t_zero: bool = False) -> ConicProblem:
    """
    SDP over (u, v, w, t): the SDP_q block extended by the squared residual
    penalties of the equality block (weights w) and of the slacked
    inequalities (weights t), on variables (x, y, s) plus the corner.
    """
    n = inst.n
    A, B, d, E, F, g = _qcr_rows(inst)
    m, me = d.shape[0], g.shape[0]
    ar = np.arange(n)
    xs, ys, ss, corner = ar, n + ar, 2 * n + np.arange(m), 2 * n + m
    rr, cc = np.tril_indices(n)

    b = ConicBuilder()
    u = b.variable("u", n)
    v = b.variable("v", n)
    w = b.variable("w", me)
    t = b.variable("t", m)
    tau = b.variable("tau", 1)
    eta = b.variable("eta", m)
    zeta = b.variable("zeta", me)
    delta = b.variable("delta", m, nonneg=True)
    mu = b.variable("mu", n, nonneg=True)
    sigma = b.variable("sigma", n, nonneg=True)
    lam = b.variable("lambda", n, nonneg=True)
    pi = b.variable("pi", n, nonneg=True)
    b.maximize(tau)
    if fix_t_zero and m:
        pin = AffineRows(m)
        pin.add_terms(np.arange(m), t, 1.0)
        b.zero(pin)

    M = MatrixExpr(corner + 1)
    M.const_block(0, 0, inst.Q)
    M.term(ys, xs, u, 0.5)
    M.term(ys, ys, v, 1.0)
    for j in range(me):
        M.term(rr, cc, w[j], E[j, rr] * E[j, cc])
        M.term(ys[:, None], xs[None, :], w[j], np.outer(F[j], E[j]))
        M.term(ys[rr], ys[cc], w[j], F[j, rr] * F[j, cc])
    for k in range(m):
        M.term(rr, cc, t[k], A[k, rr] * A[k, cc])
        M.term(ys[:, None], xs[None, :], t[k], np.outer(B[k], A[k]))
        M.term(ys[rr], ys[cc], t[k], B[k, rr] * B[k, cc])
        M.term(ss[k], xs, t[k], A[k])
        M.term(ss[k], ys, t[k], B[k])
        M.term(ss[k], ss[k], t[k], 1.0)

    M.const(corner, xs, 0.5 * inst.c)
    M.term(corner, xs, u, -0.5)
    M.term(corner, xs, mu, -0.5)
    M.term(corner, xs, sigma, 0.5)
    M.const(corner, ys, 0.5 * inst.h)
    M.term(corner, ys, v, -0.5)
    M.term(corner, ys, mu, 0.5 * inst.lb)
    M.term(corner, ys, sigma, -0.5 * inst.ub)
    M.term(corner, ys, lam, -0.5)
    M.term(corner, ys, pi, 0.5)
    if me:
        M.term(corner, xs[None, :], zeta[:, None], 0.5 * E)
        M.term(corner, ys[None, :], zeta[:, None], 0.5 * F)
        M.term(corner, xs[None, :], w[:, None], -E * g[:, None])
        M.term(corner, ys[None, :], w[:, None], -F * g[:, None])
        M.term(corner, corner, zeta, -g)
        M.term(corner, corner, w, g * g)
    if m:
        M.term(corner, xs[None, :], eta[:, None], 0.5 * A)
        M.term(corner, ys[None, :], eta[:, None], 0.5 * B)
        M.term(corner, xs[None, :], t[:, None], -A * d[:, None])
        M.term(corner, ys[None, :], t[:, None], -B * d[:, None])
        M.term(corner, ss, eta, 0.5)
        M.term(corner, ss, delta, -0.5)
        M.term(corner, ss, t, -d)
        M.term(corner, corner, eta, -d)
        M.term(corner, corner, t, d * d)
    M.term(corner, corner, pi, -1.0)
    M.term(corner, corner, tau, -1.0)
    b.psd(M)
    return b.build()


def solve_sdp_a(inst: Instance, settings: Optional[ConicSettings] = None,
                fix_t_zero: bool = False) -> Tuple[QcrParams, float]:
    settings = settings or ConicSettings()
    problem = build_sdp_a(inst, fix_t_zero=fix_t_zero)
    sol = _checked_solve(problem, settings, "SDP_a", infeasible_on=ConicStatus.UNBOUNDED)
    if sol is None:
        raise NonConvergence("SDP_a did not converge")
    lay = problem.layout
    params = QcrParams(
        u=extract(sol, lay, "u"), v=extract(sol, lay, "v"),
        w=extract(sol, lay, "w"), t=np.maximum(extract(sol, lay, "t"), 0.0),
    )
    return params, float(extract(sol, lay, "tau")[0])


# --- parameter pipeline and bound comparison ---

def select_rho(inst: Instance, method: str = "sdp_l",
               settings: Optional[ConicSettings] = None) -> RhoResult:
    start = time.perf_counter()
    if method == "sdp_l":
        return solve_sdp_l(inst, settings)
    if method == "sdp_q":
        rho, tau, _ = rho_from_sdp_q(inst, settings)
        return RhoResult(rho=rho, tau=tau, fallback=False, seconds=time.perf_counter() - start)
    if method == "sdp_simple":
        rho = rho_sdp_simple(inst, settings)
    elif method == "mineig":
        rho = rho_uniform_mineig(inst)
    elif method == "zero":
        rho = PerspectiveParams(rho=np.zeros(inst.n))
    else:
        raise ValueError(f"unknown rho method '{method}' (choose from {', '.join(RHO_METHODS)})")
    return RhoResult(rho=rho, tau=None, fallback=False, seconds=time.perf_counter() - start)


@dataclass
class LcrParams:
    rho: PerspectiveParams
    tau: Optional[float]
    lift: LiftParams
    socp_value: float
    x_star: np.ndarray
    y_star: np.ndarray
    time_sdp_l: float
    time_socp: float
    rho_method: str
    fallback: bool


def lcr_params(inst: Instance, settings: Optional[ConicSettings] = None,
               rho_method: str = "sdp_l", cache=None) -> LcrParams:
    """
    rho (SDP_l by default) -> SOCP relaxation -> tangent lift recovery.
    Results are memoized per instance when a ParameterCache is given.
    """
    settings = settings or ConicSettings()

    def compute() -> LcrParams:
        chosen = select_rho(inst, rho_method, settings)
        start = time.perf_counter()
        socp = solve_socp_relax(inst, chosen.rho, settings)
        lift = recover_lift_params(chosen.rho, socp.x, socp.y, inst.lb, inst.ub)
        lift = repair_lift_params(inst, lift)
        elapsed = time.perf_counter() - start
        logger.info(f"lift parameters ready: SOCP bound {socp.value:.10g}"
                    f" (rho {chosen.seconds:.2f}s, SOCP {elapsed:.2f}s)")
        return LcrParams(
            rho=chosen.rho, tau=chosen.tau, lift=lift, socp_value=socp.value,
            x_star=socp.x, y_star=socp.y, time_sdp_l=chosen.seconds, time_socp=elapsed,
            rho_method=rho_method, fallback=chosen.fallback,
        )

    if cache is None:
        return compute()
    return cache.get_or_compute(inst, f"lcr_params:{rho_method}:{settings.eps:g}", compute)


class BoundReport(BaseModel):
    bound_plain: Optional[float] = None
    bound_pr: Optional[float] = None
    bound_lcr: Optional[float] = None
    bound_qcr: Optional[float] = None
    opt: Optional[float] = None
    impr: Optional[float] = None
    tau_sdp_l: Optional[float] = None
    tau_sdp_a: Optional[float] = None
    rho_fallback: bool = False
    timings: Dict[str, float] = Field(default_factory=dict)
    failures: Dict[str, str] = Field(default_factory=dict)


def _relaxation_bound(model: MiqpModel, settings: Optional[QpSettings]) -> float:
    rel = model.relax(settings=settings)
    if rel.status is QpStatus.INFEASIBLE:
        return np.inf
    if rel.status is not QpStatus.OPTIMAL:
        raise NonConvergence(f"{model.kind} relaxation ended with {rel.status.value}")
    return rel.bound


def improvement(bound_qcr: Optional[float], bound_lcr: Optional[float], opt: Optional[float]) -> Optional[float]:
    """Fraction of the gap opt - bound_lcr closed by bound_qcr; None when undefined."""
    if bound_qcr is None or bound_lcr is None or opt is None:
        return None
    if not np.all(np.isfinite([bound_qcr, bound_lcr, opt])):
        return None
    denom = opt - bound_lcr
    if abs(denom) <= 1e-9 * (1.0 + abs(opt)):
        return None
    return (bound_qcr - bound_lcr) / denom


def bound_compare(inst: Instance, conic: Optional[ConicSettings] = None, qp: Optional[QpSettings] = None,
                  opt: Optional[float] = None, rho_method: str = "sdp_l", qcr: Optional[bool] = None,
                  cache=None) -> BoundReport:
    """
    Root bounds of every reformulation. Stage failures are logged and
    recorded in the report; they never abort the comparison.
    """
    conic = conic or ConicSettings()
    report = BoundReport(opt=opt)
    if qcr is None:
        qcr = inst.equality is not None

    start = time.perf_counter()
    try:
        report.bound_plain = _relaxation_bound(build_plain(inst), qp)
    except Exception as e:
        logger.error(f"plain relaxation failed: {e}")
        report.failures["plain"] = str(e)
    report.timings["plain"] = time.perf_counter() - start
    if report.bound_plain == np.inf:
        logger.info("continuous relaxation infeasible; parameter stages skipped")
        report.bound_pr = report.bound_lcr = np.inf
        if qcr:
            report.bound_qcr = np.inf
        return report

    try:
        params = lcr_params(inst, conic, rho_method=rho_method, cache=cache)
        report.bound_pr = params.socp_value
        report.tau_sdp_l = params.tau
        report.rho_fallback = params.fallback
        report.timings["sdp_l"] = params.time_sdp_l
        report.timings["socp"] = params.time_socp
        start = time.perf_counter()
        report.bound_lcr = _relaxation_bound(build_lcr(inst, params.lift), qp)
        report.timings["lcr"] = time.perf_counter() - start
    except InfeasibleProblem as e:
        logger.info(f"perspective relaxation infeasible: {e}")
        report.bound_pr = report.bound_lcr = np.inf
    except Exception as e:
        logger.error(f"perspective/lift stage failed: {e}")
        report.failures["lcr"] = str(e)

    if qcr:
        start = time.perf_counter()
        try:
            params_a, tau_a = solve_sdp_a(inst, conic)
            report.tau_sdp_a = tau_a
            report.bound_qcr = _relaxation_bound(build_qcr(inst, params_a), qp)
        except InfeasibleProblem as e:
            logger.info(f"QCR relaxation infeasible: {e}")
            report.bound_qcr = np.inf
        except Exception as e:
            logger.error(f"QCR stage failed: {e}")
            report.failures["qcr"] = str(e)
        report.timings["sdp_a"] = time.perf_counter() - start

    report.impr = improvement(report.bound_qcr, report.bound_lcr, opt)
    return report
