"""
Dense primal-dual interior-point solver for convex QPs

    minimize    1/2 z'Hz + q'z + constant
    subject to  G z <= g,  A z = b,  lower <= z <= upper

Mehrotra predictor-corrector on the reduced KKT system. When the iteration
stalls a phase-1 feasibility problem decides between Infeasible and a
numerical stall.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Tuple

import numpy as np
import scipy.linalg

from errors import DimensionMismatch
from settings_manager import QpSettings

logger = logging.getLogger(__name__)

STEP_FRACTION = 0.99
KKT_REG = 1e-10
STALL_WINDOW = 10
PHASE1_REG = 1e-8


class QpStatus(str, Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    ITER_LIMIT = "IterLimit"


def _rows(m, ncols) -> np.ndarray:
    if m is None:
        return np.zeros((0, ncols))
    return np.asarray(m, dtype=float).reshape(-1, ncols)


@dataclass
class QpProblem:
    hessian: np.ndarray
    linear: np.ndarray
    ineq_matrix: Optional[np.ndarray] = None
    ineq_rhs: Optional[np.ndarray] = None
    eq_matrix: Optional[np.ndarray] = None
    eq_rhs: Optional[np.ndarray] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    constant: float = 0.0

    def __post_init__(self):
        self.linear = np.asarray(self.linear, dtype=float).ravel()
        n = self.linear.shape[0]
        self.hessian = np.asarray(self.hessian, dtype=float)
        if self.hessian.shape != (n, n):
            raise DimensionMismatch(f"hessian {self.hessian.shape} vs {n} variables")
        self.ineq_matrix = _rows(self.ineq_matrix, n)
        self.ineq_rhs = np.zeros(0) if self.ineq_rhs is None else np.asarray(self.ineq_rhs, dtype=float).ravel()
        self.eq_matrix = _rows(self.eq_matrix, n)
        self.eq_rhs = np.zeros(0) if self.eq_rhs is None else np.asarray(self.eq_rhs, dtype=float).ravel()
        if self.ineq_rhs.shape[0] != self.ineq_matrix.shape[0]:
            raise DimensionMismatch("inequality matrix and rhs row counts differ")
        if self.eq_rhs.shape[0] != self.eq_matrix.shape[0]:
            raise DimensionMismatch("equality matrix and rhs row counts differ")
        self.lower = np.full(n, -np.inf) if self.lower is None else np.asarray(self.lower, dtype=float)
        self.upper = np.full(n, np.inf) if self.upper is None else np.asarray(self.upper, dtype=float)
        if self.lower.shape != (n,) or self.upper.shape != (n,):
            raise DimensionMismatch("bound vectors must have one entry per variable")

    @property
    def num_vars(self) -> int:
        return self.linear.shape[0]

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ self.hessian @ z + self.linear @ z + self.constant)

    def stacked_inequalities(self) -> Tuple[np.ndarray, np.ndarray]:
        """Inequality rows with the finite box bounds appended."""
        n = self.num_vars
        eye = np.eye(n)
        lo = np.isfinite(self.lower)
        up = np.isfinite(self.upper)
        G = np.vstack([self.ineq_matrix, -eye[lo], eye[up]])
        g = np.concatenate([self.ineq_rhs, -self.lower[lo], self.upper[up]])
        return G, g


@dataclass
class QpSolution:
    z: np.ndarray
    status: QpStatus
    obj: float
    ineq_dual: np.ndarray = field(default_factory=lambda: np.zeros(0))
    eq_dual: np.ndarray = field(default_factory=lambda: np.zeros(0))
    iterations: int = 0
    prox: float = 0.0
    residuals: Tuple[float, float, float] = (np.inf, np.inf, np.inf)  # (primal, dual, complementarity)
    certificate: Optional[np.ndarray] = None


def _inf(v: np.ndarray) -> float:
    return float(np.max(np.abs(v))) if v.size else 0.0


def _step(v: np.ndarray, dv: np.ndarray) -> float:
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _ipm(H, q, G, g, A, b, settings: QpSettings, stall_check: bool = True):
    """
    Core Mehrotra loop. Returns (z, lam, nu, converged, stalled, iterations, residuals).
    """
    n, mi, me = q.shape[0], G.shape[0], A.shape[0]
    tol = settings.tol
    z = np.zeros(n)
    s = np.maximum(g - G @ z, 1.0)
    lam = np.ones(mi)
    nu = np.zeros(me)
    scale_p = 1.0 + max(_inf(g), _inf(b))
    scale_d = 1.0 + _inf(q)
    history = []
    res = (np.inf, np.inf, np.inf)

    for it in range(1, settings.max_iter + 1):
        rd = H @ z + q + G.T @ lam + A.T @ nu
        re = A @ z - b
        ri = G @ z + s - g
        mu = float(s @ lam) / mi if mi else 0.0
        pres = max(_inf(re), _inf(ri))
        obj = 0.5 * z @ H @ z + q @ z
        res = (pres, _inf(rd), mi * mu)
        if pres <= tol * scale_p and res[1] <= tol * scale_d and mi * mu <= tol * (1.0 + abs(obj)):
            return z, lam, nu, True, False, it, res

        history.append(pres)
        if (stall_check and it > STALL_WINDOW + 5 and pres > tol * scale_p
                and pres > 0.5 * history[-1 - STALL_WINDOW]):
            return z, lam, nu, False, True, it, res
        if mi and (np.max(lam) > 1e14 or np.min(s) <= 0.0):
            return z, lam, nu, False, True, it, res

        w = lam / s
        K = np.zeros((n + me, n + me))
        K[:n, :n] = H + (G.T * w) @ G
        K[np.arange(n), np.arange(n)] += settings.prox
        K[:n, n:] = A.T
        K[n:, :n] = A
        K[n:, n:] = -KKT_REG * np.eye(me)
        try:
            lu = scipy.linalg.lu_factor(K, check_finite=False)
        except (ValueError, np.linalg.LinAlgError):
            return z, lam, nu, False, True, it, res

        def direction(rc):
            rhs = np.concatenate([-rd + G.T @ ((rc - lam * ri) / s), -re])
            sol = scipy.linalg.lu_solve(lu, rhs, check_finite=False)
            dz, dnu = sol[:n], sol[n:]
            Gdz = G @ dz
            ds = -ri - Gdz
            dlam = (-rc + lam * ri) / s + w * Gdz
            return dz, ds, dlam, dnu

        dz, ds, dlam, dnu = direction(s * lam)
        if mi:
            a_aff = min(_step(s, ds), _step(lam, dlam))
            mu_aff = float((s + a_aff * ds) @ (lam + a_aff * dlam)) / mi
            sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
            dz, ds, dlam, dnu = direction(s * lam + ds * dlam - sigma * mu)
            alpha = min(1.0, STEP_FRACTION * min(_step(s, ds), _step(lam, dlam)))
        else:
            alpha = 1.0

        z = z + alpha * dz
        s = s + alpha * ds
        lam = lam + alpha * dlam
        nu = nu + alpha * dnu
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(lam))):
            return z, lam, nu, False, True, it, res

    return z, lam, nu, False, False, settings.max_iter, res


def _phase_one(G, g, A, b, settings: QpSettings) -> Tuple[float, np.ndarray]:
    """
    min t + sum(p + r)  s.t.  G z - t <= g,  t >= 0,  A z + p - r = b,  p, r >= 0.
    Returns the total violation and the multipliers of the G rows.
    """
    n, mi, me = G.shape[1], G.shape[0], A.shape[0]
    nv = n + 1 + 2 * me
    H = np.zeros((nv, nv))
    H[np.arange(n), np.arange(n)] = PHASE1_REG
    q = np.concatenate([np.zeros(n), [1.0], np.ones(2 * me)])

    G1 = np.zeros((mi + 1 + 2 * me, nv))
    G1[:mi, :n] = G
    G1[:mi, n] = -1.0
    G1[mi, n] = -1.0
    G1[mi + 1:, n + 1:] = -np.eye(2 * me)
    g1 = np.concatenate([g, np.zeros(1 + 2 * me)])
    A1 = np.hstack([A, np.zeros((me, 1)), np.eye(me), -np.eye(me)])

    z, lam, _, _, _, _, _ = _ipm(H, q, G1, g1, A1, b, settings.model_copy(update={"max_iter": 2 * settings.max_iter}),
                                 stall_check=False)
    violation = float(z[n] + np.sum(z[n + 1:]))
    return violation, lam[:mi]


def solve_qp(p: QpProblem, settings: Optional[QpSettings] = None) -> QpSolution:
    settings = settings or QpSettings()
    H = 0.5 * (p.hessian + p.hessian.T)
    q = p.linear
    G, g = p.stacked_inequalities()
    A, b = p.eq_matrix, p.eq_rhs

    z, lam, nu, converged, stalled, it, res = _ipm(H, q, G, g, A, b, settings)
    if not converged:
        violation, farkas = _phase_one(G, g, A, b, settings)
        threshold = 1e-6 * (1.0 + max(_inf(g), _inf(b)))
        if violation > threshold:
            logger.debug(f"QP infeasible: phase-1 violation {violation:.3e} after {it} iterations")
            return QpSolution(z=z, status=QpStatus.INFEASIBLE, obj=np.inf, iterations=it,
                              prox=settings.prox, residuals=res, certificate=farkas)
        if stalled:
            logger.warning(f"QP interior-point stalled at iteration {it} on a feasible problem; resuming")
            z, lam, nu, converged, _, more, res = _ipm(H, q, G, g, A, b, settings, stall_check=False)
            it += more

    status = QpStatus.OPTIMAL if converged else QpStatus.ITER_LIMIT
    if not converged:
        logger.warning(f"QP interior-point hit the iteration limit; residuals {res}")
    return QpSolution(
        z=z, status=status, obj=p.objective(z), ineq_dual=lam, eq_dual=nu,
        iterations=it, prox=settings.prox, residuals=res,
    )
