"""
Operator-splitting (ADMM) solver for cone programs

    minimize    objective' z
    subject to  M z + s = r,   s in K

where K is a product of the zero cone, the nonnegative orthant, second-order
cones and PSD cones (lower-triangular vectorization, off-diagonals scaled by
sqrt(2) so the cone is self-dual). The dual is

    maximize   -r' y   subject to  M' y + objective = 0,  y in K.

ConicBuilder assembles these problems from named variable spans and affine
expressions so the SDP/SOCP builders can be written block by block.
"""
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from core_linalg import psd_project_stack
from errors import DimensionMismatch, UnknownSymbol
from settings_manager import ConicSettings

logger = logging.getLogger(__name__)

SQRT2 = np.sqrt(2.0)


def svec_size(s: int) -> int:
    return s * (s + 1) // 2


def _tril(s: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows, cols = np.tril_indices(s)
    scale = np.where(rows == cols, 1.0, SQRT2)
    return rows, cols, scale


def svec(m: np.ndarray) -> np.ndarray:
    rows, cols, scale = _tril(m.shape[0])
    return m[rows, cols] * scale


def smat(v: np.ndarray, s: int) -> np.ndarray:
    rows, cols, scale = _tril(s)
    out = np.zeros((s, s))
    out[rows, cols] = v / scale
    out[cols, rows] = v / scale
    return out


@dataclass(frozen=True)
class ConeSpec:
    zero_dim: int = 0
    nonneg_dim: int = 0
    soc_dims: Tuple[int, ...] = ()
    psd_dims: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.zero_dim < 0 or self.nonneg_dim < 0:
            raise ValueError("cone dimensions must be nonnegative")
        if any(k < 2 for k in self.soc_dims):
            raise ValueError("second-order cones need dimension >= 2")
        if any(k < 1 for k in self.psd_dims):
            raise ValueError("PSD blocks need side length >= 1")

    @property
    def total_dim(self) -> int:
        return (self.zero_dim + self.nonneg_dim + sum(self.soc_dims)
                + sum(svec_size(s) for s in self.psd_dims))


@dataclass
class VariableLayout:
    """Named, disjoint index spans over the decision vector z."""
    spans: Dict[str, slice] = field(default_factory=dict)
    size: int = 0

    def add(self, name: str, length: int) -> slice:
        if name in self.spans:
            raise ValueError(f"symbol '{name}' declared twice")
        span = slice(self.size, self.size + length)
        self.spans[name] = span
        self.size += length
        return span

    def span(self, name: str) -> slice:
        if name not in self.spans:
            raise UnknownSymbol(f"unknown symbol '{name}' (known: {', '.join(self.spans)})")
        return self.spans[name]

    def indices(self, name: str) -> np.ndarray:
        s = self.span(name)
        return np.arange(s.start, s.stop)


@dataclass
class ConicProblem:
    objective: np.ndarray
    constraint_matrix: sp.csc_matrix
    constraint_rhs: np.ndarray
    cones: ConeSpec
    layout: VariableLayout

    def __post_init__(self):
        rows, cols = self.constraint_matrix.shape
        if cols != self.objective.shape[0] or rows != self.constraint_rhs.shape[0]:
            raise DimensionMismatch(
                f"constraint matrix {rows}x{cols} vs objective {self.objective.shape[0]}"
                f" and rhs {self.constraint_rhs.shape[0]}"
            )
        if rows != self.cones.total_dim:
            raise DimensionMismatch(f"{rows} constraint rows but cones span {self.cones.total_dim}")
        if self.layout.size != cols:
            raise DimensionMismatch(f"layout covers {self.layout.size} of {cols} variables")
        if not np.all(np.isfinite(self.constraint_matrix.data)):
            raise ValueError("constraint matrix has non-finite entries")

    @property
    def num_vars(self) -> int:
        return self.objective.shape[0]


class ConicStatus(str, Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    ITER_LIMIT = "IterLimit"


@dataclass
class ConicSolution:
    z: np.ndarray
    dual: np.ndarray
    slack: np.ndarray
    status: ConicStatus
    primal_obj: float
    dual_obj: float
    residuals: Tuple[float, float, float]  # (primal, dual, gap)
    iterations: int
    solve_time: float
    layout: Optional[VariableLayout] = None

    def usable(self, eps: float) -> bool:
        """
        Optimal, or stopped at the iteration limit with the cone constraints on
        z met within eps. The SDP multipliers live in z, so that residual is the
        one that keeps the reported bound valid.
        """
        if self.status is ConicStatus.OPTIMAL:
            return True
        return self.status is ConicStatus.ITER_LIMIT and self.residuals[0] <= eps

    def value(self, symbol: str) -> np.ndarray:
        return extract(self, self.layout, symbol)


def extract(sol: ConicSolution, layout: VariableLayout, symbol: str) -> np.ndarray:
    """Return the named span of the primal vector."""
    return sol.z[layout.span(symbol)].copy()


# --- problem assembly ---

class AffineRows:
    """
    A block of affine expressions  const + C z  stored as COO triplets.
    """
    def __init__(self, length: int):
        self.length = length
        self.const = np.zeros(length)
        self.rows: List[np.ndarray] = []
        self.cols: List[np.ndarray] = []
        self.vals: List[np.ndarray] = []

    def add_const(self, rows, values):
        np.add.at(self.const, np.atleast_1d(rows), np.broadcast_to(values, np.shape(np.atleast_1d(rows))))

    def add_terms(self, rows, cols, coefs):
        rows = np.atleast_1d(np.asarray(rows, dtype=int))
        cols = np.atleast_1d(np.asarray(cols, dtype=int))
        rows, cols = np.broadcast_arrays(rows, cols)
        coefs = np.broadcast_to(np.asarray(coefs, dtype=float), rows.shape)
        keep = coefs != 0.0
        self.rows.append(rows[keep].ravel())
        self.cols.append(cols[keep].ravel())
        self.vals.append(coefs[keep].ravel())

    def triplets(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        if not self.rows:
            return np.zeros(0, int), np.zeros(0, int), np.zeros(0)
        return np.concatenate(self.rows), np.concatenate(self.cols), np.concatenate(self.vals)


class MatrixExpr:
    """
    A symmetric affine matrix expression  C0 + sum_j z_j C_j  of side s.
    Entries are addressed in either triangle and stored once.
    """
    def __init__(self, side: int):
        self.side = side
        self._rows, self._cols, self._scale = _tril(side)
        self._index = np.full((side, side), -1, dtype=int)
        self._index[self._rows, self._cols] = np.arange(len(self._rows))
        self._index[self._cols, self._rows] = np.arange(len(self._rows))
        self.expr = AffineRows(len(self._rows))

    def _entry(self, i, j) -> np.ndarray:
        return self._index[np.asarray(i), np.asarray(j)]

    def const(self, i, j, values):
        """Add constant values at entries (i, j) (and their mirrors)."""
        i, j, values = np.broadcast_arrays(np.asarray(i), np.asarray(j), np.asarray(values, dtype=float))
        self.expr.add_const(self._entry(i, j).ravel(), values.ravel())

    def const_block(self, r0: int, c0: int, block: np.ndarray):
        """Add a dense constant block with top-left corner (r0, c0) below or on the diagonal."""
        block = np.asarray(block, dtype=float)
        ii, jj = np.meshgrid(np.arange(block.shape[0]) + r0, np.arange(block.shape[1]) + c0, indexing="ij")
        mask = ii >= jj
        self.const(ii[mask], jj[mask], block[mask])

    def term(self, i, j, var, coef):
        """Add coef * z[var] at entries (i, j); arguments broadcast."""
        i, j, var, coef = np.broadcast_arrays(np.asarray(i), np.asarray(j), np.asarray(var),
                                              np.asarray(coef, dtype=float))
        self.expr.add_terms(self._entry(i, j).ravel(), var.ravel(), coef.ravel())

    def scaled(self) -> AffineRows:
        """The svec form of the expression (off-diagonal rows scaled by sqrt(2))."""
        out = AffineRows(self.expr.length)
        out.const = self.expr.const * self._scale
        r, c, v = self.expr.triplets()
        out.add_terms(r, c, v * self._scale[r])
        return out


class ConicBuilder:
    """
    Collects variables, sign restrictions and cone memberships, then emits a
    ConicProblem in standard form.
    """
    def __init__(self):
        self.layout = VariableLayout()
        self._objective: Dict[int, float] = {}
        self._zero: List[AffineRows] = []
        self._nonneg: List[AffineRows] = []
        self._soc: List[AffineRows] = []
        self._psd: List[Tuple[int, AffineRows]] = []

    def variable(self, name: str, size: int, nonneg: bool = False) -> np.ndarray:
        span = self.layout.add(name, size)
        idx = np.arange(span.start, span.stop)
        if nonneg and size:
            rows = AffineRows(size)
            rows.add_terms(np.arange(size), idx, 1.0)
            self._nonneg.append(rows)
        return idx

    def minimize(self, var, coef):
        for j, cj in zip(np.atleast_1d(var), np.broadcast_to(coef, np.shape(np.atleast_1d(var)))):
            self._objective[int(j)] = self._objective.get(int(j), 0.0) + float(cj)

    def maximize(self, var, coef=1.0):
        self.minimize(var, -np.asarray(coef, dtype=float))

    def zero(self, expr: AffineRows):
        """Constrain expr == 0."""
        self._zero.append(expr)

    def nonneg(self, expr: AffineRows):
        """Constrain expr >= 0."""
        self._nonneg.append(expr)

    def soc(self, expr: AffineRows):
        """Constrain (expr[0], expr[1:]) to the second-order cone."""
        self._soc.append(expr)

    def psd(self, mat: MatrixExpr):
        self._psd.append((mat.side, mat.scaled()))

    def build(self) -> ConicProblem:
        blocks = self._zero + self._nonneg + self._soc + [e for _, e in self._psd]
        cones = ConeSpec(
            zero_dim=sum(e.length for e in self._zero),
            nonneg_dim=sum(e.length for e in self._nonneg),
            soc_dims=tuple(e.length for e in self._soc),
            psd_dims=tuple(s for s, _ in self._psd),
        )
        rows, cols, vals, rhs = [], [], [], []
        offset = 0
        for expr in blocks:
            r, c, v = expr.triplets()
            rows.append(r + offset)
            cols.append(c)
            vals.append(-v)  # s = const + C z  =>  (-C) z + s = const
            rhs.append(expr.const)
            offset += expr.length
        nv = self.layout.size
        matrix = sp.csc_matrix(
            (np.concatenate(vals) if vals else np.zeros(0),
             (np.concatenate(rows) if rows else np.zeros(0, int),
              np.concatenate(cols) if cols else np.zeros(0, int))),
            shape=(offset, nv),
        )
        matrix.sum_duplicates()
        objective = np.zeros(nv)
        for j, cj in self._objective.items():
            objective[j] = cj
        return ConicProblem(
            objective=objective,
            constraint_matrix=matrix,
            constraint_rhs=np.concatenate(rhs) if rhs else np.zeros(0),
            cones=cones,
            layout=self.layout,
        )


# --- cone projections ---

class _ConeProjector:
    """Projection onto K, batching same-sized SOC and PSD blocks."""

    def __init__(self, cones: ConeSpec):
        self.zero = slice(0, cones.zero_dim)
        self.nonneg = slice(cones.zero_dim, cones.zero_dim + cones.nonneg_dim)
        offset = cones.zero_dim + cones.nonneg_dim

        soc_groups: Dict[int, List[int]] = {}
        for k in cones.soc_dims:
            soc_groups.setdefault(k, []).append(offset)
            offset += k
        self.soc = {k: (np.array(starts)[:, None] + np.arange(k)) for k, starts in soc_groups.items()}

        psd_groups: Dict[int, List[int]] = {}
        for s in cones.psd_dims:
            psd_groups.setdefault(s, []).append(offset)
            offset += svec_size(s)
        self.psd = {}
        for s, starts in psd_groups.items():
            rows, cols, scale = _tril(s)
            idx = np.array(starts)[:, None] + np.arange(svec_size(s))
            self.psd[s] = (idx, rows, cols, scale)
        self.block_ids = self._block_ids(cones)

    @staticmethod
    def _block_ids(cones: ConeSpec) -> np.ndarray:
        ids = [np.arange(cones.zero_dim + cones.nonneg_dim)]
        nxt = cones.zero_dim + cones.nonneg_dim
        for k in cones.soc_dims:
            ids.append(np.full(k, nxt))
            nxt += 1
        for s in cones.psd_dims:
            ids.append(np.full(svec_size(s), nxt))
            nxt += 1
        return np.concatenate(ids) if ids else np.zeros(0, int)

    def project(self, v: np.ndarray, dual: bool = False) -> np.ndarray:
        """Project onto K (dual=False) or K* (dual=True); they differ only on the zero cone."""
        out = v.copy()
        out[self.zero] = v[self.zero] if dual else 0.0
        out[self.nonneg] = np.maximum(v[self.nonneg], 0.0)

        for idx in self.soc.values():
            blk = v[idx]
            t = blk[:, 0]
            x = blk[:, 1:]
            nx = np.linalg.norm(x, axis=1)
            res = blk.copy()
            below = nx <= -t
            res[below] = 0.0
            mid = (nx > np.abs(t))
            if np.any(mid):
                a = 0.5 * (nx[mid] + t[mid])
                res[mid, 0] = a
                res[mid, 1:] = x[mid] * (a / nx[mid])[:, None]
            out[idx] = res

        for s, (idx, rows, cols, scale) in self.psd.items():
            vals = v[idx] / scale
            mats = np.zeros((idx.shape[0], s, s))
            mats[:, rows, cols] = vals
            mats[:, cols, rows] = vals
            proj = psd_project_stack(mats)
            out[idx] = proj[:, rows, cols] * scale
        return out

    def distance(self, v: np.ndarray, dual: bool = False) -> float:
        if v.size == 0:
            return 0.0
        return float(np.max(np.abs(v - self.project(v, dual=dual))))


def _equilibrate(M: sp.csc_matrix, block_ids: np.ndarray, iters: int):
    """Ruiz scaling D M E with D constant on every SOC/PSD block."""
    rows, cols = M.shape
    D = np.ones(rows)
    E = np.ones(cols)
    A = M.tocsr(copy=True)
    nblocks = int(block_ids.max()) + 1 if rows else 0
    for _ in range(iters):
        absA = abs(A)
        row_norm = np.asarray(absA.max(axis=1).todense()).ravel() if rows else np.zeros(0)
        col_norm = np.asarray(absA.max(axis=0).todense()).ravel() if cols else np.zeros(0)
        if rows:
            block_max = np.zeros(nblocks)
            np.maximum.at(block_max, block_ids, row_norm)
            row_norm = block_max[block_ids]
        d = 1.0 / np.sqrt(np.clip(np.where(row_norm > 0, row_norm, 1.0), 1e-4, 1e4))
        e = 1.0 / np.sqrt(np.clip(np.where(col_norm > 0, col_norm, 1.0), 1e-4, 1e4))
        A = sp.diags(d) @ A @ sp.diags(e)
        D *= d
        E *= e
    return A.tocsc(), D, E


def _factor(M: sp.csc_matrix, R: np.ndarray, sigma: float):
    K = (M.T @ sp.diags(R) @ M).toarray()
    K[np.diag_indices_from(K)] += sigma
    return scipy.linalg.cho_factor(K, lower=True, check_finite=False)


def solve_conic(p: ConicProblem, settings: Optional[ConicSettings] = None) -> ConicSolution:
    """
    Solve the cone program with over-relaxed ADMM on the equilibrated data.

    The stopping test uses unscaled residuals: primal ||Mz + s - r||, dual
    ||M'y + c||, and the duality gap, each within eps absolute plus eps relative.
    """
    settings = settings or ConicSettings()
    start = time.perf_counter()
    eps = settings.eps
    nv = p.num_vars
    nrows = p.constraint_rhs.shape[0]
    proj = _ConeProjector(p.cones)

    Ms, D, E = _equilibrate(p.constraint_matrix, proj.block_ids, settings.scaling_iters)
    c_scaled = E * p.objective
    gamma = 1.0 / max(1.0, float(np.max(np.abs(c_scaled))) if nv else 1.0)
    c = gamma * c_scaled
    r = D * p.constraint_rhs
    MsT = Ms.T.tocsr()

    def rho_vector(rho):
        R = np.full(nrows, rho)
        R[proj.zero] = 1e3 * rho
        return R

    rho = settings.rho
    R = rho_vector(rho)
    factor = _factor(Ms, R, settings.sigma)

    z = np.zeros(nv)
    w = np.zeros(nrows)
    y = np.zeros(nrows)
    z_prev, y_prev = z.copy(), y.copy()
    alpha, sigma = settings.alpha, settings.sigma

    def project_C(v):
        # C = r - K
        return r - proj.project(r - v)

    def unscaled(z, w, y):
        zu = E * z
        su = (r - w) / D
        yu = D * y / gamma
        return zu, su, yu

    status = ConicStatus.ITER_LIMIT
    res = (np.inf, np.inf, np.inf)
    pobj = dobj = np.nan
    it = 0
    for it in range(1, settings.max_iter + 1):
        rhs = sigma * z - c + MsT @ (R * w - y)
        z_t = scipy.linalg.cho_solve(factor, rhs, check_finite=False)
        w_t = Ms @ z_t
        z_prev, y_prev = z, y
        z = alpha * z_t + (1.0 - alpha) * z
        w_hat = alpha * w_t + (1.0 - alpha) * w
        w = project_C(w_hat + y / R)
        y = y + R * (w_hat - w)

        if it % settings.check_interval and it != settings.max_iter:
            continue

        zu, su, yu = unscaled(z, w, y)
        Mz = p.constraint_matrix @ zu
        MTy = p.constraint_matrix.T @ yu
        pobj = float(p.objective @ zu)
        dobj = float(-p.constraint_rhs @ yu)
        r_prim = float(np.max(np.abs(Mz + su - p.constraint_rhs))) if nrows else 0.0
        r_dual = float(np.max(np.abs(MTy + p.objective))) if nv else 0.0
        r_gap = abs(pobj - dobj)
        res = (r_prim, r_dual, r_gap)

        def _inf(v):
            return float(np.max(np.abs(v))) if v.size else 0.0

        tol_p = eps + eps * max(_inf(Mz), _inf(su), _inf(p.constraint_rhs))
        tol_d = eps + eps * max(_inf(MTy), _inf(p.objective))
        tol_g = eps * (1.0 + max(abs(pobj), abs(dobj)))
        if r_prim <= tol_p and r_dual <= tol_d and r_gap <= tol_g:
            status = ConicStatus.OPTIMAL
            break

        # infeasibility certificates from successive differences
        dy = D * (y - y_prev) / gamma
        ndy = _inf(dy)
        if ndy > 1e-12:
            if (_inf(p.constraint_matrix.T @ dy) <= settings.eps_infeas * ndy
                    and float(p.constraint_rhs @ dy) < -settings.eps_infeas * ndy
                    and proj.distance(dy / ndy, dual=True) <= settings.eps_infeas):
                status = ConicStatus.INFEASIBLE
                y = y - y_prev
                break
        dz = E * (z - z_prev)
        ndz = _inf(dz)
        if ndz > 1e-12:
            Mdz = p.constraint_matrix @ dz
            if (float(p.objective @ dz) < -settings.eps_infeas * ndz
                    and proj.distance(-Mdz / ndz) <= settings.eps_infeas):
                status = ConicStatus.UNBOUNDED
                break

        if it % settings.adaptive_interval == 0:
            w_s = Ms @ z
            prim = _inf(w_s - w) / max(_inf(w_s), _inf(w), 1e-12)
            dual = _inf(c + MsT @ y) / max(_inf(MsT @ y), _inf(c), 1e-12)
            if prim > 0 and dual > 0:
                new_rho = float(np.clip(rho * np.sqrt(prim / dual), 1e-6, 1e6))
                if new_rho > 5.0 * rho or new_rho < 0.2 * rho:
                    logger.debug(f"iter {it}: rho {rho:.3e} -> {new_rho:.3e}")
                    rho = new_rho
                    R = rho_vector(rho)
                    factor = _factor(Ms, R, sigma)

    zu, su, yu = unscaled(z, w, y)
    elapsed = time.perf_counter() - start
    logger.debug(
        f"conic solve: {status.value} after {it} iterations, pobj={pobj:.10g}, dobj={dobj:.10g},"
        f" res={res[0]:.2e}/{res[1]:.2e}/{res[2]:.2e}, {elapsed:.2f}s"
    )
    if status is ConicStatus.ITER_LIMIT:
        logger.warning(f"conic solver hit the iteration limit ({settings.max_iter}); residuals {res}")
    return ConicSolution(
        z=zu, dual=yu, slack=su, status=status,
        primal_obj=pobj, dual_obj=dobj, residuals=res,
        iterations=it, solve_time=elapsed, layout=p.layout,
    )


def check_cone_membership(p: ConicProblem, slack: np.ndarray, tol: float = 1e-7) -> bool:
    """True when every slack block lies in its cone (PSD blocks: min eigenvalue >= -tol*(1+||block||))."""
    proj = _ConeProjector(p.cones)
    if p.cones.zero_dim and np.max(np.abs(slack[proj.zero])) > tol:
        return False
    if p.cones.nonneg_dim and np.min(slack[proj.nonneg]) < -tol:
        return False
    for idx in proj.soc.values():
        blk = slack[idx]
        if np.any(np.linalg.norm(blk[:, 1:], axis=1) - blk[:, 0] > tol * (1.0 + np.abs(blk[:, 0]))):
            return False
    for s, (idx, _, _, _) in proj.psd.items():
        for row in idx:
            mat = smat(slack[row], s)
            if np.linalg.eigvalsh(mat)[0] < -tol * (1.0 + np.linalg.norm(mat, np.inf)):
                return False
    return True
