"""
Best-bound branch-and-bound over the binary y of an MiqpModel, with optional
lazy perspective-cut separation (branch-and-cut), and an enumeration oracle.
"""
import heapq
import itertools
import logging
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import FrozenSet, List, Optional, Set, Tuple

import numpy as np
from pydantic import BaseModel

from errors import InfeasibleProblem, TooLarge
from model import Instance, SolverPoint, is_feasible, objective
from qp import QpStatus
from reformulate import MiqpModel, PerspectiveParams, build_pc, build_plain
from settings_manager import SolveSettings

logger = logging.getLogger(__name__)

ORACLE_MAX_N = 20
PRUNE_TOL = 1e-9


class SolveStatus(str, Enum):
    OPTIMAL = "Optimal"
    GAP_REACHED = "GapReached"
    TIME_LIMIT = "TimeLimit"
    NODE_LIMIT = "NodeLimit"
    INFEASIBLE = "Infeasible"


class SolveStats(BaseModel):
    nodes_explored: int = 0
    cuts_added: int = 0
    wall_time: float = 0.0
    final_gap: float = float("inf")
    status: SolveStatus = SolveStatus.INFEASIBLE
    best_bound: float = float("-inf")
    root_bound: Optional[float] = None


@dataclass(order=True)
class Node:
    bound: float
    seq: int
    fixed_zero: FrozenSet[int] = field(compare=False, default=frozenset())
    fixed_one: FrozenSet[int] = field(compare=False, default=frozenset())
    depth: int = field(compare=False, default=0)

    @property
    def parent_bound(self) -> float:
        return self.bound


@dataclass
class NodeResult:
    node: Node
    bound: float
    z: Optional[np.ndarray]
    status: QpStatus
    cuts: int = 0


def relative_gap(incumbent: float, bound: float) -> float:
    if not np.isfinite(incumbent):
        return float("inf")
    return max(0.0, (incumbent - bound) / (1e-10 + abs(incumbent)))


def _fixed_support_value(plain: MiqpModel, y: np.ndarray, settings: SolveSettings):
    """Best x for a fixed binary y; returns (point, objective), or None when infeasible or unresolved."""
    inst = plain.instance
    zero = [i for i in range(inst.n) if y[i] < 0.5]
    one = [i for i in range(inst.n) if y[i] >= 0.5]
    rel = plain.relax(plain.fixing(zero, one), settings.qp)
    if rel.status is QpStatus.INFEASIBLE:
        return None
    if rel.status is not QpStatus.OPTIMAL:
        logger.warning(f"support {one} skipped: fixed-y QP ended with {rel.status.value}")
        return None
    point = plain.point(rel.z)
    point = SolverPoint(x=np.where(y >= 0.5, point.x, 0.0), y=np.where(y >= 0.5, 1.0, 0.0))
    if not is_feasible(inst, point):
        return None
    return point, objective(inst, point)


class BranchAndBound:
    """
    Node queue ordered by bound with FIFO ties; most-fractional branching with
    ties to the smallest index. Incumbents are always re-evaluated with the
    original objective at the best x for their support.
    """
    def __init__(self, model: MiqpModel, settings: Optional[SolveSettings] = None, separate: bool = False):
        self.model = model
        self.settings = settings or SolveSettings()
        self.separate = separate
        self.instance = model.instance
        self.plain = model if model.kind == "plain" else build_plain(model.instance)
        self.incumbent: Optional[SolverPoint] = None
        self.incumbent_value = float("inf")
        self.stats = SolveStats()
        self._queue: List[Node] = []
        self._seq = itertools.count()
        self._tried: Set[Tuple[int, ...]] = set()
        self._lock = threading.Lock()

    # --- incumbents ---

    def _offer(self, y: np.ndarray):
        key = tuple(int(v) for v in (y >= 0.5))
        with self._lock:
            if key in self._tried:
                return
            self._tried.add(key)
        found = _fixed_support_value(self.plain, np.array(key, dtype=float), self.settings)
        if found is None:
            return
        point, value = found
        with self._lock:
            if value < self.incumbent_value - 1e-12 * (1.0 + abs(value)):
                logger.debug(f"new incumbent {value:.12g}")
                self.incumbent, self.incumbent_value = point, value

    def _rounding_heuristic(self, node: Node, y: np.ndarray):
        """Round at 0.5 and keep the K largest entries of y."""
        y = np.array(y, dtype=float)
        y[list(node.fixed_zero)] = 0.0
        y[list(node.fixed_one)] = 1.0
        rounded = (y >= 0.5).astype(float)
        K = self.instance.cardinality
        if K is not None and rounded.sum() > K:
            order = sorted(np.flatnonzero(rounded), key=lambda i: (-y[i], i))
            rounded[:] = 0.0
            rounded[order[:K]] = 1.0
        self._offer(rounded)

    # --- nodes ---

    def _evaluate(self, node: Node) -> NodeResult:
        fixed = self.model.fixing(node.fixed_zero, node.fixed_one)
        rounds, cuts = 0, 0
        while True:
            rel = self.model.relax(fixed, self.settings.qp)
            if rel.status is QpStatus.INFEASIBLE:
                return NodeResult(node=node, bound=np.inf, z=None, status=rel.status, cuts=cuts)
            if not self.separate or rel.z is None:
                break
            limit = self.settings.max_cut_rounds
            if limit is not None and rounds >= limit:
                break
            added = self.model.separate(rel.z, self.settings.cut_tol, self.settings.cut_ytol)
            if not added:
                break
            rounds += 1
            cuts += len(added)
        if rel.status is not QpStatus.OPTIMAL:
            return NodeResult(node=node, bound=node.parent_bound, z=None, status=rel.status, cuts=cuts)
        return NodeResult(node=node, bound=max(rel.bound, node.parent_bound), z=rel.z,
                          status=rel.status, cuts=cuts)

    def _branch_index(self, y: np.ndarray, node: Node) -> Optional[int]:
        free = [i for i in range(self.instance.n) if i not in node.fixed_zero and i not in node.fixed_one]
        frac = [(abs(y[i] - 0.5), i) for i in free
                if min(abs(y[i]), abs(y[i] - 1.0)) > self.settings.int_tol]
        if not frac:
            return None
        return min(frac)[1]

    def _push(self, node: Node):
        heapq.heappush(self._queue, node)

    def _child(self, node: Node, bound: float, zero=(), one=()) -> Node:
        return Node(bound=bound, seq=next(self._seq),
                    fixed_zero=node.fixed_zero | frozenset(zero),
                    fixed_one=node.fixed_one | frozenset(one),
                    depth=node.depth + 1)

    def _prunable(self, bound: float) -> bool:
        inc = self.incumbent_value
        return np.isfinite(inc) and bound >= inc - PRUNE_TOL * (1.0 + abs(inc))

    def _process(self, res: NodeResult):
        node = res.node
        self.stats.nodes_explored += 1
        self.stats.cuts_added += res.cuts
        if res.status is QpStatus.INFEASIBLE or self._prunable(res.bound):
            return
        if res.z is None or res.status is not QpStatus.OPTIMAL:
            # numerically unresolved node: branch on the first free index with the parent bound
            free = [i for i in range(self.instance.n) if i not in node.fixed_zero and i not in node.fixed_one]
            if not free:
                return
            i = free[0]
            self._push(self._child(node, res.bound, zero=[i]))
            self._push(self._child(node, res.bound, one=[i]))
            return

        y = self.model.point(res.z).y
        i = self._branch_index(y, node)
        if i is None:
            self._offer(np.where(y >= 0.5, 1.0, 0.0))
            return
        self._rounding_heuristic(node, y)
        if self._prunable(res.bound):
            return
        self._push(self._child(node, res.bound, zero=[i]))
        self._push(self._child(node, res.bound, one=[i]))

    def _best_bound(self) -> float:
        if self._queue:
            return min(self.incumbent_value, self._queue[0].bound)
        return self.incumbent_value

    def run(self) -> Tuple[Optional[SolverPoint], float, SolveStats]:
        s = self.settings
        start = time.perf_counter()
        root = Node(bound=-np.inf, seq=next(self._seq))
        root_res = self._evaluate(root)
        self.stats.root_bound = float(root_res.bound)
        if root_res.status is QpStatus.INFEASIBLE:
            logger.info("root relaxation infeasible")
            self.stats.status = SolveStatus.INFEASIBLE
            self.stats.wall_time = time.perf_counter() - start
            return None, float("inf"), self.stats
        self._process(root_res)

        status = SolveStatus.OPTIMAL
        workers = s.workers
        with ThreadPoolExecutor(max_workers=workers) as pool:
            while self._queue:
                best = self._best_bound()
                if relative_gap(self.incumbent_value, best) <= s.rel_gap:
                    status = SolveStatus.GAP_REACHED
                    break
                if s.time_limit is not None and time.perf_counter() - start >= s.time_limit:
                    status = SolveStatus.TIME_LIMIT
                    break
                if s.node_limit is not None and self.stats.nodes_explored >= s.node_limit:
                    status = SolveStatus.NODE_LIMIT
                    break
                batch = []
                while self._queue and len(batch) < workers:
                    node = heapq.heappop(self._queue)
                    if not self._prunable(node.bound):
                        batch.append(node)
                if not batch:
                    continue
                if workers == 1:
                    results = [self._evaluate(batch[0])]
                else:
                    results = list(pool.map(self._evaluate, batch))
                for res in results:
                    self._process(res)
                if self.stats.nodes_explored % 100 == 0:
                    logger.debug(f"{self.stats.nodes_explored} nodes, {len(self._queue)} open,"
                                 f" incumbent {self.incumbent_value:.10g}, bound {self._best_bound():.10g}")

        if self.incumbent is None and status is SolveStatus.OPTIMAL:
            status = SolveStatus.INFEASIBLE
        if status is SolveStatus.OPTIMAL:
            best = self.incumbent_value
        elif self._queue:
            best = min(self.incumbent_value, self._queue[0].bound)
        else:
            best = self.incumbent_value
        self.stats.status = status
        self.stats.best_bound = float(best)
        self.stats.final_gap = 0.0 if status is SolveStatus.OPTIMAL else relative_gap(self.incumbent_value, best)
        self.stats.wall_time = time.perf_counter() - start
        logger.info(f"branch-and-bound ({self.model.kind}) finished: {status.value},"
                    f" objective {self.incumbent_value:.12g}, {self.stats.nodes_explored} nodes,"
                    f" {self.stats.cuts_added} cuts, {self.stats.wall_time:.2f}s")
        return self.incumbent, self.incumbent_value, self.stats


def solve_miqp(model: MiqpModel, settings: Optional[SolveSettings] = None):
    """Branch-and-bound on any reformulated model; returns (point, objective, stats)."""
    return BranchAndBound(model, settings, separate=False).run()


def solve_pc(inst: Instance, rho: PerspectiveParams, settings: Optional[SolveSettings] = None,
             model: Optional[MiqpModel] = None):
    """
    Branch-and-cut on the perspective-cut model: cuts are separated at every
    node relaxation, integral ones included, until none is violated.
    """
    model = model or build_pc(inst, rho)
    return BranchAndBound(model, settings, separate=True).run()


def enumerate_oracle(inst: Instance, settings: Optional[SolveSettings] = None) -> Tuple[SolverPoint, float]:
    """
    Exact optimum by enumerating every binary y (lexicographic order) within the
    cardinality bound and solving the continuous QP in x for each support.
    """
    if inst.n > ORACLE_MAX_N:
        raise TooLarge(f"enumeration limited to n <= {ORACLE_MAX_N} (n={inst.n})")
    settings = settings or SolveSettings()
    plain = build_plain(inst)
    best: Optional[SolverPoint] = None
    best_value = float("inf")
    for bits in itertools.product((0, 1), repeat=inst.n):
        if inst.cardinality is not None and sum(bits) > inst.cardinality:
            continue
        found = _fixed_support_value(plain, np.array(bits, dtype=float), settings)
        if found is None:
            continue
        point, value = found
        if value < best_value - 1e-12 * (1.0 + abs(best_value if np.isfinite(best_value) else 0.0)):
            best, best_value = point, value
    if best is None:
        raise InfeasibleProblem("no binary support admits a feasible x")
    return best, best_value
