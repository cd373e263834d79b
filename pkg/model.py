"""
Problem datum for semi-continuous quadratic programs, feasibility and
objective evaluation, and the JSON instance file format.

    min  x'Qx + c'x + h'y
    s.t. Ax + By <= d,  Ex + Fy = g (optional),  sum(y) <= K (optional),
         lb_i y_i <= x_i <= ub_i y_i,  y_i in {0, 1}
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from core_linalg import inf_norm, min_eigenvalue, psd_tolerance
from errors import DimensionMismatch, InstanceIoError, ParseError

logger = logging.getLogger(__name__)

DEFAULT_FEAS_TOL = 1e-6


def _frozen(a, shape) -> np.ndarray:
    arr = np.array(a, dtype=float).reshape(shape)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class EqualityBlock:
    E: np.ndarray
    F: np.ndarray
    g: np.ndarray

    @property
    def rows(self) -> int:
        return self.g.shape[0]


@dataclass(frozen=True, eq=False)
class Instance:
    Q: np.ndarray
    c: np.ndarray
    h: np.ndarray
    A: np.ndarray
    B: np.ndarray
    d: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    cardinality: Optional[int] = None
    equality: Optional[EqualityBlock] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        n = np.asarray(self.c).shape[0]
        m = np.asarray(self.d).shape[0]
        try:
            object.__setattr__(self, "Q", _frozen(self.Q, (n, n)))
            object.__setattr__(self, "c", _frozen(self.c, (n,)))
            object.__setattr__(self, "h", _frozen(self.h, (n,)))
            object.__setattr__(self, "A", _frozen(self.A, (m, n)))
            object.__setattr__(self, "B", _frozen(self.B, (m, n)))
            object.__setattr__(self, "d", _frozen(self.d, (m,)))
            object.__setattr__(self, "lb", _frozen(self.lb, (n,)))
            object.__setattr__(self, "ub", _frozen(self.ub, (n,)))
            if self.equality is not None:
                rows = np.asarray(self.equality.g).shape[0]
                object.__setattr__(self, "equality", EqualityBlock(
                    E=_frozen(self.equality.E, (rows, n)),
                    F=_frozen(self.equality.F, (rows, n)),
                    g=_frozen(self.equality.g, (rows,)),
                ))
        except ValueError as e:
            raise DimensionMismatch(f"inconsistent instance dimensions: {e}") from e
        if self.cardinality is not None:
            object.__setattr__(self, "cardinality", int(self.cardinality))
        object.__setattr__(self, "metadata", dict(self.metadata))

    @property
    def n(self) -> int:
        return self.c.shape[0]

    @property
    def m(self) -> int:
        return self.d.shape[0]

    @property
    def constant(self) -> float:
        """Objective offset carried in metadata (e.g. ||b||^2 for subset selection)."""
        return float(self.metadata.get("constant", 0.0))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Instance):
            return NotImplemented
        arrays = ("Q", "c", "h", "A", "B", "d", "lb", "ub")
        if any(not np.array_equal(getattr(self, k), getattr(other, k)) for k in arrays):
            return False
        if self.cardinality != other.cardinality or self.metadata != other.metadata:
            return False
        if (self.equality is None) != (other.equality is None):
            return False
        if self.equality is not None:
            return all(np.array_equal(getattr(self.equality, k), getattr(other.equality, k)) for k in "EFg")
        return True

    __hash__ = None

    def replace(self, **changes) -> "Instance":
        fields = {
            "Q": self.Q, "c": self.c, "h": self.h, "A": self.A, "B": self.B, "d": self.d,
            "lb": self.lb, "ub": self.ub, "cardinality": self.cardinality,
            "equality": self.equality, "metadata": self.metadata,
        }
        fields.update(changes)
        return Instance(**fields)


@dataclass(frozen=True)
class SolverPoint:
    x: np.ndarray
    y: np.ndarray


def inequality_rows(inst: Instance, include_equality: bool = True,
                    include_cardinality: bool = True) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Stack every linear row of the instance as A x + B y <= d.
    The equality block becomes paired inequalities; the cardinality bound
    becomes the row sum(y) <= K.
    """
    A, B, d = [inst.A], [inst.B], [inst.d]
    if include_equality and inst.equality is not None:
        eq = inst.equality
        A += [eq.E, -eq.E]
        B += [eq.F, -eq.F]
        d += [eq.g, -eq.g]
    if include_cardinality and inst.cardinality is not None:
        A.append(np.zeros((1, inst.n)))
        B.append(np.ones((1, inst.n)))
        d.append(np.array([float(inst.cardinality)]))
    return np.vstack(A), np.vstack(B), np.concatenate(d)


def validate(inst: Instance) -> List[str]:
    """
    List every violated structural invariant. An empty list means valid.
    """
    report = []
    arrays = [inst.Q, inst.c, inst.h, inst.A, inst.B, inst.d, inst.lb, inst.ub]
    if inst.equality is not None:
        arrays += [inst.equality.E, inst.equality.F, inst.equality.g]
    if not all(np.all(np.isfinite(a)) for a in arrays):
        report.append("all entries finite")
        return report

    if not np.allclose(inst.Q, inst.Q.T, rtol=0.0, atol=1e-12 * (1.0 + inf_norm(inst.Q))):
        report.append("Q symmetric")
    elif min_eigenvalue(inst.Q, method="lapack") < -psd_tolerance(inst.Q):
        report.append("Q PSD")

    bad = np.flatnonzero(~(inst.lb < inst.ub))
    for i in bad:
        report.append(f"a_i < b_i (index {i}: a={inst.lb[i]!r}, b={inst.ub[i]!r})")

    if inst.cardinality is not None:
        if inst.cardinality < 1:
            report.append(f"K ≥ 1 (K={inst.cardinality})")
        if inst.cardinality > inst.n:
            report.append(f"K ≤ n (K={inst.cardinality}, n={inst.n})")
    return report


def _check_point(inst: Instance, p: SolverPoint):
    if np.shape(p.x) != (inst.n,) or np.shape(p.y) != (inst.n,):
        raise DimensionMismatch(
            f"point dimensions {np.shape(p.x)}/{np.shape(p.y)} do not match n={inst.n}"
        )


def is_feasible(inst: Instance, p: SolverPoint, binary: bool = True,
                tol: float = DEFAULT_FEAS_TOL) -> bool:
    _check_point(inst, p)
    x, y = np.asarray(p.x, dtype=float), np.asarray(p.y, dtype=float)

    if inst.m and np.any(inst.A @ x + inst.B @ y > inst.d + tol):
        return False
    if inst.equality is not None and inst.equality.rows:
        eq = inst.equality
        if np.any(np.abs(eq.E @ x + eq.F @ y - eq.g) > tol):
            return False
    if np.any(x < inst.lb * y - tol) or np.any(x > inst.ub * y + tol):
        return False
    if inst.cardinality is not None and y.sum() > inst.cardinality + tol:
        return False
    if binary:
        return bool(np.all(np.minimum(np.abs(y), np.abs(y - 1.0)) <= tol))
    return bool(np.all((y >= -tol) & (y <= 1.0 + tol)))


def objective(inst: Instance, p: SolverPoint) -> float:
    _check_point(inst, p)
    x, y = np.asarray(p.x, dtype=float), np.asarray(p.y, dtype=float)
    return float(x @ inst.Q @ x + inst.c @ x + inst.h @ y)


def objective_perspective(inst: Instance, p: SolverPoint, rho) -> float:
    """
    f_rho(x,y) = x'(Q - diag(rho))x + c'x + h'y + sum rho_i x_i^2 / y_i, with 0/0 = 0.
    Returns +inf when some x_i != 0 has y_i == 0 and rho_i > 0.
    """
    _check_point(inst, p)
    x, y = np.asarray(p.x, dtype=float), np.asarray(p.y, dtype=float)
    rho = np.asarray(rho, dtype=float)
    base = x @ (inst.Q - np.diag(rho)) @ x + inst.c @ x + inst.h @ y
    persp = 0.0
    for i in np.flatnonzero(rho):
        if y[i] > 0.0:
            persp += rho[i] * x[i] ** 2 / y[i]
        elif x[i] != 0.0:
            return float("inf")
    return float(base + persp)


def objective_lifted(inst: Instance, p: SolverPoint, u, v) -> float:
    """f_{u,v}(x,y) = f(x,y) + sum(u_i x_i y_i + v_i y_i^2 - u_i x_i - v_i y_i)."""
    _check_point(inst, p)
    x, y = np.asarray(p.x, dtype=float), np.asarray(p.y, dtype=float)
    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    lift = np.sum(u * x * y + v * y * y - u * x - v * y)
    return objective(inst, p) + float(lift)


def example_one_instance() -> Instance:
    """f(x) = x^2 - 4x over {y <= x <= 3y, y in {0,1}}."""
    return Instance(
        Q=[[1.0]], c=[-4.0], h=[0.0],
        A=np.zeros((0, 1)), B=np.zeros((0, 1)), d=np.zeros(0),
        lb=[1.0], ub=[3.0],
        metadata={"family": "example1"},
    )


# --- Instance file format ---

class EqualityFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    E: List[List[float]]
    F: List[List[float]]
    g: List[float]


class InstanceFile(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n: int
    m: int
    Q: List[List[float]]
    c: List[float]
    h: List[float]
    A: List[List[float]]
    B: List[List[float]]
    d: List[float]
    lb: List[float]
    ub: List[float]
    cardinality: Optional[int] = None
    equality: Optional[EqualityFile] = None
    metadata: Dict[str, Any] = {}


def _matrix(rows: List[List[float]], shape: Tuple[int, int], name: str) -> np.ndarray:
    try:
        return np.array(rows, dtype=float).reshape(shape)
    except ValueError as e:
        raise ParseError(f"expected a {shape[0]}x{shape[1]} matrix", field=name) from e


def _vector(values: List[float], size: int, name: str) -> np.ndarray:
    if len(values) != size:
        raise ParseError(f"expected {size} entries, got {len(values)}", field=name)
    return np.array(values, dtype=float)


def instance_to_dict(inst: Instance) -> Dict[str, Any]:
    doc = {
        "n": inst.n,
        "m": inst.m,
        "Q": inst.Q.tolist(),
        "c": inst.c.tolist(),
        "h": inst.h.tolist(),
        "A": inst.A.tolist(),
        "B": inst.B.tolist(),
        "d": inst.d.tolist(),
        "lb": inst.lb.tolist(),
        "ub": inst.ub.tolist(),
        "cardinality": inst.cardinality,
        "equality": None,
        "metadata": inst.metadata,
    }
    if inst.equality is not None:
        doc["equality"] = {
            "E": inst.equality.E.tolist(),
            "F": inst.equality.F.tolist(),
            "g": inst.equality.g.tolist(),
        }
    return doc


def instance_from_dict(doc: Dict[str, Any]) -> Instance:
    try:
        f = InstanceFile.model_validate(doc)
    except ValidationError as e:
        first = e.errors()[0]
        name = ".".join(str(part) for part in first["loc"]) if first["loc"] else None
        raise ParseError(first["msg"], field=name) from e

    n, m = f.n, f.m
    equality = None
    if f.equality is not None:
        rows = len(f.equality.g)
        equality = EqualityBlock(
            E=_matrix(f.equality.E, (rows, n), "equality.E"),
            F=_matrix(f.equality.F, (rows, n), "equality.F"),
            g=np.array(f.equality.g, dtype=float),
        )
    return Instance(
        Q=_matrix(f.Q, (n, n), "Q"),
        c=_vector(f.c, n, "c"),
        h=_vector(f.h, n, "h"),
        A=_matrix(f.A, (m, n), "A"),
        B=_matrix(f.B, (m, n), "B"),
        d=_vector(f.d, m, "d"),
        lb=_vector(f.lb, n, "lb"),
        ub=_vector(f.ub, n, "ub"),
        cardinality=f.cardinality,
        equality=equality,
        metadata=f.metadata,
    )


def write_instance(inst: Instance, path) -> Path:
    """
    Write the instance as JSON. Floats are written with repr(), the shortest
    decimal string that parses back to the identical double.
    """
    path = Path(path)
    try:
        path.write_text(json.dumps(instance_to_dict(inst), indent=1) + "\n", encoding="utf-8")
    except OSError as e:
        raise InstanceIoError(f"cannot write instance to {path}: {e}") from e
    logger.info(f"Instance written to {path} (n={inst.n}, m={inst.m})")
    return path


def read_instance(path) -> Instance:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise InstanceIoError(f"cannot read instance {path}: {e}") from e
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON: {e.msg}", line=e.lineno) from e
    if not isinstance(doc, dict):
        raise ParseError("top-level JSON value must be an object", line=1)
    return instance_from_dict(doc)
