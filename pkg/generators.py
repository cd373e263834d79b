"""
Seeded random instances: mean-variance portfolio selection with buy-in
thresholds (MV) and sparse least squares subset selection (SSP), plus the
one-stock-per-section equality augmentation.
"""
import logging
from enum import Enum
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from errors import IndivisibleSections
from model import EqualityBlock, Instance

logger = logging.getLogger(__name__)

DOMINANCE_SCALE = {"minus": 0.1, "zero": 1.0, "plus": 10.0}
MV_BUY_IN = 0.05
MV_CAP = 0.6
MV_RETURN_RANGE = (0.002, 0.01)
MV_TARGET_PERCENTILE = 30
SSP_BOUND = 100.0


class Family(str, Enum):
    MV = "mv"
    SSP = "ssp"


class Dominance(str, Enum):
    MINUS = "minus"
    ZERO = "zero"
    PLUS = "plus"


class GenSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    family: Family
    n: int = Field(ge=2)
    K: Optional[int] = Field(None, ge=1)
    dominance: Dominance = Dominance.ZERO
    sections: Optional[int] = Field(None, ge=1)
    seed: int = Field(0, ge=0, lt=2 ** 64)

    @model_validator(mode="after")
    def _check_sizes(self):
        if self.K is not None and self.K > self.n:
            raise ValueError(f"K={self.K} exceeds n={self.n}")
        if self.sections is not None and self.n % self.sections:
            raise IndivisibleSections(f"n={self.n} is not divisible into {self.sections} sections")
        return self


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def gen_mv(spec: GenSpec) -> Instance:
    """
    Q = C'C (scaled to unit average variance) + delta * diag(U[0,1]);
    rows: budget sum(x) = 1 as a paired inequality, expected return
    mu'x >= 30th percentile of mu.
    """
    n = spec.n
    rng = _rng(spec.seed)
    C = rng.standard_normal((n, n))
    cov = C.T @ C
    cov /= np.mean(np.diag(cov))
    delta = DOMINANCE_SCALE[spec.dominance.value]
    Q = cov + delta * np.diag(rng.uniform(0.0, 1.0, n))
    Q = 0.5 * (Q + Q.T)
    mu = rng.uniform(*MV_RETURN_RANGE, n)
    target = float(np.percentile(mu, MV_TARGET_PERCENTILE))

    ones = np.ones(n)
    A = np.vstack([ones, -ones, -mu])
    d = np.array([1.0, -1.0, -target])
    return Instance(
        Q=Q, c=np.zeros(n), h=np.zeros(n),
        A=A, B=np.zeros_like(A), d=d,
        lb=np.full(n, MV_BUY_IN), ub=np.full(n, MV_CAP),
        cardinality=spec.K,
        metadata={"family": "mv", "dominance": spec.dominance.value, "seed": spec.seed},
    )


def gen_ssp(spec: GenSpec) -> Instance:
    """min ||Ax - b||^2 with |x_i| <= 100 y_i, A of size 2n x n; ||b||^2 kept as metadata."""
    n = spec.n
    rng = _rng(spec.seed)
    A = rng.standard_normal((2 * n, n))
    beta = rng.uniform(-1.0, 1.0, n)
    b = A @ beta + rng.standard_normal(2 * n)
    Q = A.T @ A
    return Instance(
        Q=0.5 * (Q + Q.T), c=-2.0 * A.T @ b, h=np.zeros(n),
        A=np.zeros((0, n)), B=np.zeros((0, n)), d=np.zeros(0),
        lb=np.full(n, -SSP_BOUND), ub=np.full(n, SSP_BOUND),
        cardinality=spec.K,
        metadata={"family": "ssp", "seed": spec.seed, "constant": float(b @ b)},
    )


def add_sections(inst: Instance, sections: int) -> Instance:
    """Exactly one y per contiguous section; the cardinality bound is dropped (it becomes implied)."""
    n = inst.n
    if sections < 1 or n % sections:
        raise IndivisibleSections(f"n={n} is not divisible into {sections} sections")
    size = n // sections
    F = np.zeros((sections, n))
    for k in range(sections):
        F[k, k * size:(k + 1) * size] = 1.0
    block = EqualityBlock(E=np.zeros((sections, n)), F=F, g=np.ones(sections))
    metadata = dict(inst.metadata, sections=sections)
    return inst.replace(equality=block, cardinality=None, metadata=metadata)


def generate(spec: GenSpec) -> Instance:
    inst = gen_mv(spec) if spec.family is Family.MV else gen_ssp(spec)
    if spec.sections is not None:
        inst = add_sections(inst, spec.sections)
    logger.info(f"generated {spec.family.value} instance n={spec.n} K={spec.K} seed={spec.seed}")
    return inst
