from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator


class Sense(str, Enum):
    MIN = "min"
    MAX = "max"


class Relation(str, Enum):
    LE = "<="
    EQ = "="
    GE = ">="


class LpStatus(str, Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"


class LinearProgram(BaseModel):
    """
    Dense LP: optimise objective @ x subject to rows[k] (relation[k]) rhs[k]
    and lower <= x <= upper. Infinite bounds are kept as +-inf.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    sense: Sense = Sense.MIN
    objective: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    rows: np.ndarray
    relations: Tuple[Relation, ...]
    rhs: np.ndarray
    names: Optional[List[str]] = None
    label: str = "lp"

    @model_validator(mode="after")
    def check_dimensions(self):
        nvar = len(self.objective)
        if len(self.lower) != nvar or len(self.upper) != nvar:
            raise ValueError("bound vectors must match the objective length")
        if self.rows.ndim != 2 or (self.rows.size and self.rows.shape[1] != nvar):
            raise ValueError(f"rows must be a k x {nvar} matrix, got shape {self.rows.shape}")
        if len(self.relations) != self.rows.shape[0] or len(self.rhs) != self.rows.shape[0]:
            raise ValueError("relations and rhs must have one entry per row")
        if not np.all(np.isfinite(self.rhs)):
            raise ValueError("rhs entries must be finite")
        if not np.all(np.isfinite(self.objective)):
            raise ValueError("objective coefficients must be finite")
        if np.any(self.lower > self.upper):
            raise ValueError("a variable has lower bound above its upper bound")
        if self.names is not None and len(self.names) != nvar:
            raise ValueError("names must have one entry per variable")
        return self

    @property
    def n_vars(self) -> int:
        return len(self.objective)

    @property
    def n_rows(self) -> int:
        return self.rows.shape[0]


class LpResult(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    status: LpStatus
    x: Optional[np.ndarray] = None
    objective_value: Optional[float] = None
    iterations: int = 0
    backend: str = ""

    @property
    def optimal(self) -> bool:
        return self.status == LpStatus.OPTIMAL
