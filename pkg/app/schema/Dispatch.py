from enum import Enum
from typing import Any, Dict, List, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


class UpdateRule(str, Enum):
    EXACT = "exact"
    SCALE_095 = "scale-0.95"
    SCALE_09 = "scale-0.9"
    DISCRETE = "discrete"

    @property
    def scale(self) -> float:
        return {UpdateRule.SCALE_095: 0.95, UpdateRule.SCALE_09: 0.9}.get(self, 1.0)


class PiecewiseCost(BaseModel):
    """Convex piecewise-linear interpolation of one generator's cost."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    p_min: float
    p_max: float
    breakpoints: np.ndarray
    slopes: np.ndarray
    base_cost: float

    @property
    def segments(self) -> int:
        return len(self.slopes)

    @property
    def width(self) -> float:
        return (self.p_max - self.p_min) / self.segments

    def evaluate(self, p: float) -> float:
        fill = np.clip(p - self.breakpoints[:-1], 0.0, np.diff(self.breakpoints))
        return float(self.base_cost + self.slopes @ fill)


class CostModel(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    # (a, b, c0) per generator, pu output.
    poly: np.ndarray
    pieces: List[PiecewiseCost]

    @property
    def segments(self) -> int:
        return self.pieces[0].segments if self.pieces else 0

    def true_cost(self, gen_output: np.ndarray) -> float:
        a, b, c0 = self.poly[:, 0], self.poly[:, 1], self.poly[:, 2]
        return float(np.sum(a * gen_output ** 2 + b * gen_output + c0))

    def linear_cost(self, gen_output: np.ndarray) -> float:
        return float(sum(piece.evaluate(p) for piece, p in zip(self.pieces, gen_output)))


class Dispatch(BaseModel):
    """Operating point. p_g is per bus, gen_output per generator, both pu."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    algorithm: str
    feasible: bool
    p_g: Optional[np.ndarray] = None
    gen_output: Optional[np.ndarray] = None
    flows: Optional[np.ndarray] = None
    cost: Optional[float] = None
    iterations: int = 0
    caps: Optional[np.ndarray] = None
    causes: List[str] = Field(default_factory=list)
    meta: Dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def check_feasible_fields(self):
        if self.feasible and (self.p_g is None or self.flows is None or self.cost is None):
            raise ValueError("a feasible dispatch needs p_g, flows and cost")
        return self

    @classmethod
    def infeasible(cls, algorithm: str, causes: List[str], iterations: int = 0, **meta) -> "Dispatch":
        return cls(algorithm=algorithm, feasible=False, causes=causes, iterations=iterations, meta=meta)
