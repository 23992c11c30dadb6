import hashlib
from functools import cached_property
from typing import Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator


def _freeze(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


class Grid(BaseModel):
    """Immutable DC network in per-unit on base_mva."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True, ignored_types=(cached_property,))

    name: str = "grid"
    base_mva: float = 100.0
    bus_ids: Tuple[int, ...]
    line_from: np.ndarray
    line_to: np.ndarray
    reactance: np.ndarray
    line_caps: np.ndarray
    demand: np.ndarray
    gen_bus: np.ndarray
    gen_pmin: np.ndarray
    gen_pmax: np.ndarray
    # Per generator (a, b, c0) of a*p^2 + b*p + c0 with p in pu, result in $/hr.
    gen_cost: np.ndarray
    gen_pg: Optional[np.ndarray] = None
    ref_bus: int = 0

    @model_validator(mode="after")
    def check_shapes(self):
        n, m, ng = len(self.bus_ids), len(self.line_from), len(self.gen_bus)
        for name, arr, size in (
                ("line_to", self.line_to, m), ("reactance", self.reactance, m),
                ("line_caps", self.line_caps, m), ("demand", self.demand, n),
                ("gen_pmin", self.gen_pmin, ng), ("gen_pmax", self.gen_pmax, ng)):
            if len(arr) != size:
                raise ValueError(f"{name} has length {len(arr)}, expected {size}")
        if np.any(self.reactance <= 0):
            raise ValueError("reactances must be positive")
        if np.any(self.gen_pmin > self.gen_pmax + 1e-12):
            raise ValueError("generator p_min exceeds p_max")
        if np.any(self.demand < 0):
            raise ValueError("forecast demand must be nonnegative")
        if self.gen_cost.shape != (ng, 3):
            raise ValueError(f"gen_cost must have shape ({ng}, 3)")
        for field in ("line_from", "line_to", "reactance", "line_caps", "demand",
                      "gen_bus", "gen_pmin", "gen_pmax", "gen_cost"):
            object.__setattr__(self, field, _freeze(getattr(self, field)))
        if self.gen_pg is not None:
            object.__setattr__(self, "gen_pg", _freeze(self.gen_pg))
        return self

    @property
    def n(self) -> int:
        return len(self.bus_ids)

    @property
    def m(self) -> int:
        return len(self.line_from)

    @property
    def n_gen(self) -> int:
        return len(self.gen_bus)

    @cached_property
    def gen_incidence(self) -> np.ndarray:
        """n x n_gen matrix mapping generator outputs to bus injections."""
        mat = np.zeros((self.n, self.n_gen))
        mat[self.gen_bus, np.arange(self.n_gen)] = 1.0
        return mat

    @cached_property
    def pg_min(self) -> np.ndarray:
        return self.gen_incidence @ self.gen_pmin

    @cached_property
    def pg_max(self) -> np.ndarray:
        return self.gen_incidence @ self.gen_pmax

    @cached_property
    def fingerprint(self) -> str:
        digest = hashlib.sha1()
        for arr in (self.line_from, self.line_to, self.reactance):
            digest.update(np.ascontiguousarray(arr).tobytes())
        digest.update(str(self.n).encode())
        return digest.hexdigest()

    def with_caps(self, caps: np.ndarray) -> "Grid":
        return self.model_copy(update={"line_caps": _freeze(caps)})

    def with_demand(self, demand: np.ndarray) -> "Grid":
        return self.model_copy(update={"demand": _freeze(demand)})


class FlowMatrices(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    D: np.ndarray
    y: np.ndarray
    A: np.ndarray
    A_plus: np.ndarray
    B: np.ndarray

    @property
    def Y(self) -> np.ndarray:
        return np.diag(self.y)
