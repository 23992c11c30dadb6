import math
from enum import Enum
from typing import List, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class BusRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: int
    pd_mw: float = 0.0
    bus_type: Optional[int] = None


class GeneratorRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    bus: int
    p_max_mw: float
    p_min_mw: float = 0.0
    pg_mw: Optional[float] = None
    # Polynomial cost in $/hr of output in MW, highest degree first (degree <= 2).
    cost: List[float] = Field(default_factory=lambda: [0.0])


class BranchRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    from_bus: int
    to_bus: int
    x_pu: float
    # None means "not given"; math.inf means "unlimited".
    rate_mw: Optional[float] = None


class RawCase(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str = "case"
    base_mva: float = 100.0
    buses: List[BusRow]
    generators: List[GeneratorRow]
    branches: List[BranchRow]

    @model_validator(mode="after")
    def check_references(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            seen, dupes = set(), set()
            for i in ids:
                (dupes if i in seen else seen).add(i)
            raise ValueError(f"duplicate bus ids: {sorted(dupes)}")
        known = set(ids)
        if self.base_mva <= 0:
            raise ValueError(f"base_mva must be positive, got {self.base_mva}")
        for g in self.generators:
            if g.bus not in known:
                raise ValueError(f"dangling bus reference {g.bus} in generator table")
            if g.p_min_mw > g.p_max_mw:
                raise ValueError(f"generator at bus {g.bus}: p_min {g.p_min_mw} > p_max {g.p_max_mw}")
            if len(g.cost) > 3:
                raise ValueError(f"generator at bus {g.bus}: cost polynomial degree above 2")
        for k, br in enumerate(self.branches):
            for end in (br.from_bus, br.to_bus):
                if end not in known:
                    raise ValueError(f"dangling bus reference {end} in branch {k + 1}")
            if not (br.x_pu > 0) or math.isinf(br.x_pu):
                raise ValueError(f"branch {k + 1} ({br.from_bus}-{br.to_bus}): nonpositive reactance {br.x_pu}")
        return self

    @property
    def n(self) -> int:
        return len(self.buses)

    @property
    def m(self) -> int:
        return len(self.branches)


class CapacityMode(str, Enum):
    GIVEN = "given"
    FRACTION_MEDIAN = "fraction-median"
    UNIFORM_MAX = "uniform-max"


class CapacityRule(BaseModel):
    model_config = ConfigDict(frozen=True)

    mode: CapacityMode = CapacityMode.GIVEN
    fraction_factor: float = Field(default=1.2, gt=0)
    uniform_factor: float = Field(default=1.1, gt=0)
