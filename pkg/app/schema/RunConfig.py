from typing import Dict, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.core.config import (
    DEFAULT_COST_SEGMENTS,
    DEFAULT_DISCRETE_STEP_PU,
    DEFAULT_IMMUNE_MAX_ITERS,
)
from app.schema.Dispatch import UpdateRule
from app.schema.RawCase import CapacityMode


class RunConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    case: str
    cap_rule: CapacityMode = CapacityMode.GIVEN
    fraction_factor: float = Field(default=1.2, gt=0)
    uniform_factor: float = Field(default=1.1, gt=0)
    alpha: Optional[float] = Field(default=None, ge=0)
    bounds_file: Optional[str] = None
    algorithm: str = "opf"
    update_rule: UpdateRule = UpdateRule.EXACT
    max_iters: int = Field(default=DEFAULT_IMMUNE_MAX_ITERS, ge=1)
    discrete_step: float = Field(default=DEFAULT_DISCRETE_STEP_PU, gt=0)
    cost_segments: int = Field(default=DEFAULT_COST_SEGMENTS, ge=1)
    step: float = Field(default=1.1, gt=0)
    stop_delta: float = Field(default=1e-3, gt=0)
    output: Optional[str] = None
    fmt: Literal["text", "json"] = "text"
    parallel: Optional[int] = Field(default=None, ge=1)
    seed: int = 0
    debug_lp: bool = False
    record: bool = False
    # Droop constant R per bus id.
    droop: Dict[int, float] = Field(default_factory=dict)

    @model_validator(mode="after")
    def check_attack_source(self):
        if self.alpha is not None and self.bounds_file is not None:
            raise ValueError("--alpha and --bounds-file are mutually exclusive")
        for bus, r in self.droop.items():
            if r <= 0:
                raise ValueError(f"droop R for bus {bus} must be positive, got {r}")
        return self

    @property
    def has_attack(self) -> bool:
        return self.alpha is not None or self.bounds_file is not None
