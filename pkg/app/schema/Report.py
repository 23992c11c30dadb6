from typing import Any, Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field


class DispatchEntry(BaseModel):
    bus: int
    p_mw: float
    p_min_mw: float
    p_max_mw: float


class FlowEntry(BaseModel):
    line: int
    from_bus: int
    to_bus: int
    flow_mw: float
    cap_mw: Optional[float] = None


class ReportDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    case: str
    algorithm: str
    alpha: Optional[float] = None
    cost_dollars_per_hr: Optional[float] = None
    iterations: Optional[int] = None
    feasible: Optional[bool] = None
    alpha_bounds: Dict[str, Optional[float]] = Field(
        default_factory=lambda: {"star": None, "beta": None, "gamma_beta": None, "hat": None, "max": None})
    dispatch: List[DispatchEntry] = Field(default_factory=list)
    flows: List[FlowEntry] = Field(default_factory=list)
    verdict: Optional[str] = None
    causes: List[str] = Field(default_factory=list)
    meta: Dict[str, Any] = Field(default_factory=dict)
