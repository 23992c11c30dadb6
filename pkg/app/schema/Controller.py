from enum import Enum
from functools import cached_property
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from app.core.config import ETA_TOL


class DemandEnvelope(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    pd_min: np.ndarray
    pd_max: np.ndarray

    @model_validator(mode="after")
    def check_envelope(self):
        if self.pd_min.shape != self.pd_max.shape:
            raise ValueError("envelope bounds must have the same shape")
        if np.any(self.pd_min > self.pd_max + 1e-12):
            raise ValueError("envelope lower bound exceeds upper bound")
        return self

    @classmethod
    def from_alpha(cls, forecast: np.ndarray, alpha: float) -> "DemandEnvelope":
        forecast = np.asarray(forecast, dtype=float)
        return cls(pd_min=max(1.0 - alpha, 0.0) * forecast, pd_max=(1.0 + alpha) * forecast)

    @property
    def midpoint(self) -> np.ndarray:
        return (self.pd_min + self.pd_max) / 2

    @property
    def half_width(self) -> np.ndarray:
        return (self.pd_max - self.pd_min) / 2

    @property
    def varying(self) -> np.ndarray:
        """Indices of buses whose demand is not pinned."""
        return np.flatnonzero(self.pd_max - self.pd_min > 1e-12)


class FeasibilityResult(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    controllable: Optional[bool]
    verdict: str
    method: str
    shortfall: Optional[np.ndarray] = None
    total_shortfall: float = 0.0
    witness_demand: Optional[np.ndarray] = None
    eta: Optional[float] = None
    points_checked: int = 0
    approximate: bool = False


class ControllerKind(str, Enum):
    BETA = "beta"
    GAMMA_BETA = "gamma-beta"


class ControllerSpec(BaseModel):
    """Predetermined secondary controller p_g = (mid total)*gamma + (deviation total)*beta."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True, ignored_types=(cached_property,))

    kind: ControllerKind
    beta: np.ndarray
    gamma: Optional[np.ndarray] = None
    eta: float = float("inf")

    @model_validator(mode="after")
    def check_weights(self):
        for name, vec in (("beta", self.beta), ("gamma", self.gamma)):
            if vec is None:
                continue
            if np.any(vec < -1e-9):
                raise ValueError(f"{name} must be nonnegative")
            if abs(vec.sum() - 1.0) > 1e-6:
                raise ValueError(f"{name} must sum to 1, got {vec.sum()}")
        if self.kind == ControllerKind.GAMMA_BETA and self.gamma is None:
            raise ValueError("a gamma-beta controller needs gamma")
        return self

    @property
    def effective_gamma(self) -> np.ndarray:
        return self.beta if self.gamma is None else self.gamma

    @cached_property
    def W_beta(self) -> np.ndarray:
        """Column i is -e_i + beta."""
        return self.beta[:, None] - np.eye(len(self.beta))

    @cached_property
    def W_gamma(self) -> np.ndarray:
        gamma = self.effective_gamma
        return gamma[:, None] - np.eye(len(gamma))

    @property
    def reliable(self) -> bool:
        return self.eta <= 1.0 + ETA_TOL
