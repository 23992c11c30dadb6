from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator


class DroopModel(BaseModel):
    """Per-bus 1/R_i. Zero at buses without generation."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    inv_R: np.ndarray

    @model_validator(mode="after")
    def check_droop(self):
        if np.any(self.inv_R < 0):
            raise ValueError("droop gains 1/R must be nonnegative")
        if not self.inv_R.sum() > 0:
            raise ValueError("at least one generator needs a positive droop gain")
        return self

    @property
    def shares(self) -> np.ndarray:
        return self.inv_R / self.inv_R.sum()


class AttackBounds(BaseModel):
    """
    Per-bus attack limits in pu. Either a symmetric deviation delta_max
    around the forecast, or an explicit envelope [pd_min, pd_max].
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    delta_max: Optional[np.ndarray] = None
    pd_min: Optional[np.ndarray] = None
    pd_max: Optional[np.ndarray] = None
    forecast: Optional[np.ndarray] = None

    @model_validator(mode="after")
    def check_bounds(self):
        has_delta = self.delta_max is not None
        has_env = self.pd_min is not None or self.pd_max is not None
        if has_delta == has_env:
            raise ValueError("give either delta_max or an envelope (pd_min, pd_max)")
        if has_delta and np.any(self.delta_max < 0):
            raise ValueError("delta_max must be nonnegative")
        if has_env:
            if self.pd_min is None or self.pd_max is None:
                raise ValueError("an envelope needs both pd_min and pd_max")
            if np.any(self.pd_min > self.pd_max + 1e-12):
                raise ValueError("envelope lower bound exceeds upper bound")
            if self.forecast is not None and (
                    np.any(self.forecast < self.pd_min - 1e-12) or np.any(self.forecast > self.pd_max + 1e-12)):
                raise ValueError("forecast demand lies outside the envelope")
        return self

    @classmethod
    def from_alpha(cls, forecast: np.ndarray, alpha: float) -> "AttackBounds":
        if alpha < 0:
            raise ValueError(f"alpha must be nonnegative, got {alpha}")
        return cls(delta_max=alpha * np.asarray(forecast, dtype=float), forecast=np.asarray(forecast, dtype=float))

    @property
    def dev_up(self) -> np.ndarray:
        """Largest admissible per-bus demand increase."""
        if self.delta_max is not None:
            return self.delta_max
        base = self.forecast if self.forecast is not None else (self.pd_min + self.pd_max) / 2
        return self.pd_max - base

    @property
    def dev_down(self) -> np.ndarray:
        """Largest admissible per-bus demand decrease (as a positive number)."""
        if self.delta_max is not None:
            return self.delta_max
        base = self.forecast if self.forecast is not None else (self.pd_min + self.pd_max) / 2
        return base - self.pd_min

    @property
    def total_up(self) -> float:
        return float(self.dev_up.sum())

    @property
    def total_down(self) -> float:
        return float(self.dev_down.sum())

    @property
    def symmetric_radius(self) -> np.ndarray:
        return np.maximum(self.dev_up, self.dev_down)


class SaturationProfile(BaseModel):
    """
    Piecewise-linear primary response for one direction. Region z (0-based)
    spans total change [S[z-1], S[z]] with S[-1] = 0; inside it generator l
    moves by offsets[z, l] + slopes[z, l] * s.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    direction: int
    order: np.ndarray
    t: np.ndarray
    S: np.ndarray
    offsets: np.ndarray
    slopes: np.ndarray
    headroom: np.ndarray

    @property
    def n_regions(self) -> int:
        return len(self.S)

    @property
    def total_headroom(self) -> float:
        return float(self.headroom.sum())

    def region_bounds(self, z: int) -> tuple[float, float]:
        lo = 0.0 if z == 0 else float(self.S[z - 1])
        return lo, float(self.S[z])
