from typing import Any, Dict, Optional

from pydantic import BaseModel, ConfigDict, Field


class IterConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    step: float = Field(default=1.1, gt=0, description="step size lambda")
    stop_delta: float = Field(default=1e-3, gt=0)
    max_iters: int = Field(default=100, ge=1)
    backoff_after: int = Field(default=3, ge=1)


class AlphaBounds(BaseModel):
    model_config = ConfigDict(frozen=True)

    alpha_hat: Optional[float] = None
    alpha_star: Optional[float] = None
    alpha_beta: Optional[float] = None
    alpha_gamma_beta: Optional[float] = None
    alpha_max: Optional[float] = None
    meta: Dict[str, Any] = Field(default_factory=dict)

    def chain(self) -> list[tuple[str, Optional[float]]]:
        return [
            ("star", self.alpha_star),
            ("beta", self.alpha_beta),
            ("gamma_beta", self.alpha_gamma_beta),
            ("hat", self.alpha_hat),
        ]

    def chain_violations(self, tol: float = 1e-6) -> list[str]:
        present = [(k, v) for k, v in self.chain() if v is not None]
        bad = []
        for (k1, v1), (k2, v2) in zip(present, present[1:]):
            if v1 > v2 + tol:
                bad.append(f"alpha_{k1}={v1:.6g} > alpha_{k2}={v2:.6g}")
        if self.alpha_max is not None:
            if self.alpha_gamma_beta is not None and self.alpha_gamma_beta > self.alpha_max + tol:
                bad.append(f"alpha_gamma_beta={self.alpha_gamma_beta:.6g} > alpha_max={self.alpha_max:.6g}")
            if self.alpha_hat is not None and self.alpha_max > self.alpha_hat + tol:
                bad.append(f"alpha_max={self.alpha_max:.6g} > alpha_hat={self.alpha_hat:.6g}")
        return bad
