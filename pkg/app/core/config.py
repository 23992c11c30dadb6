import os
from functools import lru_cache
from typing import Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field

load_dotenv()

# Numerical tolerances shared by every service module.
BALANCE_TOL = 1e-6
LP_FEASIBILITY_TOL = 1e-6
LP_OPTIMALITY_TOL = 1e-6
PIVOT_EPS = 1e-9
VIOLATION_MARGIN = 1e-6
ETA_TOL = 1e-6
FLOW_CONSERVATION_TOL = 1e-8

DEFAULT_COST_SEGMENTS = 50
DEFAULT_IMMUNE_MAX_ITERS = 50
DEFAULT_DISCRETE_STEP_PU = 0.01
DEFAULT_BRUTEFORCE_LIMIT = 25
DEFAULT_ALPHA_MAX_LIMIT = 14
MATRIX_CACHE_SIZE = 32


class Settings(BaseModel):
    lp_backend: Literal["highs", "simplex"] = "highs"
    case_dir: Optional[str] = None
    log_dir: str = "logs"
    log_to_file: bool = True
    database_url: str = "sqlite:///gridguard_runs.db"
    parallel: int = Field(default_factory=lambda: os.cpu_count() or 1, ge=1)
    lp_dump_dir: Optional[str] = None


def _env_flag(name: str, default: bool) -> bool:
    value = os.getenv(name)
    if value is None:
        return default
    return value.strip().lower() not in ("0", "false", "no", "off", "")


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    """Settings from the environment (a .env file is honoured)."""
    values = {
        "lp_backend": os.getenv("GRIDGUARD_LP_BACKEND", "highs").strip().lower(),
        "case_dir": os.getenv("GRIDGUARD_CASE_DIR") or None,
        "log_dir": os.getenv("GRIDGUARD_LOG_DIR", "logs"),
        "log_to_file": _env_flag("GRIDGUARD_LOG_TO_FILE", True),
        "database_url": os.getenv("GRIDGUARD_DATABASE_URL", "sqlite:///gridguard_runs.db"),
        "lp_dump_dir": os.getenv("GRIDGUARD_LP_DUMP_DIR") or None,
    }
    parallel = os.getenv("GRIDGUARD_PARALLEL")
    if parallel:
        values["parallel"] = int(parallel)
    return Settings(**values)
