from datetime import datetime
from typing import Optional

from pydantic import BaseModel, ConfigDict


class RunSummary(BaseModel):
    model_config = ConfigDict(from_attributes=True)

    run_id: str
    TIMESTAMP: Optional[datetime] = None
    COMMAND: str
    CASE_NAME: str
    ALGORITHM: Optional[str] = None
    ALPHA: Optional[float] = None
    STATUS: str
    EXIT_CODE: Optional[int] = None
