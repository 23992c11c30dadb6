from typing import Optional

import pandas as pd
from sqlalchemy.exc import SQLAlchemyError
from sqlalchemy.orm import Session

from app.core.errors import RunHistoryError
from app.core.logger import setup_logger
from app.models.database import db_session
from app.models.run_record import RunRecord
from app.schema.RunSummary import RunSummary

logger = setup_logger("app_logger")

RUN_PREFIX = "RUN"
FIRST_RUN_NUMBER = 100000

STATUS_IN_PROGRESS = "IN_PROGRESS"
STATUS_COMPLETED = "COMPLETED"
STATUS_INFEASIBLE = "INFEASIBLE"
STATUS_FAILED = "FAILED"


def next_run_id(db: Session) -> str:
    latest = db.query(RunRecord.run_id).filter(RunRecord.run_id.like(f"{RUN_PREFIX}%")) \
        .order_by(RunRecord.run_id.desc()).first()
    if latest is None:
        logger.debug(f"No recorded runs yet, starting at {RUN_PREFIX}{FIRST_RUN_NUMBER}")
        return f"{RUN_PREFIX}{FIRST_RUN_NUMBER}"
    try:
        return f"{RUN_PREFIX}{int(latest[0][len(RUN_PREFIX):]) + 1}"
    except ValueError:
        logger.warning(f"Could not parse run id '{latest[0]}', restarting numbering")
        return f"{RUN_PREFIX}{FIRST_RUN_NUMBER}"


def start_run(command: str, case: str, algorithm: Optional[str] = None, alpha: Optional[float] = None) -> str:
    try:
        with db_session() as db:
            run_id = next_run_id(db)
            db.add(RunRecord(run_id=run_id, COMMAND=command, CASE_NAME=case, ALGORITHM=algorithm, ALPHA=alpha,
                             STATUS=STATUS_IN_PROGRESS))
            db.commit()
    except SQLAlchemyError as e:
        logger.error(f"Could not record run start: {e}", exc_info=True)
        raise RunHistoryError(f"could not record run: {e}") from e
    logger.info(f"Recording run {run_id} ({command} on {case})")
    return run_id


def finish_run(run_id: str, status: str, exit_code: int, report: Optional[str] = None,
               log_data: Optional[str] = None) -> None:
    try:
        with db_session() as db:
            db.query(RunRecord).filter(RunRecord.run_id == run_id).update(
                {"STATUS": status, "EXIT_CODE": exit_code, "REPORT": report, "LOG_DATA": log_data})
            db.commit()
    except SQLAlchemyError as e:
        logger.error(f"Could not update run {run_id}: {e}", exc_info=True)
        raise RunHistoryError(f"could not update run {run_id}: {e}") from e


def list_runs(limit: Optional[int] = None) -> pd.DataFrame:
    columns = list(RunSummary.model_fields)
    with db_session() as db:
        query = db.query(RunRecord).order_by(RunRecord.run_id.desc())
        if limit:
            query = query.limit(limit)
        rows = [RunSummary.model_validate(r).model_dump() for r in query.all()]
    if not rows:
        logger.warning("No recorded runs were found")
    return pd.DataFrame(rows, columns=columns)


def get_report(run_id: str) -> str:
    with db_session() as db:
        record = db.query(RunRecord).filter(RunRecord.run_id == run_id).first()
        if record is None:
            raise RunHistoryError(f"no recorded run {run_id}")
        if record.REPORT is None:
            raise RunHistoryError(f"run {run_id} has no report (status {record.STATUS})")
        return record.REPORT
