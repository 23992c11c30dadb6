from sqlalchemy import Column, DateTime, Float, Integer, String, Text, func

from app.models.database import Base


class RunRecord(Base):
    __tablename__ = "gridguard_runs"

    run_id = Column(String, primary_key=True, index=True)
    TIMESTAMP = Column(DateTime, default=func.now())
    COMMAND = Column(String, nullable=False)
    CASE_NAME = Column(String, nullable=False)
    ALGORITHM = Column(String)
    ALPHA = Column(Float)
    STATUS = Column(String, nullable=False)
    EXIT_CODE = Column(Integer)
    REPORT = Column(Text)
    LOG_DATA = Column(Text)
