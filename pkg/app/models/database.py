from contextlib import contextmanager
from functools import lru_cache

from sqlalchemy import create_engine
from sqlalchemy.orm import declarative_base, sessionmaker

from app.core.config import get_settings

Base = declarative_base()


@lru_cache(maxsize=None)
def _session_factory(database_url: str) -> sessionmaker:
    engine = create_engine(database_url, echo=False)
    Base.metadata.create_all(bind=engine)
    return sessionmaker(autocommit=False, autoflush=False, bind=engine)


def get_db():
    """Session on GRIDGUARD_DATABASE_URL. Tables are created on first use."""
    SessionLocal = _session_factory(get_settings().database_url)
    db = SessionLocal()
    try:
        yield db
    finally:
        db.close()


db_session = contextmanager(get_db)
