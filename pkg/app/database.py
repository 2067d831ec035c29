from contextlib import contextmanager
from functools import lru_cache
from pathlib import Path
from typing import Iterator, Optional

from sqlalchemy import Engine, create_engine
from sqlalchemy.orm import Session, declarative_base, sessionmaker

from app.config import settings

# Base class for SQLAlchemy models
Base = declarative_base()


@lru_cache(maxsize=None)
def get_engine(database_url: str) -> Engine:
    """Create (once per URL) the ledger engine"""
    if database_url.startswith("sqlite:///"):
        Path(database_url[len("sqlite:///"):]).parent.mkdir(parents=True, exist_ok=True)
    return create_engine(database_url, echo=False, future=True)


@lru_cache(maxsize=None)
def _session_factory(database_url: str) -> sessionmaker:
    return sessionmaker(bind=get_engine(database_url), class_=Session, expire_on_commit=False)


@contextmanager
def get_db(database_url: Optional[str] = None) -> Iterator[Session]:
    """Session scope: commit on success, roll back on error"""
    session = _session_factory(database_url or settings.database_url())()
    try:
        yield session
        session.commit()
    except Exception:
        session.rollback()
        raise
    finally:
        session.close()


def init_db(database_url: Optional[str] = None) -> None:
    """Initialize ledger tables"""
    from app import models  # noqa: F401  registers tables on Base

    Base.metadata.create_all(get_engine(database_url or settings.database_url()))
