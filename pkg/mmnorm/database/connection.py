"""
Database connection and session management for the run ledger
"""
import os
from contextlib import contextmanager
from functools import lru_cache
from typing import Iterator, Optional

from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import Session, declarative_base, sessionmaker

from mmnorm.config import settings

# Create Base class for models
Base = declarative_base()


@lru_cache(maxsize=None)
def get_engine(url: str) -> Engine:
    """One engine per database URL; SQLite parent directories are created on demand"""
    if url.startswith("sqlite:///") and not url.endswith(":memory:"):
        directory = os.path.dirname(url[len("sqlite:///"):])
        if directory:
            os.makedirs(directory, exist_ok=True)
    return create_engine(
        url,
        connect_args={"check_same_thread": False} if url.startswith("sqlite") else {},
    )


@contextmanager
def get_db(url: Optional[str] = None) -> Iterator[Session]:
    """
    Session scope: commits on success, rolls back on error, always closes
    """
    session = sessionmaker(autocommit=False, autoflush=False, bind=get_engine(url or settings.DATABASE_URL))()
    try:
        yield session
        session.commit()
    except BaseException:
        session.rollback()
        raise
    finally:
        session.close()


def init_db(url: Optional[str] = None) -> None:
    """Initialize database tables"""
    from mmnorm.models import models  # noqa: F401  registers the ORM classes

    Base.metadata.create_all(bind=get_engine(url or settings.DATABASE_URL))
