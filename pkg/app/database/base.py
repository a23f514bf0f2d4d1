# app/database/base.py
import os
import logging
from contextlib import contextmanager
from typing import Iterator, Optional

from sqlalchemy import create_engine, inspect
from sqlalchemy.engine import Engine
from sqlalchemy.orm import Session, declarative_base, sessionmaker
from sqlalchemy.exc import SQLAlchemyError

logger = logging.getLogger(__name__)

# Declarative Base
Base = declarative_base()

_engine: Optional[Engine] = None
_session_factory: Optional[sessionmaker] = None


def get_database_url(url: Optional[str] = None) -> Optional[str]:
    """
    Resolve the archive URL: an explicit value first, then MATCH_DATABASE_URL.
    None means the archive is disabled.
    """
    return url or os.getenv("MATCH_DATABASE_URL") or None


def configure_database(url: str) -> Engine:
    """
    Create the engine and session factory for url, replacing any previous one.

    :param url: SQLAlchemy database URL, e.g. 'sqlite:///results/archive.db'
    :return: The configured engine
    """
    global _engine, _session_factory
    if _engine is not None:
        _engine.dispose()

    if url.startswith("sqlite:///") and url != "sqlite:///:memory:":
        directory = os.path.dirname(url[len("sqlite:///"):])
        if directory:
            os.makedirs(directory, exist_ok=True)

    logger.info(f"Initializing results archive with URL: {url}")
    _engine = create_engine(
        url,
        connect_args={
            "check_same_thread": False,  # Needed for SQLite
            "timeout": 30  # Wait up to 30 seconds for locks
        } if url.startswith("sqlite") else {},
        pool_pre_ping=True,
        echo=False
    )
    _session_factory = sessionmaker(autocommit=False, autoflush=False, bind=_engine)
    return _engine


def get_engine() -> Engine:
    if _engine is None:
        url = get_database_url()
        if url is None:
            raise RuntimeError("Results archive is not configured")
        configure_database(url)
    return _engine


def check_db_exists() -> bool:
    """Check if the archive has the required tables."""
    try:
        inspector = inspect(get_engine())
        tables = inspector.get_table_names()
        return "runs" in tables and "run_metrics" in tables
    except SQLAlchemyError as e:
        logger.error(f"Error checking database: {e}")
        return False


def init_db(force: bool = False) -> None:
    """
    Initialize the archive, creating tables if they don't exist.

    :param force: If True, drop and recreate all tables
    :raises: SQLAlchemyError if database initialization fails
    """
    # Register the mapped classes on Base.metadata.
    from app.database import models  # noqa: F401

    engine = get_engine()
    try:
        if force:
            logger.warning("Forcing database reinitialization...")
            Base.metadata.drop_all(bind=engine)

        if force or not check_db_exists():
            logger.info("Creating database tables...")
            Base.metadata.create_all(bind=engine)
            logger.info("Database initialization complete.")
        else:
            logger.info("Database already initialized.")

    except SQLAlchemyError as e:
        logger.error(f"Database initialization failed: {e}")
        raise


@contextmanager
def get_db() -> Iterator[Session]:
    """
    Get a database session.
    Use this as a context manager:

    with get_db() as db:
        db.query(...)
    """
    get_engine()
    db = _session_factory()
    try:
        yield db
    finally:
        db.close()
