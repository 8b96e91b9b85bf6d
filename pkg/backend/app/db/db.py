"""
Database connection and initialization.
Uses aiosqlite for async SQLite operations on a run's manifest.db.
"""
import aiosqlite
from pathlib import Path
from contextlib import asynccontextmanager
from typing import AsyncGenerator

from ..utils.logger import get_logger

logger = get_logger(__name__)

SCHEMA_PATH = Path(__file__).parent / "schema.sql"


@asynccontextmanager
async def open_db(db_path: Path) -> AsyncGenerator[aiosqlite.Connection, None]:
    """
    Open a connection to a manifest database.

    One connection per operation: each run directory owns its own database
    and runs never share a writer.
    """
    db = await aiosqlite.connect(db_path, isolation_level=None)
    try:
        await db.execute("PRAGMA foreign_keys = ON")
        await db.execute("PRAGMA journal_mode = WAL")
        db.row_factory = aiosqlite.Row
        yield db
    finally:
        await db.close()


@asynccontextmanager
async def db_transaction(db_path: Path) -> AsyncGenerator[aiosqlite.Connection, None]:
    """
    Context manager for database transactions.
    Commits on success, rolls back on exception.
    """
    async with open_db(db_path) as db:
        await db.execute("BEGIN")
        try:
            yield db
            await db.execute("COMMIT")
        except Exception:
            await db.execute("ROLLBACK")
            raise


async def init_database(db_path: Path) -> None:
    """
    Initialize the manifest schema.
    Creates tables if they don't exist.
    """
    db_path.parent.mkdir(parents=True, exist_ok=True)
    schema_sql = SCHEMA_PATH.read_text(encoding="utf-8")
    async with open_db(db_path) as db:
        await db.executescript(schema_sql)
    logger.debug(f"Manifest initialized at: {db_path}")
