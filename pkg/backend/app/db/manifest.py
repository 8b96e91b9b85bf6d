"""
Artifact manifest operations.
Tracks stage runs and the artifacts each stage produced, with content hashes.

State Machine (per stage):
    PENDING → RUNNING → COMPLETED
                      ↘ FAILED

Rules:
- A stage consuming an artifact verifies the hash recorded by its producer.
- Every artifact path appears in exactly one manifest row.
- On crash during RUNNING → reset to PENDING at the next start.
"""
import json
from enum import Enum
from pathlib import Path
from typing import Optional

from .db import open_db, db_transaction


class StageState(str, Enum):
    """Stage state machine states."""
    PENDING = "PENDING"
    RUNNING = "RUNNING"
    COMPLETED = "COMPLETED"
    FAILED = "FAILED"


# ============================================================================
# Stage runs
# ============================================================================

async def start_stage(db_path: Path, stage: str, config_hash: str, upstream: dict[str, str]) -> None:
    """Mark a stage RUNNING and drop the artifacts of its previous run."""
    async with db_transaction(db_path) as db:
        await db.execute("DELETE FROM artifacts WHERE stage = ?", (stage,))
        await db.execute(
            """INSERT INTO stage_runs (stage, state, config_hash, upstream_json, message, started_at, completed_at)
               VALUES (?, ?, ?, ?, NULL, datetime('now'), NULL)
               ON CONFLICT(stage) DO UPDATE SET
                   state = excluded.state,
                   config_hash = excluded.config_hash,
                   upstream_json = excluded.upstream_json,
                   message = NULL,
                   started_at = excluded.started_at,
                   completed_at = NULL""",
            (stage, StageState.RUNNING.value, config_hash, json.dumps(upstream, sort_keys=True))
        )


async def complete_stage(
    db_path: Path,
    stage: str,
    config_hash: str,
    artifacts: dict[str, tuple[str, str]],
) -> None:
    """
    Record a stage's artifacts and mark it COMPLETED.

    Args:
        artifacts: name -> (path relative to the run root, sha256)
    """
    async with db_transaction(db_path) as db:
        for name, (rel_path, sha256) in sorted(artifacts.items()):
            # A path re-produced by another stage moves to that stage
            await db.execute("DELETE FROM artifacts WHERE path = ?", (rel_path,))
            await db.execute(
                """INSERT INTO artifacts (stage, name, path, sha256, config_hash)
                   VALUES (?, ?, ?, ?, ?)""",
                (stage, name, rel_path, sha256, config_hash)
            )
        await db.execute(
            "UPDATE stage_runs SET state = ?, completed_at = datetime('now') WHERE stage = ?",
            (StageState.COMPLETED.value, stage)
        )


async def fail_stage(db_path: Path, stage: str, message: str) -> None:
    async with open_db(db_path) as db:
        await db.execute(
            "UPDATE stage_runs SET state = ?, message = ? WHERE stage = ?",
            (StageState.FAILED.value, message[:500], stage)
        )


async def get_stage(db_path: Path, stage: str) -> Optional[dict]:
    """Get a stage run with its upstream hashes decoded."""
    async with open_db(db_path) as db:
        cursor = await db.execute("SELECT * FROM stage_runs WHERE stage = ?", (stage,))
        row = await cursor.fetchone()
    if not row:
        return None
    result = dict(row)
    result["upstream"] = json.loads(result.pop("upstream_json") or "{}")
    return result


async def reset_running_stages(db_path: Path) -> list[str]:
    """Resume logic: RUNNING stages left by a crash go back to PENDING."""
    async with db_transaction(db_path) as db:
        cursor = await db.execute(
            "SELECT stage FROM stage_runs WHERE state = ?", (StageState.RUNNING.value,)
        )
        stages = [row["stage"] for row in await cursor.fetchall()]
        await db.execute(
            "UPDATE stage_runs SET state = ? WHERE state = ?",
            (StageState.PENDING.value, StageState.RUNNING.value)
        )
    return stages


# ============================================================================
# Artifacts
# ============================================================================

async def get_artifacts(db_path: Path, stage: Optional[str] = None) -> list[dict]:
    """All artifacts, or those of one stage, in deterministic order."""
    async with open_db(db_path) as db:
        if stage is None:
            cursor = await db.execute("SELECT * FROM artifacts ORDER BY stage, name")
        else:
            cursor = await db.execute(
                "SELECT * FROM artifacts WHERE stage = ? ORDER BY name", (stage,)
            )
        rows = await cursor.fetchall()
    return [dict(row) for row in rows]


async def get_manifest(db_path: Path) -> dict:
    """Full manifest: stage runs plus artifacts, as plain data."""
    async with open_db(db_path) as db:
        cursor = await db.execute("SELECT * FROM stage_runs ORDER BY stage")
        stages = []
        for row in await cursor.fetchall():
            entry = dict(row)
            entry["upstream"] = json.loads(entry.pop("upstream_json") or "{}")
            stages.append(entry)
    return {"stages": stages, "artifacts": await get_artifacts(db_path)}
