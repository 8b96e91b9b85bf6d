"""
Tracker API endpoints.
Read-only endpoints over run directories: state files, manifest and report.
"""
import json
from datetime import datetime
from pathlib import Path

from fastapi import APIRouter, HTTPException, Query
from fastapi.responses import PlainTextResponse

from ..config import settings
from ..db.manifest import get_manifest
from ..storage.paths import RunLayout
from .schemas.tracker import (
    ManifestResponse,
    ProgressResponse,
    RunListResponse,
    RunnerStatusResponse,
)


router = APIRouter()


def _layout(run: str) -> RunLayout:
    """Resolve a run name inside the runs root (ablation variants use a/b/c names)."""
    root = settings.runs_root.resolve()
    path = (root / run).resolve()
    if path != root and root not in path.parents:
        raise HTTPException(status_code=400, detail=f"run {run!r} is outside the runs root")
    if not path.is_dir():
        raise HTTPException(status_code=404, detail=f"run {run!r} not found")
    return RunLayout(path)


@router.get("/runs", response_model=RunListResponse)
async def list_runs():
    """Runs (including ablation variants) that have a manifest."""
    root = settings.runs_root
    if not root.exists():
        return RunListResponse()
    runs = sorted(db.parent.relative_to(root).as_posix() for db in root.rglob("manifest.db"))
    return RunListResponse(runs=runs)


@router.get("/progress", response_model=ProgressResponse)
async def get_progress(run: str = Query(..., description="Run name")):
    """
    Get current progress from state files.
    This is a read-only endpoint.
    """
    progress_file = _layout(run).state_dir / "progress.json"

    if not progress_file.exists():
        return ProgressResponse()

    try:
        data = json.loads(progress_file.read_text(encoding="utf-8"))
        return ProgressResponse(**{k: v for k, v in data.items() if k in ProgressResponse.model_fields})
    except Exception:
        # Return empty progress on any error
        return ProgressResponse()


@router.get("/runner-status", response_model=RunnerStatusResponse)
async def get_runner_status(run: str = Query(..., description="Run name")):
    """
    Check if a runner is working on this run by reading its heartbeat file.
    The runner is considered online if the heartbeat is within the last 10 seconds.
    """
    heartbeat_file = _layout(run).state_dir / "heartbeat.json"

    if not heartbeat_file.exists():
        return RunnerStatusResponse(online=False)

    try:
        data = json.loads(heartbeat_file.read_text(encoding="utf-8"))
        last_heartbeat = data.get("timestamp")
        online = False
        if last_heartbeat:
            age = (datetime.now() - datetime.fromisoformat(last_heartbeat)).total_seconds()
            online = age < 10 and data.get("status") not in ("completed", "failed")
        return RunnerStatusResponse(
            online=online,
            last_heartbeat=last_heartbeat,
            status=data.get("status", "unknown"),
            pid=data.get("pid"),
        )
    except Exception:
        return RunnerStatusResponse(online=False)


@router.get("/manifest", response_model=ManifestResponse)
async def get_run_manifest(run: str = Query(..., description="Run name")):
    """Stage runs and artifacts recorded in the run's manifest.db."""
    layout = _layout(run)
    if not layout.db_path.exists():
        raise HTTPException(status_code=404, detail=f"run {run!r} has no manifest")
    data = await get_manifest(layout.db_path)
    return ManifestResponse(run=run, **data)


@router.get("/report", response_class=PlainTextResponse)
async def get_report(run: str = Query(..., description="Run name")):
    """The run's report.md as markdown text."""
    path: Path = _layout(run).report_dir / "report.md"
    if not path.exists():
        raise HTTPException(status_code=404, detail=f"run {run!r} has no report yet: run `report` first")
    return PlainTextResponse(path.read_text(encoding="utf-8"), media_type="text/markdown")
