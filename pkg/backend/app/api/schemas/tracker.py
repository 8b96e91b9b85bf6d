"""
Pydantic schemas for Tracker API.
Extracted from tracker.py for better code organization.
"""
from typing import Optional
from pydantic import BaseModel


class RunListResponse(BaseModel):
    """Run directories found under the runs root."""
    runs: list[str] = []


class ProgressResponse(BaseModel):
    """Response model for progress data."""
    run_name: Optional[str] = None
    stages_total: int = 0
    stages_done: int = 0
    completion_percent: float = 0.0
    current_stage: Optional[str] = None
    current_stage_state: Optional[str] = None
    current_detail: Optional[str] = None
    last_completed_stage: Optional[str] = None
    config_hash: Optional[str] = None
    updated_at: Optional[str] = None
    # Time tracking
    start_time: Optional[str] = None
    elapsed_seconds: Optional[float] = None
    elapsed_formatted: Optional[str] = None


class RunnerStatusResponse(BaseModel):
    """Response model for runner status."""
    online: bool
    last_heartbeat: Optional[str] = None
    status: Optional[str] = None
    pid: Optional[int] = None


class StageInfo(BaseModel):
    """One stage row of the artifact manifest."""
    stage: str
    state: str
    config_hash: Optional[str] = None
    upstream: dict[str, str] = {}
    message: Optional[str] = None
    started_at: Optional[str] = None
    completed_at: Optional[str] = None


class ArtifactInfo(BaseModel):
    """One artifact row of the manifest."""
    stage: str
    name: str
    path: str
    sha256: str
    config_hash: str
    created_at: Optional[str] = None


class ManifestResponse(BaseModel):
    """Full artifact manifest of a run."""
    run: str
    stages: list[StageInfo] = []
    artifacts: list[ArtifactInfo] = []
