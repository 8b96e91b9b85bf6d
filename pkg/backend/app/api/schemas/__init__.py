"""
API Schemas Package.
Centralized Pydantic models for all API endpoints.
"""
from .tracker import (
    ArtifactInfo,
    ManifestResponse,
    ProgressResponse,
    RunListResponse,
    RunnerStatusResponse,
    StageInfo,
)

__all__ = [
    "ArtifactInfo",
    "ManifestResponse",
    "ProgressResponse",
    "RunListResponse",
    "RunnerStatusResponse",
    "StageInfo",
]
