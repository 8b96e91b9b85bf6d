"""
FastAPI application entry point.
Read-only tracker for pipeline runs: progress, manifest and report.
"""
from fastapi import FastAPI

from .config import settings
from .api import tracker
from .middleware import setup_exception_handlers

# Initialize FastAPI app
app = FastAPI(
    title="Prompt-based Visual Alignment Tracker",
    description="Progress, artifact manifest and report of pipeline runs",
    version="1.0.0"
)

# Setup centralized error handling
setup_exception_handlers(app)

# Include API routers
app.include_router(tracker.router, prefix="/api/tracker", tags=["tracker"])


@app.on_event("startup")
async def startup_event():
    """Make sure the runs root exists."""
    settings.ensure_directories()


# ============================================================================
# Health Check & Info Endpoints
# ============================================================================

@app.get("/api/health", tags=["system"])
async def health_check():
    """
    Health check endpoint for monitoring.
    Returns service status and basic info.
    """
    return {
        "status": "healthy",
        "service": "Prompt-based Visual Alignment Tracker",
        "version": "1.0.0"
    }


@app.get("/api/info", tags=["system"])
async def system_info():
    """Process settings, useful for debugging."""
    import torch

    return {
        "version": "1.0.0",
        "runs_root": str(settings.runs_root.absolute()),
        "device": settings.device,
        "num_threads": settings.num_threads or torch.get_num_threads(),
        "ablation_workers": settings.ablation_workers,
        "cuda_available": torch.cuda.is_available(),
    }
