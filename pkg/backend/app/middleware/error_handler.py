"""
Centralized Error Handling.
One exception hierarchy for the pipeline: every error knows the process
exit code the CLI should return and the HTTP status the tracker API uses.
"""
import traceback
from typing import Optional

from fastapi import FastAPI, Request, HTTPException
from fastapi.responses import JSONResponse
from pydantic import ValidationError

from ..utils.logger import get_logger

logger = get_logger(__name__)


class PipelineError(Exception):
    """Base class for pipeline errors with consistent reporting format."""

    exit_code: int = 1
    status_code: int = 500

    def __init__(self, message: str, details: Optional[dict] = None):
        self.message = message
        self.details = details or {}
        super().__init__(message)


class ParameterError(PipelineError):
    """Argument outside its documented range."""

    exit_code = 2
    status_code = 422


class TokenizationError(ParameterError):
    """Word outside the closed caption vocabulary."""

    def __init__(self, word: str):
        super().__init__(f"out-of-vocabulary word: {word!r}", details={"word": word})
        self.word = word


class ConfigError(PipelineError):
    """Run configuration failed schema validation."""

    exit_code = 2
    status_code = 422

    def __init__(self, message: str, key_path: str = "", details: Optional[dict] = None):
        super().__init__(message, details={"key_path": key_path, **(details or {})})
        self.key_path = key_path


class MissingArtifactError(PipelineError):
    """Upstream artifact absent; the message names the stage to rerun."""

    exit_code = 3
    status_code = 404

    def __init__(self, stage: str, message: Optional[str] = None, details: Optional[dict] = None):
        super().__init__(
            message or f"{stage} artifact missing: run `{stage}` first",
            details={"stage": stage, **(details or {})},
        )
        self.stage = stage


class ArtifactMismatchError(MissingArtifactError):
    """Artifact on disk no longer matches the hash its producer recorded."""

    exit_code = 3
    status_code = 409

    def __init__(self, stage: str, expected: str, actual: str):
        super().__init__(
            stage,
            message=f"{stage} artifact hash mismatch (expected {expected[:12]}, got {actual[:12]}): rerun `{stage}`",
            details={"expected": expected, "actual": actual},
        )


class TrainingDivergenceError(PipelineError):
    """A training loss became non-finite."""

    exit_code = 4
    status_code = 500

    def __init__(self, stage: str, step: int, losses: Optional[dict] = None):
        losses = {k: float(v) for k, v in (losses or {}).items()}
        super().__init__(
            f"{stage}: non-finite loss at step {step} ({losses})",
            details={"stage": stage, "step": step, "losses": losses},
        )


class FrozenParameterError(PipelineError):
    """Attempt to mutate a module that was frozen after its own stage."""

    exit_code = 1
    status_code = 409


def create_error_response(
    status_code: int,
    message: str,
    error_type: str = "error",
    details: dict = None
) -> dict:
    """
    Create a consistent error response format.

    Format:
    {
        "success": false,
        "error": {
            "type": "error_type",
            "message": "Human readable message",
            "details": {}  # Optional additional context
        }
    }
    """
    response = {
        "success": False,
        "error": {
            "type": error_type,
            "message": message,
        }
    }

    if details:
        response["error"]["details"] = details

    return response


def setup_exception_handlers(app: FastAPI) -> None:
    """
    Register all exception handlers on the tracker app.
    Call this in main.py after creating the app.
    """

    @app.exception_handler(PipelineError)
    async def pipeline_error_handler(request: Request, exc: PipelineError):
        return JSONResponse(
            status_code=exc.status_code,
            content=create_error_response(
                status_code=exc.status_code,
                message=exc.message,
                error_type=exc.__class__.__name__,
                details=exc.details
            )
        )

    @app.exception_handler(HTTPException)
    async def http_exception_handler(request: Request, exc: HTTPException):
        return JSONResponse(
            status_code=exc.status_code,
            content=create_error_response(
                status_code=exc.status_code,
                message=str(exc.detail),
                error_type="HTTPException"
            )
        )

    @app.exception_handler(ValidationError)
    async def validation_error_handler(request: Request, exc: ValidationError):
        return JSONResponse(
            status_code=422,
            content=create_error_response(
                status_code=422,
                message="Validation failed",
                error_type="ValidationError",
                details={"errors": exc.errors()}
            )
        )

    @app.exception_handler(Exception)
    async def general_exception_handler(request: Request, exc: Exception):
        logger.error(traceback.format_exc())
        return JSONResponse(
            status_code=500,
            content=create_error_response(
                status_code=500,
                message="An unexpected error occurred",
                error_type="InternalServerError"
            )
        )
