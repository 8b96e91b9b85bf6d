"""
Middleware Package.
Exception hierarchy shared by the CLI and the tracker API.
"""
from .error_handler import (
    ArtifactMismatchError,
    ConfigError,
    FrozenParameterError,
    MissingArtifactError,
    ParameterError,
    PipelineError,
    TokenizationError,
    TrainingDivergenceError,
    setup_exception_handlers,
)

__all__ = [
    "ArtifactMismatchError",
    "ConfigError",
    "FrozenParameterError",
    "MissingArtifactError",
    "ParameterError",
    "PipelineError",
    "TokenizationError",
    "TrainingDivergenceError",
    "setup_exception_handlers",
]
