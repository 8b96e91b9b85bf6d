import logging
from rich.logging import RichHandler
from rich.console import Console
from rich.theme import Theme

# Custom theme for the console
custom_theme = Theme({
    "info": "cyan",
    "warning": "yellow",
    "error": "red bold",
    "critical": "red reverse",
    "success": "green bold",
    "metric": "magenta",
})

# Create a shared console instance
console = Console(theme=custom_theme)


def setup_logging(level="INFO"):
    """Set up rich logging configuration."""
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(rich_tracebacks=True, console=console, markup=True)],
        force=True,
    )

    # Mute some noisy loggers
    logging.getLogger("uvicorn.access").setLevel(logging.WARNING)
    logging.getLogger("PIL").setLevel(logging.WARNING)
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    logging.getLogger("aiosqlite").setLevel(logging.WARNING)


def get_logger(name):
    """Get a named logger."""
    return logging.getLogger(name)


def format_losses(losses: dict) -> str:
    """Render a loss breakdown as `name=value` pairs for one log line."""
    return " ".join(f"{k}=[metric]{v:.4f}[/metric]" for k, v in losses.items())
