#!/usr/bin/env python
"""
Run the FastAPI tracker server.
"""
import sys
from pathlib import Path

# Add backend to path
sys.path.insert(0, str(Path(__file__).parent.parent))

import uvicorn
from app.config import settings
from app.utils.logger import setup_logging, console
from rich.panel import Panel
from rich.table import Table


def main():
    """Start the FastAPI server."""
    setup_logging(settings.log_level)

    table = Table(show_header=False, box=None, padding=(0, 1))
    table.add_row("[cyan]Tracker API:[/]", f"http://{settings.server_host}:{settings.server_port}/api/tracker/runs")
    table.add_row("[cyan]API docs:[/]", f"http://{settings.server_host}:{settings.server_port}/docs")
    table.add_row("[cyan]Runs root:[/]", f"{settings.runs_root.absolute()}")

    console.print(Panel(
        table,
        title="[bold cyan]Prompt-based Visual Alignment - Tracker[/bold cyan]",
        expand=False,
        border_style="cyan"
    ))

    uvicorn.run(
        "app.main:app",
        host=settings.server_host,
        port=settings.server_port,
        reload=False,
        log_level="info"
    )


if __name__ == "__main__":
    main()
