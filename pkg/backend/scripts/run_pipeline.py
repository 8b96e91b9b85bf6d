#!/usr/bin/env python
"""
Run pipeline stages from the command line.
"""
import sys
from pathlib import Path

# Add backend to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from app.config import settings
from app.cli import main as cli_main
from app.utils.logger import console
from rich.panel import Panel
from rich.table import Table


def main():
    """Print the banner and hand over to the CLI."""
    info_table = Table(show_header=False, box=None, padding=(0, 1))
    info_table.add_row("[cyan]Runs root:[/]", f"{settings.runs_root.absolute()}")
    info_table.add_row("[cyan]Device:[/]", settings.device)
    info_table.add_row("[cyan]Ablation workers:[/]", f"{settings.ablation_workers}")

    console.print(Panel(
        info_table,
        title="[bold green]Prompt-based Visual Alignment - Pipeline[/bold green]",
        subtitle="[yellow]Press Ctrl+C to stop[/yellow]",
        expand=False,
        border_style="green"
    ))

    settings.ensure_directories()
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
