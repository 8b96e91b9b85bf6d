"""
Pipeline runner - executes stages in order against one run directory.
"""
import asyncio
import os
from datetime import datetime
from typing import Optional, Sequence

from rich.console import Group
from rich.panel import Panel
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn, TimeElapsedColumn
from rich.table import Table

from ..config import RunConfig, config_hash, dump_run_config, settings
from ..db import manifest
from ..db.db import init_database
from ..engine.pipeline import STAGE_SPECS, StageContext, artifact_hash, gather_inputs, stage_hash, verify_stage
from ..middleware.error_handler import MissingArtifactError, ParameterError
from ..state.state_writer import StateWriter
from ..storage.paths import RunLayout
from ..utils.logger import console, get_logger


class PipelineRunner:
    """
    Runs a sequence of stages for one run directory.

    Responsibilities:
    - Write the config snapshot and initialize the manifest
    - Run resume logic for stages interrupted mid-run
    - Skip (with --resume) stages whose manifest entry still matches
    - Execute stages off the event loop, then hash and record their artifacts
    - Write progress and heartbeat files for the tracker (background task)
    """

    def __init__(self, config: RunConfig, resume: bool = False, show_progress: bool = True):
        self.config = config
        self.resume = resume
        self.show_progress = show_progress
        self.layout = RunLayout(config.resolved_run_dir())
        self.logger = get_logger("runner")
        self.state_writer: Optional[StateWriter] = None
        self.running = False
        self._heartbeat_task: Optional[asyncio.Task] = None
        self._current_status = "starting"

    async def run(self, stages: Sequence[str]) -> dict[str, str]:
        """
        Execute `stages` in order.

        Returns:
            stage -> "completed" | "skipped"
        """
        unknown = [s for s in stages if s not in STAGE_SPECS]
        if unknown:
            raise ParameterError(f"unknown stages: {unknown}")

        self.layout.ensure_directories()
        self.layout.config_path.write_text(dump_run_config(self.config), encoding="utf-8")
        await init_database(self.layout.db_path)
        self.state_writer = StateWriter(self.layout.state_dir)
        self.running = True
        self._heartbeat_task = asyncio.create_task(self._heartbeat_loop())
        start_time = datetime.now()
        outcome: dict[str, str] = {}
        last_completed = None

        try:
            if self.resume:
                self._current_status = "resuming"
                await self._resume_interrupted()
            if self.show_progress:
                self._display_run_info(stages)

            with Progress(
                SpinnerColumn(),
                TextColumn("[progress.description]{task.description}"),
                BarColumn(),
                TextColumn("[progress.percentage]{task.percentage:>3.0f}%"),
                TimeElapsedColumn(),
                console=console,
                disable=not self.show_progress,
                expand=True,
            ) as progress:
                for done, stage in enumerate(stages):
                    self._write_progress(len(stages), done, stage, "RUNNING", None, last_completed, start_time)
                    task_id = progress.add_task(stage, total=100)
                    if self.resume and await self._is_current(stage):
                        progress.update(task_id, completed=100, description=f"{stage} [dim](cached)[/dim]")
                        self.logger.info(f"Stage [cyan]{stage}[/cyan] up to date, skipped")
                        outcome[stage] = "skipped"
                    else:
                        await self._run_stage(stage, progress, task_id, len(stages), done, start_time)
                        outcome[stage] = "completed"
                    last_completed = stage
            self._current_status = "completed"
            self._write_progress(len(stages), len(stages), None, None, None, last_completed, start_time)
            return outcome
        except Exception:
            self._current_status = "failed"
            raise
        finally:
            self.running = False
            if self._heartbeat_task:
                self._heartbeat_task.cancel()
                try:
                    await self._heartbeat_task
                except asyncio.CancelledError:
                    pass
            self.state_writer.write_heartbeat(self._current_status)

    async def _run_stage(self, stage, progress, task_id, stages_total, stages_done, start_time) -> None:
        spec = STAGE_SPECS[stage]
        digest = stage_hash(self.config, stage)
        inputs = await gather_inputs(self.config, self.layout, stage)
        upstream = {name: sha for name, (_, sha) in sorted(inputs.items())}
        await manifest.start_stage(self.layout.db_path, stage, digest, upstream)
        self._current_status = f"running {stage}"
        self.logger.info(f"Stage [cyan]{stage}[/cyan] started")

        def report(fraction: float, detail: str) -> None:
            progress.update(task_id, completed=100 * min(max(fraction, 0.0), 1.0))
            self._write_progress(stages_total, stages_done, stage, "RUNNING", detail, None, start_time)

        ctx = StageContext(
            config=self.config,
            layout=self.layout,
            stage=stage,
            inputs={name: path for name, (path, _) in inputs.items()},
            digests=upstream,
            progress=report,
        )
        try:
            outputs = await asyncio.to_thread(spec.run, ctx)
            artifacts = {
                name: (self.layout.relative(path), await asyncio.to_thread(artifact_hash, path))
                for name, path in outputs.items()
            }
        except Exception as exc:
            await manifest.fail_stage(self.layout.db_path, stage, str(exc))
            self.logger.error(f"Stage [cyan]{stage}[/cyan] failed: {exc}")
            raise
        await manifest.complete_stage(self.layout.db_path, stage, digest, artifacts)
        progress.update(task_id, completed=100)
        self.logger.info(f"[success]Stage {stage} completed[/success] ({len(artifacts)} artifacts)")

    async def _is_current(self, stage: str) -> bool:
        """A stage is current if it verifies and its upstream digests are unchanged."""
        try:
            await verify_stage(self.config, self.layout, stage)
            inputs = await gather_inputs(self.config, self.layout, stage)
        except MissingArtifactError:
            return False
        record = await manifest.get_stage(self.layout.db_path, stage)
        return record["upstream"] == {name: sha for name, (_, sha) in inputs.items()}

    async def _resume_interrupted(self) -> None:
        """RUNNING stages left by a crash go back to PENDING."""
        self.logger.info("Running resume logic...")
        for stage in await manifest.reset_running_stages(self.layout.db_path):
            self.logger.info(f"  Resetting stage {stage} from RUNNING to PENDING")
        self.logger.info("Resume logic complete.")

    async def _heartbeat_loop(self) -> None:
        """Background task that writes heartbeat every 3 seconds."""
        while self.running:
            try:
                self.state_writer.write_heartbeat(self._current_status)
            except Exception as e:
                self.logger.error(f"Heartbeat error: {e}")
            await asyncio.sleep(3)

    def _write_progress(self, total, done, stage, state, detail, last_completed, start_time) -> None:
        self.state_writer.write_progress(
            run_name=self.config.name,
            stages_total=total,
            stages_done=done,
            current_stage=stage,
            current_stage_state=state,
            current_detail=detail,
            last_completed_stage=last_completed,
            start_time=start_time,
            config_hash=config_hash(self.config),
        )

    def _display_run_info(self, stages: Sequence[str]) -> None:
        table = Table(show_header=False, box=None, padding=(0, 1))
        table.add_row("[cyan]Run directory:[/]", f"{self.layout.root.absolute()}")
        table.add_row("[cyan]Seed:[/]", f"{self.config.seed}")
        table.add_row("[cyan]Config hash:[/]", f"{config_hash(self.config)[:12]}")
        table.add_row("[cyan]Stages:[/]", ", ".join(stages))
        table.add_row("[cyan]Torch threads:[/]", f"{settings.num_threads or os.cpu_count()}")
        content = [table]
        if self.resume:
            content.append("\n[bold yellow]Resume mode: up-to-date stages are skipped.[/bold yellow]")
        console.print(Panel(
            Group(*content),
            title=f"[bold blue]Run {self.config.name}[/bold blue]",
            expand=False,
            border_style="blue",
        ))
