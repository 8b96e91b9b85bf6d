"""
State writer for the tracker.
Writes run progress files atomically for read-only consumption.
"""
import json
import os
from datetime import datetime
from pathlib import Path
from typing import Optional


class StateWriter:
    """
    Writes state files for the tracker API.

    All writes are atomic (write to temp file, then rename).
    Files live in the run's state directory only.
    """

    def __init__(self, state_dir: Path):
        self.state_dir = Path(state_dir)
        self.state_dir.mkdir(parents=True, exist_ok=True)

    @property
    def progress_file(self) -> Path:
        return self.state_dir / "progress.json"

    @property
    def heartbeat_file(self) -> Path:
        return self.state_dir / "heartbeat.json"

    def _atomic_write(self, file_path: Path, data: dict) -> None:
        """Write data atomically using temp file + rename."""
        temp_path = file_path.with_suffix(".tmp")
        with open(temp_path, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2, default=str)
        temp_path.replace(file_path)

    def write_progress(
        self,
        run_name: str,
        stages_total: int,
        stages_done: int,
        current_stage: Optional[str] = None,
        current_stage_state: Optional[str] = None,
        current_detail: Optional[str] = None,
        last_completed_stage: Optional[str] = None,
        start_time: Optional[datetime] = None,
        config_hash: Optional[str] = None,
    ) -> None:
        """
        Write main progress file.

        This is the primary file read by the tracker API.
        """
        completion_percent = 0.0
        if stages_total > 0:
            completion_percent = (stages_done / stages_total) * 100

        elapsed_seconds = None
        elapsed_formatted = None
        if start_time:
            elapsed_seconds = (datetime.now() - start_time).total_seconds()
            elapsed_formatted = self._format_duration(elapsed_seconds)

        data = {
            "run_name": run_name,
            "stages_total": stages_total,
            "stages_done": stages_done,
            "completion_percent": round(completion_percent, 2),
            "current_stage": current_stage,
            "current_stage_state": current_stage_state,
            "current_detail": current_detail,
            "last_completed_stage": last_completed_stage,
            "config_hash": config_hash,
            "updated_at": datetime.now().isoformat(),
            "start_time": start_time.isoformat() if start_time else None,
            "elapsed_seconds": elapsed_seconds,
            "elapsed_formatted": elapsed_formatted,
        }
        self._atomic_write(self.progress_file, data)

    def write_heartbeat(self, status: str) -> None:
        """Heartbeat for status monitoring."""
        self._atomic_write(self.heartbeat_file, {
            "timestamp": datetime.now().isoformat(),
            "pid": os.getpid(),
            "status": status,
        })

    def read_progress(self) -> Optional[dict]:
        if not self.progress_file.exists():
            return None
        return json.loads(self.progress_file.read_text(encoding="utf-8"))

    def _format_duration(self, seconds: float) -> str:
        """Format duration in seconds to human-readable string."""
        if seconds < 60:
            return f"{int(seconds)}s"
        elif seconds < 3600:
            minutes = int(seconds / 60)
            secs = int(seconds % 60)
            return f"{minutes}m {secs}s"
        else:
            hours = int(seconds / 3600)
            minutes = int((seconds % 3600) / 60)
            return f"{hours}h {minutes}m"
