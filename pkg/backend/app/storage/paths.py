"""
Path utilities: file hashing, parameter checksums, deterministic names and
the on-disk layout of a run directory.
"""
from pathlib import Path
import hashlib
from typing import Iterable

import torch


def compute_file_hash(file_path: Path, algorithm: str = "sha256") -> str:
    """
    Compute hash of a file using streaming to handle large files.

    Args:
        file_path: Path to the file
        algorithm: Hash algorithm (default: sha256)

    Returns:
        Hex digest of the file hash
    """
    hasher = hashlib.new(algorithm)
    with open(file_path, "rb") as f:
        # Read in 64KB chunks for memory efficiency
        for chunk in iter(lambda: f.read(65536), b""):
            hasher.update(chunk)
    return hasher.hexdigest()


def compute_directory_hash(directory: Path) -> str:
    """Hash of every file below a directory, in sorted relative-path order."""
    hasher = hashlib.sha256()
    for path in sorted(p for p in directory.rglob("*") if p.is_file()):
        hasher.update(str(path.relative_to(directory)).encode("utf-8"))
        hasher.update(compute_file_hash(path).encode("ascii"))
    return hasher.hexdigest()


def parameter_checksum(tensors: Iterable[torch.Tensor]) -> str:
    """
    Bit-exact checksum of a parameter set.

    Used by the freezing contracts: a stage may only change the parameters
    it owns, so every other set must hash identically before and after.
    """
    hasher = hashlib.sha256()
    for t in tensors:
        t = t.detach().cpu().contiguous()
        hasher.update(str(tuple(t.shape)).encode("ascii"))
        hasher.update(str(t.dtype).encode("ascii"))
        hasher.update(t.numpy().tobytes() if t.dtype != torch.bfloat16 else t.float().numpy().tobytes())
    return hasher.hexdigest()


def module_checksum(module: torch.nn.Module) -> str:
    """Checksum of all parameters and buffers of a module."""
    return parameter_checksum(list(module.state_dict().values()))


def generate_deterministic_filename(
    stem: str,
    index: int,
    suffix: str = ".png",
    width: int = 6,
) -> str:
    """
    Generate a deterministic file name.

    Format: {stem}_{index:06d}{suffix}

    Same dataset position always maps to the same name, so a rerun with the
    same seed overwrites files in place instead of accumulating new ones.
    """
    return f"{stem}_{index:0{width}d}{suffix}"


class RunLayout:
    """
    Directory layout of one run.

    runs/<name>/
        config.yaml          config snapshot
        manifest.db          artifact manifest (SQLite)
        state/               progress.json, heartbeat.json
        data/                datasets
        models/              weights + sidecars
        eval/                episode records, summaries
        report/              report.md, tables/*.csv, projections/*.csv
    """

    def __init__(self, root: Path):
        self.root = Path(root)

    @property
    def config_path(self) -> Path:
        return self.root / "config.yaml"

    @property
    def db_path(self) -> Path:
        return self.root / "manifest.db"

    @property
    def state_dir(self) -> Path:
        return self.root / "state"

    @property
    def data_dir(self) -> Path:
        return self.root / "data"

    @property
    def models_dir(self) -> Path:
        return self.root / "models"

    @property
    def eval_dir(self) -> Path:
        return self.root / "eval"

    @property
    def report_dir(self) -> Path:
        return self.root / "report"

    def variant_dir(self, plan: str, variant: str, seed: int) -> Path:
        """runs/<name>/<plan>/<variant>/<seed>/ for ablation variants."""
        return self.root / plan / variant / str(seed)

    def ensure_directories(self) -> None:
        for d in (self.root, self.state_dir, self.data_dir, self.models_dir, self.eval_dir, self.report_dir):
            d.mkdir(parents=True, exist_ok=True)

    def relative(self, path: Path) -> str:
        """Manifest paths are stored relative to the run root."""
        return Path(path).resolve().relative_to(self.root.resolve()).as_posix()
