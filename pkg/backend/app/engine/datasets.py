"""
Image datasets sampled from the procedural world.

- D_semantic: a few images per seen domain (stages 1-2)
- D_policy: many images from the unified domain (stage-3 feature pretraining)
- caption pairs: (image, caption) over every registered domain (surrogate VLM)

On disk a dataset is a directory of lossless PNG files plus `manifest.jsonl`
with one record per image.
"""
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np
import torch
from PIL import Image

from ..config import DomainSpec, derive_seed
from ..middleware.error_handler import ParameterError
from ..storage.paths import generate_deterministic_filename
from ..utils.logger import get_logger
from .synthworld import SynthWorld, caption, state_record

logger = get_logger(__name__)

MANIFEST_NAME = "manifest.jsonl"


@dataclass
class ImageDataset:
    """Rendered images with their domain index and the state that produced them."""
    images: np.ndarray                  # (N, H, W, 3) float32 in [0, 1]
    domain_indices: np.ndarray          # (N,) int64
    metadata: list[dict[str, Any]]
    domain_names: list[str]
    per_domain_count: int
    captions: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.images)
        if len(self.domain_indices) != n or len(self.metadata) != n:
            raise ParameterError("dataset columns have different lengths")
        if n and int(self.domain_indices.max()) >= len(self.domain_names):
            raise ParameterError("domain_index out of range for dataset domains")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_domains(self) -> int:
        return len(self.domain_names)

    def counts(self) -> dict[int, int]:
        values, counts = np.unique(self.domain_indices, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}

    def indices_of(self, domain_index: int) -> np.ndarray:
        return np.flatnonzero(self.domain_indices == domain_index)

    def subset(self, indices: np.ndarray) -> "ImageDataset":
        indices = np.asarray(indices, dtype=np.int64)
        counts = np.bincount(self.domain_indices[indices], minlength=self.num_domains)
        nonzero = counts[counts > 0]
        per_domain = int(nonzero[0]) if len(nonzero) and np.all(nonzero == nonzero[0]) else 0
        return ImageDataset(
            images=self.images[indices],
            domain_indices=self.domain_indices[indices],
            metadata=[self.metadata[i] for i in indices],
            domain_names=list(self.domain_names),
            per_domain_count=per_domain,
            captions=[self.captions[i] for i in indices] if self.captions else [],
        )

    def split(self, holdout_fraction: float, seed: int) -> tuple["ImageDataset", "ImageDataset"]:
        """Stratified train/held-out split (per domain)."""
        rng = np.random.default_rng(seed)
        train, held = [], []
        for k in range(self.num_domains):
            idx = self.indices_of(k)
            idx = idx[rng.permutation(len(idx))]
            n_held = int(round(holdout_fraction * len(idx)))
            held.extend(idx[:n_held].tolist())
            train.extend(idx[n_held:].tolist())
        return self.subset(np.sort(train)), self.subset(np.sort(held))

    def tensor(self, indices: Optional[np.ndarray] = None) -> torch.Tensor:
        images = self.images if indices is None else self.images[indices]
        return images_to_tensor(images)


def images_to_tensor(images: np.ndarray) -> torch.Tensor:
    """(N, H, W, 3) or (H, W, 3) numpy images -> (N, 3, H, W) float32 tensor."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def tensor_to_images(tensor: torch.Tensor) -> np.ndarray:
    return tensor.detach().cpu().permute(0, 2, 3, 1).numpy().astype(np.float32)


# ============================================================================
# Sampling
# ============================================================================

def _render_domain(
    world: SynthWorld,
    domain: DomainSpec,
    count: int,
    rng: np.random.Generator,
    initial: bool = False,
) -> tuple[list[np.ndarray], list[dict]]:
    images, records = [], []
    for _ in range(count):
        state = world.initial_state(rng) if initial else world.random_state(rng)
        render_seed = int(rng.integers(0, 2**31 - 1))
        images.append(world.render(state, domain, render_seed))
        record = state_record(state, world)
        record["render_seed"] = render_seed
        records.append(record)
    return images, records


def _check_registered(world: SynthWorld, domain: DomainSpec) -> None:
    if domain not in world.registry:
        raise ParameterError(f"domain {domain.name!r} is not in the world registry")


def sample_semantic_dataset(
    world: SynthWorld,
    domains: list[DomainSpec],
    per_domain: int,
    seed: int,
) -> ImageDataset:
    """
    D_semantic: `per_domain` renders of randomized states for each domain.

    Entry i belongs to domain `domains[domain_indices[i]]`; states are
    sampled independently per domain from a per-domain derived seed.
    """
    if len(domains) < 2:
        raise ParameterError("D_semantic needs at least 2 domains")
    if per_domain < 1:
        raise ParameterError(f"per_domain must be >= 1, got {per_domain}")
    images, indices, metadata, captions = [], [], [], []
    for k, domain in enumerate(domains):
        _check_registered(world, domain)
        rng = np.random.default_rng(derive_seed(seed, f"semantic:{domain.name}"))
        imgs, records = _render_domain(world, domain, per_domain, rng)
        images.extend(imgs)
        indices.extend([k] * per_domain)
        metadata.extend(records)
        captions.extend(caption(r, domain) for r in records)
    logger.info(f"Sampled D_semantic: {len(domains)} domains x {per_domain} images")
    return ImageDataset(
        images=np.stack(images).astype(np.float32),
        domain_indices=np.array(indices, dtype=np.int64),
        metadata=metadata,
        domain_names=[d.name for d in domains],
        per_domain_count=per_domain,
        captions=captions,
    )


def sample_policy_dataset(world: SynthWorld, domain: DomainSpec, n: int, seed: int) -> ImageDataset:
    """D_policy: `n` renders from one domain."""
    if n < 1:
        raise ParameterError(f"n must be >= 1, got {n}")
    _check_registered(world, domain)
    rng = np.random.default_rng(derive_seed(seed, f"policy:{domain.name}"))
    images, records = _render_domain(world, domain, n, rng)
    logger.info(f"Sampled D_policy: {n} images from {domain.name}")
    return ImageDataset(
        images=np.stack(images).astype(np.float32),
        domain_indices=np.zeros(n, dtype=np.int64),
        metadata=records,
        domain_names=[domain.name],
        per_domain_count=n,
        captions=[caption(r, domain) for r in records],
    )


def sample_caption_pairs(world: SynthWorld, per_domain: int, seed: int) -> ImageDataset:
    """Caption-image pairs over every registered domain, for VLM pretraining."""
    domains = list(world.registry)
    if per_domain < 1:
        raise ParameterError(f"per_domain must be >= 1, got {per_domain}")
    images, indices, metadata, captions = [], [], [], []
    for k, domain in enumerate(domains):
        rng = np.random.default_rng(derive_seed(seed, f"pairs:{domain.name}"))
        imgs, records = _render_domain(world, domain, per_domain, rng)
        images.extend(imgs)
        indices.extend([k] * per_domain)
        metadata.extend(records)
        captions.extend(caption(r, domain) for r in records)
    return ImageDataset(
        images=np.stack(images).astype(np.float32),
        domain_indices=np.array(indices, dtype=np.int64),
        metadata=metadata,
        domain_names=[d.name for d in domains],
        per_domain_count=per_domain,
        captions=captions,
    )


# ============================================================================
# Persistence
# ============================================================================

def save_dataset(dataset: ImageDataset, directory: Path, stem: str = "img") -> Path:
    """
    Write PNG files plus the JSON-lines manifest into a fresh `directory`;
    anything already there is removed first.

    Returns:
        Path of the manifest file
    """
    directory = Path(directory)
    if directory.exists():
        shutil.rmtree(directory)
    directory.mkdir(parents=True)
    manifest_path = directory / MANIFEST_NAME
    lines = []
    for i in range(len(dataset)):
        name = generate_deterministic_filename(stem, i)
        pixels = np.round(np.clip(dataset.images[i], 0.0, 1.0) * 255.0).astype(np.uint8)
        Image.fromarray(pixels).save(directory / name, format="PNG")
        k = int(dataset.domain_indices[i])
        lines.append(json.dumps({
            "file": name,
            "domain_index": k,
            "domain": dataset.domain_names[k],
            "state_metadata": dataset.metadata[i],
            "caption": dataset.captions[i] if dataset.captions else None,
        }, sort_keys=True))
    header = json.dumps({
        "domains": dataset.domain_names,
        "per_domain_count": dataset.per_domain_count,
    }, sort_keys=True)
    temp_path = manifest_path.with_suffix(".tmp")
    temp_path.write_text("\n".join([header] + lines) + "\n", encoding="utf-8")
    temp_path.replace(manifest_path)
    return manifest_path


def load_dataset(directory: Path) -> ImageDataset:
    """Read a dataset written by `save_dataset` (pixels come back 8-bit quantized)."""
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    if not manifest_path.exists():
        raise ParameterError(f"no dataset manifest at {manifest_path}")
    raw = [line for line in manifest_path.read_text(encoding="utf-8").splitlines() if line.strip()]
    header = json.loads(raw[0])
    images, indices, metadata, captions = [], [], [], []
    for line in raw[1:]:
        record = json.loads(line)
        with Image.open(directory / record["file"]) as img:
            images.append(np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0)
        indices.append(record["domain_index"])
        metadata.append(record["state_metadata"])
        if record.get("caption") is not None:
            captions.append(record["caption"])
    return ImageDataset(
        images=np.stack(images).astype(np.float32),
        domain_indices=np.array(indices, dtype=np.int64),
        metadata=metadata,
        domain_names=header["domains"],
        per_domain_count=header["per_domain_count"],
        captions=captions if len(captions) == len(images) else [],
    )


def dataset_files(directory: Path) -> list[Path]:
    """Every file a saved dataset consists of (for manifest registration)."""
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix in (".png", ".jsonl"))
