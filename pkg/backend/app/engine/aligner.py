"""
Visual aligner g_theta and its objective.

g_theta maps an image from any domain toward the unified domain u. It is a
UNet (max-pool down, transposed-conv up, skip concatenations) whose last
layer adds a near-zero residual to the input, so an untrained aligner is
close to the identity.

Loss terms for a source image I and I' = g_theta(I), with the target
prompt P_I^u (P_S^u, P_G shared, P_C from the source image I):

    L_global  = 1 - cos(E_T(P_I^u), E_V(I'))
    L_patch   = sum_i max(0, 1 - cos(E_T(P_I^u), E_V(patch_i(I'))) - tau_patch)
    L_feature = mean over layers of MSE(phi_l(I), phi_l(I'))
    L_total   = L_global + lambda_patch * L_patch + lambda_feature * L_feature
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..config import AlignConfig
from ..middleware.error_handler import ArtifactMismatchError, ParameterError, TrainingDivergenceError
from ..utils.logger import format_losses, get_logger
from .datasets import ImageDataset
from .prompt import AssembledPrompt, PromptParameters
from .vlm import EncoderAdapter, Freezable, PerceptualNet

logger = get_logger(__name__)

FORMAT_VERSION = 1
LOSS_TERMS = ("global", "patch", "feature")


# ============================================================================
# Network
# ============================================================================

def _conv_block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, padding=1),
        nn.LeakyReLU(0.2),
        nn.Conv2d(c_out, c_out, 3, padding=1),
        nn.LeakyReLU(0.2),
    )


class VisualAligner(Freezable):
    """UNet image-to-image map with an identity-biased residual output."""

    def __init__(self, base_width: int = 32, depth: int = 3, residual_init_std: float = 1e-3):
        super().__init__()
        self.depth = depth
        widths = [base_width * 2 ** i for i in range(depth + 1)]
        self.enc = nn.ModuleList([_conv_block(3, widths[0])])
        for i in range(1, depth + 1):
            self.enc.append(nn.Sequential(nn.MaxPool2d(2), _conv_block(widths[i - 1], widths[i])))
        self.up = nn.ModuleList(
            nn.ConvTranspose2d(widths[i], widths[i - 1], 2, stride=2) for i in range(depth, 0, -1)
        )
        self.dec = nn.ModuleList(
            _conv_block(2 * widths[i - 1], widths[i - 1]) for i in range(depth, 0, -1)
        )
        self.out = nn.Conv2d(widths[0], 3, 1)
        nn.init.normal_(self.out.weight, std=residual_init_std)
        nn.init.zeros_(self.out.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] % 2 ** self.depth or x.shape[-2] % 2 ** self.depth:
            raise ParameterError(f"image side must be divisible by {2 ** self.depth}")
        skips = []
        h = x
        for stage in self.enc:
            h = stage(h)
            skips.append(h)
        skips.pop()
        for up, dec in zip(self.up, self.dec):
            h = dec(torch.cat([up(h), skips.pop()], dim=1))
        return torch.clamp(x + self.out(h), 0.0, 1.0)


def map_image(aligner: VisualAligner, images: torch.Tensor) -> torch.Tensor:
    """I' = g_theta(I) for a (3, H, W) image or a batch."""
    single = images.dim() == 3
    out = aligner(images.unsqueeze(0) if single else images)
    return out[0] if single else out


# ============================================================================
# Target prompt and patches
# ============================================================================

def target_prompt(params: PromptParameters, image: torch.Tensor, u: int) -> AssembledPrompt:
    """P_I^u: domain segment of u, P_C from the source image, shared P_G."""
    return params.assemble(image, u)


@dataclass
class PatchSet:
    """
    M crops of one image, rotated and resized to the encoder resolution.

    origins are (top, left) of the unrotated window; `size` is the crop side
    before resizing.
    """
    patches: torch.Tensor       # (M, 3, R, R)
    origins: np.ndarray         # (M, 2) int
    angles: np.ndarray          # (M,) degrees
    size: int
    seed: int

    def __len__(self) -> int:
        return self.patches.shape[0]

    @property
    def resolution(self) -> int:
        return self.patches.shape[-1]


def _rotate(crops: torch.Tensor, angles_deg: np.ndarray) -> torch.Tensor:
    """Rotate each crop about its center; corners are zero padded."""
    rad = torch.as_tensor(np.radians(angles_deg), dtype=crops.dtype, device=crops.device)
    cos, sin = torch.cos(rad), torch.sin(rad)
    zeros = torch.zeros_like(cos)
    theta = torch.stack([
        torch.stack([cos, -sin, zeros], dim=-1),
        torch.stack([sin, cos, zeros], dim=-1),
    ], dim=1)
    grid = F.affine_grid(theta, list(crops.shape), align_corners=False)
    return F.grid_sample(crops, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


def sample_patches(
    image: torch.Tensor,
    config: AlignConfig,
    seed: int,
    resolution: Optional[int] = None,
) -> PatchSet:
    """
    M seeded crops of a (3, H, W) image, each rotated by a seeded angle and
    bilinearly resized to `resolution` (default: the image's own side, which
    is the encoder input size). Every step is differentiable in the image.
    """
    _, height, width = image.shape
    size = config.patch_size
    if size >= min(height, width):
        raise ParameterError(f"patch_size {size} must be smaller than the image ({height}x{width})")
    resolution = resolution or height
    rng = np.random.default_rng(seed)
    m = config.num_patches
    tops = rng.integers(0, height - size + 1, size=m)
    lefts = rng.integers(0, width - size + 1, size=m)
    angles = rng.uniform(-config.rotation_range, config.rotation_range, size=m) if config.rotation_range > 0 else np.zeros(m)
    crops = torch.stack([image[:, t:t + size, l:l + size] for t, l in zip(tops, lefts)])
    rotate = angles != 0.0
    if rotate.any():
        rotated = _rotate(crops[torch.as_tensor(rotate)], angles[rotate])
        parts = []
        j = 0
        for i in range(m):
            if rotate[i]:
                parts.append(rotated[j])
                j += 1
            else:
                parts.append(crops[i])
        crops = torch.stack(parts)
    if resolution != size:
        crops = F.interpolate(crops, size=(resolution, resolution), mode="bilinear", align_corners=False)
    return PatchSet(crops, np.stack([tops, lefts], axis=1), angles, size, seed)


# ============================================================================
# Losses
# ============================================================================

def global_loss_from_embeddings(image_emb: torch.Tensor, text_emb: torch.Tensor) -> torch.Tensor:
    """1 - cos per row; inputs need not be normalized."""
    return 1.0 - F.cosine_similarity(image_emb, text_emb, dim=-1)


def patch_loss_from_values(per_patch: torch.Tensor, tau: float, reduction: str = "sum") -> torch.Tensor:
    """Threshold rejection: patches at or below tau add neither value nor gradient."""
    kept = F.relu(per_patch - tau)
    return kept.sum(dim=-1) if reduction == "sum" else kept.mean(dim=-1)


def loss_global(aligned: torch.Tensor, prompt_emb: torch.Tensor, encoder: EncoderAdapter) -> torch.Tensor:
    """Per-image L_global for a batch of aligned images and target text embeddings."""
    return global_loss_from_embeddings(encoder.encode_images(aligned), prompt_emb)


def loss_patch(
    patches: PatchSet,
    prompt_emb: torch.Tensor,
    encoder: EncoderAdapter,
    tau_patch: float,
    reduction: str = "sum",
) -> torch.Tensor:
    emb = encoder.encode_images(patches.patches)
    per_patch = global_loss_from_embeddings(emb, prompt_emb.expand_as(emb))
    return patch_loss_from_values(per_patch, tau_patch, reduction)


def feature_loss_from_features(a: Sequence[torch.Tensor], b: Sequence[torch.Tensor]) -> torch.Tensor:
    return torch.stack([F.mse_loss(x, y) for x, y in zip(a, b)]).mean()


def loss_feature(source: torch.Tensor, aligned: torch.Tensor, net: PerceptualNet) -> torch.Tensor:
    return feature_loss_from_features(net(source), net(aligned))


def combine_losses(breakdown: dict[str, torch.Tensor], config: AlignConfig) -> torch.Tensor:
    """Weighted total of the terms present in a breakdown."""
    weights = {"global": 1.0, "patch": config.lambda_patch, "feature": config.lambda_feature}
    return sum(weights[name] * value for name, value in breakdown.items())


def loss_total(
    source: torch.Tensor,
    aligned: torch.Tensor,
    prompt_emb: torch.Tensor,
    encoder: EncoderAdapter,
    net: PerceptualNet,
    config: AlignConfig,
    patch_seeds: Optional[Sequence[int]] = None,
    source_features: Optional[Sequence[torch.Tensor]] = None,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """
    Batch-mean total loss and its per-term breakdown.

    Disabled terms are absent from the breakdown (not zero-valued).
    """
    breakdown: dict[str, torch.Tensor] = {}
    if config.use_global:
        breakdown["global"] = loss_global(aligned, prompt_emb, encoder).mean()
    if config.use_patch and config.lambda_patch > 0:
        seeds = patch_seeds if patch_seeds is not None else range(aligned.shape[0])
        per_image = [
            loss_patch(sample_patches(aligned[i], config, int(s)), prompt_emb[i], encoder,
                       config.tau_patch, config.patch_reduction)
            for i, s in enumerate(seeds)
        ]
        breakdown["patch"] = torch.stack(per_image).mean()
    if config.use_feature and config.lambda_feature > 0:
        src = source_features if source_features is not None else [f.detach() for f in net(source)]
        breakdown["feature"] = feature_loss_from_features(src, net(aligned))
    if not breakdown:
        raise ParameterError("every aligner loss term is disabled")
    return combine_losses(breakdown, config), breakdown


# ============================================================================
# Training
# ============================================================================

@torch.no_grad()
def target_embeddings(
    params: PromptParameters,
    encoder: EncoderAdapter,
    images: torch.Tensor,
    u: int,
    batch_size: int = 64,
) -> torch.Tensor:
    """E_T(P_I^u) per source image; constant during training since everything upstream is frozen."""
    out = []
    for s in range(0, images.shape[0], batch_size):
        out.append(encoder.encode_tokens(params.assemble_batch(images[s:s + batch_size], u)))
    return torch.cat(out)


@torch.no_grad()
def mean_global_loss(
    aligner: VisualAligner,
    encoder: EncoderAdapter,
    images: torch.Tensor,
    prompt_emb: torch.Tensor,
    batch_size: int = 64,
) -> float:
    if images.shape[0] == 0:
        return float("nan")
    total = 0.0
    for s in range(0, images.shape[0], batch_size):
        aligned = aligner(images[s:s + batch_size])
        total += loss_global(aligned, prompt_emb[s:s + batch_size], encoder).sum().item()
    return total / images.shape[0]


def train_aligner(
    dataset: ImageDataset,
    params: PromptParameters,
    encoder: EncoderAdapter,
    net: PerceptualNet,
    config: AlignConfig,
    seed: int,
) -> tuple[VisualAligner, dict[str, list[float]]]:
    """
    Train g_theta toward domain `config.unified_domain` over every image of
    D_semantic; only theta is optimized.

    Returns:
        (frozen aligner, history) with per-epoch term means, `total`, and
        `heldout_global` (index 0 is the value before training)
    """
    u = config.unified_domain
    if not 0 <= u < params.num_domains:
        raise ParameterError(f"unified domain {u} out of range for K={params.num_domains}")
    torch.manual_seed(seed)
    aligner = VisualAligner(config.base_width, config.depth)
    train, held = dataset.split(config.holdout_fraction, seed)
    images = train.tensor()
    held_images = held.tensor()
    targets = target_embeddings(params, encoder, images, u)
    held_targets = target_embeddings(params, encoder, held_images, u) if len(held) else torch.zeros(0)
    with torch.no_grad():
        source_features = net(images) if config.use_feature else None

    optimizer = torch.optim.Adam(aligner.parameters(), lr=config.lr)
    generator = torch.Generator().manual_seed(seed)
    history: dict[str, list[float]] = {name: [] for name in LOSS_TERMS}
    history["total"] = []
    history["heldout_global"] = [mean_global_loss(aligner, encoder, held_images, held_targets)]

    step = 0
    for epoch in range(config.epochs):
        aligner.train()
        perm = torch.randperm(images.shape[0], generator=generator)
        sums = {name: 0.0 for name in LOSS_TERMS + ("total",)}
        batches = 0
        for s in range(0, len(perm), config.batch_size):
            idx = perm[s:s + config.batch_size]
            aligned = aligner(images[idx])
            patch_seeds = torch.randint(0, 2**31 - 1, (len(idx),), generator=generator).tolist()
            feats = [f[idx] for f in source_features] if source_features is not None else None
            total, breakdown = loss_total(
                images[idx], aligned, targets[idx], encoder, net, config,
                patch_seeds=patch_seeds, source_features=feats,
            )
            if not torch.isfinite(total):
                raise TrainingDivergenceError(
                    "train-aligner", step, {k: v.item() for k, v in breakdown.items()}
                )
            optimizer.zero_grad()
            total.backward()
            optimizer.step()
            for name, value in breakdown.items():
                sums[name] += value.item()
            sums["total"] += total.item()
            batches += 1
            step += 1
        aligner.eval()
        for name in LOSS_TERMS:
            history[name].append(sums[name] / batches if name in breakdown else float("nan"))
        history["total"].append(sums["total"] / batches)
        history["heldout_global"].append(mean_global_loss(aligner, encoder, held_images, held_targets))
        logger.info(
            f"aligner epoch {epoch + 1}/{config.epochs} "
            + format_losses({k: sums[k] / batches for k in breakdown} | {"heldout_global": history["heldout_global"][-1]})
        )
    return aligner.freeze(), history


@torch.no_grad()
def align_dataset(aligner: VisualAligner, images: torch.Tensor, batch_size: int = 64) -> torch.Tensor:
    return torch.cat([aligner(images[s:s + batch_size]) for s in range(0, images.shape[0], batch_size)])


# ============================================================================
# Persistence
# ============================================================================

def save_aligner(aligner: VisualAligner, config: AlignConfig, prompt_hash: str, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format_version": FORMAT_VERSION,
        "align_config": config.model_dump(mode="json"),
        "prompt_hash": prompt_hash,
        "state_dict": aligner.state_dict(),
    }, path)
    return path


def load_aligner(path: Path, expected_prompt_hash: Optional[str] = None) -> tuple[VisualAligner, AlignConfig]:
    """Load a trained aligner; it must have been trained against the given prompt artifact."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format_version") != FORMAT_VERSION:
        raise ArtifactMismatchError("train-aligner", str(FORMAT_VERSION), str(payload.get("format_version")))
    if expected_prompt_hash is not None and payload["prompt_hash"] != expected_prompt_hash:
        raise ArtifactMismatchError("tune-prompts", payload["prompt_hash"], expected_prompt_hash)
    config = AlignConfig(**payload["align_config"])
    aligner = VisualAligner(config.base_width, config.depth)
    aligner.load_state_dict(payload["state_dict"])
    return aligner.freeze(), config

