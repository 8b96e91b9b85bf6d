"""
Gradient attribution of the image-text score.

The cosine between E_V(I) and E_T(prompt) is backpropagated to the pixels.
The prompt keeps its full layout but only one learnable part (domain-specific
P_S^k or domain-agnostic P_C + P_G); the other learnable segments are
overwritten in place with the padding token vector, so the kept part stays
at its usual positions.
"""
from typing import Literal

import numpy as np
import torch

from ..middleware.error_handler import ParameterError
from .datasets import images_to_tensor
from .prompt import PromptParameters
from .vlm import EncoderAdapter

Segment = Literal["domain-specific", "domain-agnostic"]
SEGMENTS = ("domain-specific", "domain-agnostic")

KEPT_PARTS = {"domain-specific": ("domain",), "domain-agnostic": ("instance", "global")}
# Vocabulary keeps <pad> at index 0
PAD_ID = 0


def template_filler(encoder: EncoderAdapter, length: int) -> torch.Tensor:
    """(length, d_tok) copies of the padding token vector."""
    with torch.no_grad():
        return encoder.embed_ids(torch.full((length,), PAD_ID, dtype=torch.long))


def segment_tokens(
    params: PromptParameters,
    encoder: EncoderAdapter,
    image: torch.Tensor,
    k: int,
    segment: Segment,
) -> torch.Tensor:
    """(1, L, d_tok) full-length prompt holding only `segment` inside the fixed template."""
    if segment not in SEGMENTS:
        raise ParameterError(f"unknown segment {segment!r}; expected one of {SEGMENTS}")
    params._check_domain(k)
    if params.fixed_sentence:
        return getattr(params, f"sentence_{k}").unsqueeze(0)
    layout = params.segment_layout(k)
    kept = [name for name in KEPT_PARTS[segment] if name in layout]
    if not kept:
        raise ParameterError(f"prompt set has no {segment} segment")
    with torch.no_grad():
        tokens = params.assemble_batch(image, k).clone()
    for name in ("instance", "domain", "global"):
        if name in layout and name not in kept:
            part = layout[name]
            tokens[:, part] = template_filler(encoder, part.stop - part.start).to(tokens.dtype)
    return tokens


def attribution_map(
    params: PromptParameters,
    encoder: EncoderAdapter,
    image: np.ndarray,
    k: int,
    segment: Segment = "domain-specific",
) -> np.ndarray:
    """
    Per-pixel |d cos / d pixel| summed over channels, scaled to [0, 1].

    Args:
        image: (H, W, 3) float image
        k: domain index whose P_S^k is used

    Returns:
        (H, W) float32 map
    """
    x = images_to_tensor(image).clone().requires_grad_(True)
    with torch.no_grad():
        text_emb = encoder.encode_tokens(segment_tokens(params, encoder, x.detach(), k, segment))
    score = (encoder.encode_images(x) * text_emb).sum()
    (grad,) = torch.autograd.grad(score, x)
    saliency = grad.abs().sum(dim=1)[0].numpy().astype(np.float32)
    peak = float(saliency.max())
    if peak <= 0.0:
        return np.zeros_like(saliency)
    return saliency / peak


def mask_mass(saliency: np.ndarray, mask: np.ndarray) -> float:
    """Share of the total attribution that falls inside `mask`."""
    total = float(saliency.sum())
    if total <= 0.0:
        return 0.0
    return float(saliency[mask].sum()) / total
