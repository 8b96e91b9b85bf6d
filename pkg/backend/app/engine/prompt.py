"""
Structured prompts.

An assembled prompt for image I and domain k is

    [prefix][P_C = h_phi(I)][P_S^k][P_G][suffix]

with fixed vocabulary vectors for prefix/suffix and learnable vectors for
the three middle segments. Segment masks drop P_G, P_S or P_C (ablations);
the fixed-sentence variant replaces the whole prompt by a tokenized
template sentence per domain.

Tuning alternates two phases:
- phase A: L_domain, updates P_G and P_S only
- phase B: L_ins, updates the instance learner phi only
"""
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..config import DomainSpec, PromptConfig
from ..middleware.error_handler import ArtifactMismatchError, ParameterError, TrainingDivergenceError
from ..utils.logger import format_losses, get_logger
from .datasets import ImageDataset
from .synthworld import TASK_PHRASE, weather_phrase
from .vlm import EncoderAdapter, Freezable, TokenSeq, Vocabulary, tokenize

logger = get_logger(__name__)

FORMAT_VERSION = 1
SEGMENT_ORDER = ("prefix", "instance", "domain", "global", "suffix")


def fixed_sentence_text(prompt: PromptConfig, domain: DomainSpec) -> str:
    """Template sentence used instead of tuned prompts, e.g. for the fixed-sentence ablation."""
    return f"{prompt.prefix_text} {TASK_PHRASE}, {weather_phrase(domain)}, {prompt.suffix_text}"


# ============================================================================
# Instance prompt learner
# ============================================================================

class ResidualBlock(nn.Module):
    def __init__(self, width: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(width, width, 3, stride=stride, padding=1, bias=False)
        self.norm1 = nn.GroupNorm(8 if width % 8 == 0 else 1, width)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1, bias=False)
        self.norm2 = nn.GroupNorm(8 if width % 8 == 0 else 1, width)
        self.shortcut = nn.AvgPool2d(stride) if stride > 1 else nn.Identity()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class InstancePromptLearner(nn.Module):
    """h_phi: residual conv backbone + L_C independent linear heads over the pooled feature."""

    def __init__(self, length: int, d_tok: int, width: int = 32, blocks: int = 4):
        super().__init__()
        self.length = length
        self.d_tok = d_tok
        self.stem = nn.Sequential(nn.Conv2d(3, width, 3, stride=2, padding=1), nn.ReLU())
        # Downsample on every other block
        self.blocks = nn.Sequential(*[ResidualBlock(width, stride=2 if i % 2 else 1) for i in range(blocks)])
        self.heads = nn.ModuleList(nn.Linear(width, d_tok) for _ in range(length))
        for head in self.heads:
            nn.init.normal_(head.weight, std=0.02)
            nn.init.zeros_(head.bias)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) -> (B, L_C, d_tok)"""
        pooled = self.blocks(self.stem(images - 0.5)).mean(dim=(2, 3))
        return torch.stack([head(pooled) for head in self.heads], dim=1)


# ============================================================================
# Prompt parameters and assembly
# ============================================================================

@dataclass
class AssembledPrompt:
    seq: TokenSeq
    domain_index: int
    segments: dict[str, slice]
    provenance: Optional[str] = None

    def segment(self, name: str) -> torch.Tensor:
        return self.seq.tokens[self.segments[name]]


def assemble_tokens(
    prefix: torch.Tensor,
    suffix: torch.Tensor,
    instance: Optional[torch.Tensor],
    domain: Optional[torch.Tensor],
    global_: Optional[torch.Tensor],
) -> torch.Tensor:
    """
    Concatenate segments in prompt order for a batch.

    Args:
        prefix, suffix: (L_F, d_tok) fixed vectors
        instance: (B, L_C, d_tok) or None
        domain: (L_S, d_tok) or (B, L_S, d_tok) or None
        global_: (L_G, d_tok) or None
    """
    batch = instance.shape[0] if instance is not None else (domain.shape[0] if domain is not None and domain.dim() == 3 else 1)
    parts = [prefix.expand(batch, -1, -1)]
    if instance is not None:
        parts.append(instance)
    if domain is not None:
        parts.append(domain if domain.dim() == 3 else domain.expand(batch, -1, -1))
    if global_ is not None:
        parts.append(global_.expand(batch, -1, -1))
    parts.append(suffix.expand(batch, -1, -1))
    dtype = next(p.dtype for p in parts if p.is_floating_point())
    return torch.cat([p.to(dtype) for p in parts], dim=1)


class PromptParameters(Freezable):
    """P_G, P_S, h_phi and the fixed segments of one tuned prompt set."""

    def __init__(
        self,
        config: PromptConfig,
        domains: Sequence[DomainSpec],
        encoder: EncoderAdapter,
        vocab: Vocabulary,
    ):
        super().__init__()
        if len(domains) < 1:
            raise ParameterError("prompt parameters need K >= 1 domains")
        self.config = config
        self.domain_names = [d.name for d in domains]
        self.vocab_hash = vocab.hash
        d_tok = encoder.d_tok

        self.global_prompt = nn.Parameter(torch.empty(config.L_G, d_tok))
        self.domain_prompts = nn.Parameter(torch.empty(len(domains), config.L_S, d_tok))
        nn.init.normal_(self.global_prompt, std=config.init_std)
        nn.init.normal_(self.domain_prompts, std=config.init_std)
        self.instance_learner = InstancePromptLearner(
            config.L_C, d_tok, width=config.backbone_width, blocks=config.backbone_blocks
        )
        self.register_buffer("token_prefix", tokenize(config.prefix_text, vocab, encoder).tokens.clone())
        self.register_buffer("token_suffix", tokenize(config.suffix_text, vocab, encoder).tokens.clone())
        sentences = [tokenize(fixed_sentence_text(config, d), vocab, encoder).tokens.clone() for d in domains]
        for k, tokens in enumerate(sentences):
            self.register_buffer(f"sentence_{k}", tokens)

    @property
    def num_domains(self) -> int:
        return len(self.domain_names)

    @property
    def fixed_sentence(self) -> bool:
        return self.config.fixed_sentence

    def domain_parameters(self) -> list[nn.Parameter]:
        params = []
        if self.config.use_global:
            params.append(self.global_prompt)
        if self.config.use_domain:
            params.append(self.domain_prompts)
        return params

    def instance_parameters(self) -> list[nn.Parameter]:
        return list(self.instance_learner.parameters()) if self.config.use_instance else []

    def _check_domain(self, k: int) -> None:
        if not 0 <= k < self.num_domains:
            raise ParameterError(f"domain index {k} out of range for K={self.num_domains}")

    def segment_layout(self, k: int = 0) -> dict[str, slice]:
        """Positions of each segment in an assembled prompt."""
        if self.fixed_sentence:
            return {"sentence": slice(0, getattr(self, f"sentence_{k}").shape[0])}
        cfg = self.config
        lengths = {
            "prefix": self.token_prefix.shape[0],
            "instance": cfg.L_C if cfg.use_instance else 0,
            "domain": cfg.L_S if cfg.use_domain else 0,
            "global": cfg.L_G if cfg.use_global else 0,
            "suffix": self.token_suffix.shape[0],
        }
        layout, start = {}, 0
        for name in SEGMENT_ORDER:
            if lengths[name] or name in ("prefix", "suffix"):
                layout[name] = slice(start, start + lengths[name])
            start += lengths[name]
        return layout

    def prompt_length(self, k: int = 0) -> int:
        return max(s.stop for s in self.segment_layout(k).values())

    def instance_tokens(self, images: torch.Tensor) -> torch.Tensor:
        return self.instance_learner(images)

    def assemble_batch(self, images: torch.Tensor, k: int, instance: Optional[torch.Tensor] = None) -> torch.Tensor:
        """(B, L, d_tok) prompts of domain k for a batch of images."""
        self._check_domain(k)
        batch = images.shape[0] if images is not None else instance.shape[0]
        if self.fixed_sentence:
            return getattr(self, f"sentence_{k}").unsqueeze(0).expand(batch, -1, -1)
        cfg = self.config
        if cfg.use_instance and instance is None:
            instance = self.instance_tokens(images)
        if not cfg.use_instance:
            instance = None
        domain = self.domain_prompts[k] if cfg.use_domain else None
        if instance is None and domain is not None:
            domain = domain.expand(batch, -1, -1)
        tokens = assemble_tokens(
            self.token_prefix, self.token_suffix,
            instance, domain,
            self.global_prompt if cfg.use_global else None,
        )
        return tokens.expand(batch, -1, -1) if tokens.shape[0] != batch else tokens

    def assemble(self, image: torch.Tensor, k: int, provenance: Optional[str] = None) -> AssembledPrompt:
        """Single-image prompt with its learnable flags and segment layout."""
        tokens = self.assemble_batch(image.unsqueeze(0) if image.dim() == 3 else image, k)[0]
        layout = self.segment_layout(k)
        learnable = torch.zeros(tokens.shape[0], dtype=torch.bool)
        for name in ("instance", "domain", "global"):
            if name in layout:
                learnable[layout[name]] = True
        return AssembledPrompt(TokenSeq(tokens, learnable), k, layout, provenance)


# ============================================================================
# Losses
# ============================================================================

def domain_loss_from_cosines(cosines: torch.Tensor, targets: torch.Tensor, tau: float) -> torch.Tensor:
    """
    Per-image -log softmax_c(cos(E_V(I), E_T(P_I^i)) / tau).

    Args:
        cosines: (B, K)
        targets: (B,) true domain indices
    """
    if cosines.shape[-1] == 0:
        raise ParameterError("domain loss needs K >= 1")
    log_probs = F.log_softmax(cosines / tau, dim=-1)
    return -log_probs.gather(-1, targets.view(-1, 1)).squeeze(-1)


def instance_loss_from_cosines(
    matched: torch.Tensor,
    tau: float,
    cross: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    Mean over anchors of the instance-conditional loss.

    matched: (B,) cos(E_V(I_i), E_T(P_{I_i}^c)); the denominator sums the B
    matched-pair terms. With `cross` (B, B), cross[k, i] =
    cos(E_V(I_k), E_T(P_{I_i}^c)), the anchor-vs-all-prompts form is used.
    """
    if matched.shape[0] < 2:
        raise ParameterError("instance loss needs B >= 2")
    if cross is not None:
        logits = cross / tau
        labels = torch.arange(logits.shape[0], device=logits.device)
        return F.cross_entropy(logits, labels)
    logits = matched / tau
    return (torch.logsumexp(logits, dim=0) - logits).mean()


def _prompt_embeddings(params: PromptParameters, encoder: EncoderAdapter, images: torch.Tensor, k: int, instance=None):
    return F.normalize(encoder.encode_tokens(params.assemble_batch(images, k, instance)), dim=-1)


def domain_cosines(
    params: PromptParameters,
    encoder: EncoderAdapter,
    images: torch.Tensor,
    image_emb: Optional[torch.Tensor] = None,
    instance: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """(B, K) cosines between each image and its K assembled prompts."""
    image_emb = F.normalize(encoder.encode_images(images) if image_emb is None else image_emb, dim=-1)
    if params.config.use_instance and instance is None and not params.fixed_sentence:
        instance = params.instance_tokens(images)
    cols = [(image_emb * _prompt_embeddings(params, encoder, images, k, instance)).sum(dim=-1)
            for k in range(params.num_domains)]
    return torch.stack(cols, dim=1)


def loss_domain(
    params: PromptParameters,
    encoder: EncoderAdapter,
    images: torch.Tensor,
    domain_index,
    image_emb: Optional[torch.Tensor] = None,
    instance: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Mean L_domain over a batch; `domain_index` is an int or a (B,) tensor."""
    if params.num_domains == 0:
        raise ParameterError("domain loss needs K >= 1")
    cos = domain_cosines(params, encoder, images, image_emb, instance)
    if isinstance(domain_index, int):
        targets = torch.full((cos.shape[0],), domain_index, dtype=torch.long)
    else:
        targets = torch.as_tensor(domain_index, dtype=torch.long)
    return domain_loss_from_cosines(cos, targets, params.config.tau_d).mean()


def loss_instance(
    params: PromptParameters,
    encoder: EncoderAdapter,
    images: torch.Tensor,
    domain_index: int,
    image_emb: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """L_ins for a batch of images that all come from `domain_index`."""
    if images.shape[0] < 2:
        raise ParameterError("instance loss needs B >= 2")
    image_emb = F.normalize(encoder.encode_images(images) if image_emb is None else image_emb, dim=-1)
    text_emb = _prompt_embeddings(params, encoder, images, domain_index)
    matched = (image_emb * text_emb).sum(dim=-1)
    cross = image_emb @ text_emb.t() if params.config.denominator == "cross" else None
    return instance_loss_from_cosines(matched, params.config.tau_ins, cross=cross)


# ============================================================================
# Tuning
# ============================================================================

def _set_trainable(params: Sequence[nn.Parameter], flag: bool) -> None:
    for p in params:
        p.requires_grad_(flag)


def tune(
    dataset: ImageDataset,
    encoder: EncoderAdapter,
    vocab: Vocabulary,
    config: PromptConfig,
    domains: Sequence[DomainSpec],
    seed: int,
) -> tuple[PromptParameters, dict[str, list[float]]]:
    """
    Alternating prompt tuning over D_semantic.

    Returns:
        (frozen PromptParameters, history) where history holds per-epoch
        `loss_domain` and `loss_instance`
    """
    if dataset.num_domains != len(domains):
        raise ParameterError("dataset domains do not match the prompt domains")
    missing = [k for k in range(len(domains)) if len(dataset.indices_of(k)) == 0]
    if missing:
        raise ParameterError(f"dataset has no images for domain indices {missing}")
    torch.manual_seed(seed)
    params = PromptParameters(config, domains, encoder, vocab)
    history: dict[str, list[float]] = {"loss_domain": [], "loss_instance": []}
    if config.fixed_sentence:
        logger.info("Fixed-sentence prompts: tuning skipped")
        return params.freeze(), history

    images = dataset.tensor()
    labels = torch.as_tensor(dataset.domain_indices, dtype=torch.long)
    with torch.no_grad():
        image_emb = encoder.encode_images(images)

    domain_params = params.domain_parameters()
    instance_params = params.instance_parameters()
    opt_domain = torch.optim.Adam(domain_params, lr=config.lr_domain) if domain_params else None
    opt_instance = torch.optim.Adam(instance_params, lr=config.lr_instance) if instance_params else None
    generator = torch.Generator().manual_seed(seed)
    step = 0

    def phase_a(idx: torch.Tensor) -> float:
        nonlocal step
        _set_trainable(instance_params, False)
        _set_trainable(domain_params, True)
        with torch.no_grad():
            instance = params.instance_tokens(images[idx]) if config.use_instance else None
        loss = loss_domain(params, encoder, images[idx], labels[idx], image_emb[idx], instance)
        if not torch.isfinite(loss):
            raise TrainingDivergenceError("tune-prompts", step, {"loss_domain": loss.item()})
        opt_domain.zero_grad()
        loss.backward()
        opt_domain.step()
        step += 1
        return loss.item()

    def phase_b(idx: torch.Tensor, k: int) -> float:
        nonlocal step
        _set_trainable(domain_params, False)
        _set_trainable(instance_params, True)
        loss = loss_instance(params, encoder, images[idx], k, image_emb[idx])
        if not torch.isfinite(loss):
            raise TrainingDivergenceError("tune-prompts", step, {"loss_instance": loss.item()})
        opt_instance.zero_grad()
        loss.backward()
        opt_instance.step()
        step += 1
        return loss.item()

    def domain_batches() -> list[torch.Tensor]:
        perm = torch.randperm(len(dataset), generator=generator)
        return [perm[s:s + config.batch_size] for s in range(0, len(perm), config.batch_size)]

    def instance_batches() -> list[tuple[torch.Tensor, int]]:
        out = []
        for k in range(len(domains)):
            idx = torch.as_tensor(dataset.indices_of(k), dtype=torch.long)
            idx = idx[torch.randperm(len(idx), generator=generator)]
            out.extend((idx[s:s + config.batch_size], k) for s in range(0, len(idx), config.batch_size)
                       if len(idx[s:s + config.batch_size]) >= 2)
        return out

    params.train()
    for epoch in range(config.epochs):
        a_losses, b_losses = [], []
        if config.alternation == "epoch":
            if opt_domain is not None:
                a_losses = [phase_a(idx) for idx in domain_batches()]
            if opt_instance is not None:
                b_losses = [phase_b(idx, k) for idx, k in instance_batches()]
        else:
            a_list = domain_batches() if opt_domain is not None else []
            b_list = instance_batches() if opt_instance is not None else []
            for i in range(max(len(a_list), len(b_list))):
                if i < len(a_list):
                    a_losses.append(phase_a(a_list[i]))
                if i < len(b_list):
                    b_losses.append(phase_b(*b_list[i]))
        history["loss_domain"].append(float(np.mean(a_losses)) if a_losses else float("nan"))
        history["loss_instance"].append(float(np.mean(b_losses)) if b_losses else float("nan"))
        logger.info(
            f"prompt epoch {epoch + 1}/{config.epochs} "
            + format_losses({"L_domain": history["loss_domain"][-1], "L_ins": history["loss_instance"][-1]})
        )
    _set_trainable(domain_params + instance_params, True)
    return params.freeze(), history


def chance_level(num_domains: int) -> float:
    return math.log(num_domains)


# ============================================================================
# Persistence
# ============================================================================

def save_prompts(params: PromptParameters, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format_version": FORMAT_VERSION,
        "prompt_config": params.config.model_dump(mode="json"),
        "domains": params.domain_names,
        "vocab_hash": params.vocab_hash,
        "state_dict": params.state_dict(),
    }, path)
    return path


def load_prompts(
    path: Path,
    encoder: EncoderAdapter,
    vocab: Vocabulary,
    domains: Sequence[DomainSpec],
) -> PromptParameters:
    """Load a tuned prompt set; the tokenizer it was tuned with must match."""
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format_version") != FORMAT_VERSION:
        raise ArtifactMismatchError("tune-prompts", str(FORMAT_VERSION), str(payload.get("format_version")))
    if payload["vocab_hash"] != vocab.hash:
        raise ArtifactMismatchError("pretrain-vlm", payload["vocab_hash"], vocab.hash)
    if payload["domains"] != [d.name for d in domains]:
        raise ParameterError(f"prompt domains {payload['domains']} do not match {[d.name for d in domains]}")
    params = PromptParameters(PromptConfig(**payload["prompt_config"]), domains, encoder, vocab)
    params.load_state_dict(payload["state_dict"])
    return params.freeze()
