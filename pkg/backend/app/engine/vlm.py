"""
Surrogate vision-language dual encoder.

E_T maps a token sequence (fixed vocabulary vectors and/or learnable
prompt vectors) to a unit embedding; E_V maps an image to the same space.
The convolutional trunk of E_V doubles as the fixed perceptual network for
the aligner's feature loss.

Pretraining uses the symmetric batch contrastive objective. Captions repeat
inside a batch (the caption template has few bins), so targets are soft:
every pair sharing a caption counts as a positive.
"""
import copy
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Optional, Protocol, Sequence, runtime_checkable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..config import PromptConfig, VLMConfig, canonical_json
from ..middleware.error_handler import (
    ArtifactMismatchError,
    FrozenParameterError,
    ParameterError,
    TokenizationError,
    TrainingDivergenceError,
)
from ..utils.logger import format_losses, get_logger
from .datasets import ImageDataset, images_to_tensor
from .synthworld import CAPTION_PHRASES

logger = get_logger(__name__)

FORMAT_VERSION = 1
MAX_LOGIT_SCALE = 100.0
_SENTENCE_PUNCTUATION = ".,;:!?\"'()"


def split_words(text: str) -> list[str]:
    """Lowercased whitespace tokens with sentence punctuation stripped from their ends."""
    words = (token.strip(_SENTENCE_PUNCTUATION) for token in text.lower().split())
    return [w for w in words if w]


# ============================================================================
# Vocabulary and token sequences
# ============================================================================

class Vocabulary:
    """Closed word list; index 0 is padding."""

    PAD = "<pad>"

    def __init__(self, words: Iterable[str]):
        self.words = [self.PAD] + sorted(set(words) - {self.PAD})
        self._index = {w: i for i, w in enumerate(self.words)}

    @classmethod
    def build(cls, extra_texts: Sequence[str] = ()) -> "Vocabulary":
        words: set[str] = set()
        for text in list(CAPTION_PHRASES) + list(extra_texts):
            words.update(split_words(text))
        return cls(words)

    @classmethod
    def for_prompts(cls, prompt: PromptConfig) -> "Vocabulary":
        return cls.build([prompt.prefix_text, prompt.suffix_text])

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self._index

    def ids(self, text: str) -> list[int]:
        out = []
        for word in split_words(text):
            if word not in self._index:
                raise TokenizationError(word)
            out.append(self._index[word])
        return out

    @property
    def hash(self) -> str:
        return hashlib.sha256("\n".join(self.words).encode("utf-8")).hexdigest()


@dataclass
class TokenSeq:
    """
    Token vectors with a per-token learnable flag.

    tokens: (L, d_tok); learnable: (L,) bool, False = fixed vocabulary
    """
    tokens: torch.Tensor
    learnable: torch.Tensor

    def __post_init__(self):
        if self.tokens.dim() != 2 or self.learnable.shape != (self.tokens.shape[0],):
            raise ParameterError("TokenSeq needs tokens (L, d_tok) and a matching (L,) flag vector")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def d_tok(self) -> int:
        return self.tokens.shape[1]

    @property
    def source_mask(self) -> list[str]:
        return ["learnable" if f else "fixed_vocab" for f in self.learnable.tolist()]

    @classmethod
    def cat(cls, parts: Sequence["TokenSeq"]) -> "TokenSeq":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ParameterError("cannot concatenate an empty list of token sequences")
        return cls(torch.cat([p.tokens for p in parts]), torch.cat([p.learnable for p in parts]))

    @classmethod
    def learned(cls, tokens: torch.Tensor) -> "TokenSeq":
        return cls(tokens, torch.ones(tokens.shape[0], dtype=torch.bool))


# ============================================================================
# Frozen-module guard
# ============================================================================

class Freezable(nn.Module):
    """Module that rejects mutation once `freeze()` has been called."""

    _frozen: bool = False

    def freeze(self) -> "Freezable":
        for p in self.parameters():
            p.requires_grad_(False)
        super().train(False)
        self._frozen = True
        return self

    @property
    def frozen(self) -> bool:
        return self._frozen

    def train(self, mode: bool = True):
        if mode and self._frozen:
            raise FrozenParameterError(f"{type(self).__name__} is frozen and cannot enter training mode")
        return super().train(mode)

    def load_state_dict(self, state_dict, strict: bool = True, assign: bool = False):
        if self._frozen:
            raise FrozenParameterError(f"{type(self).__name__} is frozen; load weights before freezing")
        return super().load_state_dict(state_dict, strict=strict, assign=assign)


# ============================================================================
# Encoders
# ============================================================================

@runtime_checkable
class EncoderAdapter(Protocol):
    """
    What the pipeline needs from a vision-language model.

    A real pretrained encoder (e.g. a CLIP wrapper) can be dropped in by
    implementing these members; everything downstream types against this.
    """
    d_tok: int
    d_emb: int
    max_length: int

    def embed_ids(self, ids: torch.Tensor) -> torch.Tensor: ...

    def encode_tokens(self, tokens: torch.Tensor, valid: Optional[torch.Tensor] = None) -> torch.Tensor: ...

    def encode_images(self, images: torch.Tensor) -> torch.Tensor: ...

    def trunk_features(self, images: torch.Tensor, layers: Sequence[int]) -> list[torch.Tensor]: ...


def _conv_stage(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, 3, stride=2, padding=1),
        nn.ReLU(inplace=False),
        nn.Conv2d(c_out, c_out, 3, padding=1),
        nn.ReLU(inplace=False),
    )


class DualEncoder(Freezable):
    """Text transformer + convolutional image encoder into one embedding space."""

    def __init__(self, config: VLMConfig, vocab_size: int):
        super().__init__()
        self.config = config
        self.d_tok = config.d_tok
        self.d_emb = config.d_emb
        self.max_length = config.max_length
        self.vocab_size = vocab_size

        self.token_embedding = nn.Embedding(vocab_size, config.d_tok, padding_idx=0)
        self.positional = nn.Parameter(torch.randn(config.max_length, config.d_tok) * 0.02)
        layer = nn.TransformerEncoderLayer(
            d_model=config.d_tok,
            nhead=config.text_heads,
            dim_feedforward=2 * config.d_tok,
            dropout=0.0,
            batch_first=True,
            norm_first=True,
        )
        self.text_encoder = nn.TransformerEncoder(layer, config.text_layers, enable_nested_tensor=False)
        self.text_norm = nn.LayerNorm(config.d_tok)
        self.text_projection = nn.Linear(config.d_tok, config.d_emb)

        widths = list(config.image_widths)
        self.image_stages = nn.ModuleList(
            _conv_stage(c_in, c_out) for c_in, c_out in zip([3] + widths[:-1], widths)
        )
        self.image_projection = nn.Linear(widths[-1], config.d_emb)
        self.logit_scale = nn.Parameter(torch.tensor(math.log(config.logit_scale_init)))

    # -- text ---------------------------------------------------------------

    def embed_ids(self, ids: torch.Tensor) -> torch.Tensor:
        return self.token_embedding(ids)

    def encode_tokens(self, tokens: torch.Tensor, valid: Optional[torch.Tensor] = None) -> torch.Tensor:
        """
        Args:
            tokens: (B, L, d_tok) mixed fixed/learnable token vectors
            valid: (B, L) bool, False on padding

        Returns:
            (B, d_emb) unit-norm embeddings
        """
        if tokens.dim() != 3 or tokens.shape[-1] != self.d_tok:
            raise ParameterError(f"expected tokens (B, L, {self.d_tok}), got {tuple(tokens.shape)}")
        length = tokens.shape[1]
        if length == 0:
            raise ParameterError("cannot encode an empty token sequence")
        if length > self.max_length:
            raise ParameterError(f"sequence of {length} tokens exceeds max_length {self.max_length}")
        if valid is None:
            valid = torch.ones(tokens.shape[:2], dtype=torch.bool, device=tokens.device)
        x = tokens + self.positional[:length].to(tokens.dtype)
        x = self.text_encoder(x, src_key_padding_mask=~valid)
        x = self.text_norm(x)
        weights = valid.to(x.dtype).unsqueeze(-1)
        pooled = (x * weights).sum(dim=1) / weights.sum(dim=1).clamp_min(1.0)
        return F.normalize(self.text_projection(pooled), dim=-1)

    # -- image --------------------------------------------------------------

    def _trunk(self, images: torch.Tensor) -> list[torch.Tensor]:
        x = images - 0.5
        outs = []
        for stage in self.image_stages:
            x = stage(x)
            outs.append(x)
        return outs

    def encode_images(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) in [0, 1] -> (B, d_emb) unit-norm embeddings."""
        if images.dim() != 4 or images.shape[1] != 3:
            raise ParameterError(f"expected images (B, 3, H, W), got {tuple(images.shape)}")
        feats = self._trunk(images)[-1]
        return F.normalize(self.image_projection(feats.mean(dim=(2, 3))), dim=-1)

    def trunk_features(self, images: torch.Tensor, layers: Sequence[int]) -> list[torch.Tensor]:
        feats = self._trunk(images)
        return [feats[i] for i in layers]

    # -- contrastive --------------------------------------------------------

    def scale(self) -> torch.Tensor:
        return torch.clamp(self.logit_scale.exp(), max=MAX_LOGIT_SCALE)


def contrastive_loss(
    image_emb: torch.Tensor,
    text_emb: torch.Tensor,
    logit_scale: torch.Tensor,
    caption_ids: Optional[Sequence[Any]] = None,
) -> torch.Tensor:
    """
    Symmetric cross-entropy over scaled cosine logits.

    `caption_ids` marks rows sharing a caption; those pairs are all positives
    (soft targets). Without it the diagonal is the only positive.
    """
    logits = logit_scale * image_emb @ text_emb.t()
    n = logits.shape[0]
    if caption_ids is None:
        targets = torch.eye(n, dtype=logits.dtype, device=logits.device)
    else:
        keys = list(caption_ids)
        same = torch.tensor([[a == b for b in keys] for a in keys], dtype=logits.dtype, device=logits.device)
        targets = same / same.sum(dim=1, keepdim=True)
    loss_img = -(targets * F.log_softmax(logits, dim=1)).sum(dim=1).mean()
    loss_txt = -(targets.t() * F.log_softmax(logits.t(), dim=1)).sum(dim=1).mean()
    return 0.5 * (loss_img + loss_txt)


# ============================================================================
# Operations on a (possibly frozen) encoder
# ============================================================================

def tokenize(text: str, vocab: Vocabulary, encoder: EncoderAdapter) -> TokenSeq:
    """Fixed-vocabulary token vectors for a text."""
    ids = vocab.ids(text)
    if not ids:
        return TokenSeq(torch.zeros(0, encoder.d_tok), torch.zeros(0, dtype=torch.bool))
    with torch.no_grad():
        tokens = encoder.embed_ids(torch.tensor(ids, dtype=torch.long))
    return TokenSeq(tokens.detach(), torch.zeros(len(ids), dtype=torch.bool))


def encode_text(seq: TokenSeq, encoder: EncoderAdapter) -> torch.Tensor:
    """(d_emb,) unit embedding of one token sequence; gradients flow to learnable tokens."""
    return encoder.encode_tokens(seq.tokens.unsqueeze(0))[0]


def encode_image(image, encoder: EncoderAdapter) -> torch.Tensor:
    """(d_emb,) unit embedding of one image given as (H, W, 3) array or (3, H, W) tensor."""
    if isinstance(image, np.ndarray):
        batch = images_to_tensor(image)
    else:
        batch = image.unsqueeze(0) if image.dim() == 3 else image
    return encoder.encode_images(batch)[0]


def pad_token_ids(texts: Sequence[str], vocab: Vocabulary, max_length: int) -> tuple[torch.Tensor, torch.Tensor]:
    """(N, L) padded ids and validity mask for a list of texts."""
    ids = [vocab.ids(t) for t in texts]
    length = max((len(i) for i in ids), default=1)
    if length > max_length:
        raise ParameterError(f"caption of {length} tokens exceeds max_length {max_length}")
    out = torch.zeros(len(ids), length, dtype=torch.long)
    for row, seq in enumerate(ids):
        out[row, :len(seq)] = torch.tensor(seq, dtype=torch.long)
    return out, out != 0


def encode_captions(texts: Sequence[str], vocab: Vocabulary, encoder: EncoderAdapter) -> torch.Tensor:
    ids, valid = pad_token_ids(texts, vocab, encoder.max_length)
    return encoder.encode_tokens(encoder.embed_ids(ids), valid)


@torch.no_grad()
def retrieval_accuracy(
    encoder: EncoderAdapter,
    vocab: Vocabulary,
    dataset: ImageDataset,
    batch_size: int = 16,
) -> float:
    """
    Top-1 image-to-caption retrieval inside batches of `batch_size`.

    Choosing any caption identical to the image's own counts as correct.
    """
    if not dataset.captions:
        raise ParameterError("retrieval needs a captioned dataset")
    correct, total = 0, 0
    for start in range(0, len(dataset) - batch_size + 1, batch_size):
        idx = np.arange(start, start + batch_size)
        captions = [dataset.captions[i] for i in idx]
        img = encoder.encode_images(dataset.tensor(idx))
        txt = encode_captions(captions, vocab, encoder)
        best = (img @ txt.t()).argmax(dim=1).tolist()
        correct += sum(captions[j] == captions[i] for i, j in enumerate(best))
        total += batch_size
    if total == 0:
        raise ParameterError(f"dataset has fewer than {batch_size} pairs")
    return correct / total


def pretrain(
    pairs: ImageDataset,
    config: VLMConfig,
    vocab: Vocabulary,
    seed: int,
) -> tuple[DualEncoder, dict[str, list[float]]]:
    """
    Train the dual encoder on caption-image pairs and return it frozen.

    Returns:
        (encoder, history) with per-epoch `loss`, `logit_scale` and
        `heldout_retrieval`
    """
    if len(pairs) < config.min_pairs:
        raise ParameterError(f"pretraining needs >= {config.min_pairs} pairs, got {len(pairs)}")
    torch.manual_seed(seed)
    model = DualEncoder(config, len(vocab))
    train, held = pairs.split(config.holdout_fraction, seed)
    ids, valid = pad_token_ids(train.captions, vocab, config.max_length)
    images = train.tensor()
    optimizer = torch.optim.Adam(model.parameters(), lr=config.lr)
    generator = torch.Generator().manual_seed(seed)
    history: dict[str, list[float]] = {"loss": [], "logit_scale": [], "heldout_retrieval": []}

    step = 0
    for epoch in range(config.epochs):
        model.train()
        perm = torch.randperm(len(train), generator=generator)
        epoch_loss, batches = 0.0, 0
        for start in range(0, len(perm) - 1, config.batch_size):
            idx = perm[start:start + config.batch_size]
            if len(idx) < 2:
                continue
            img = model.encode_images(images[idx])
            txt = model.encode_tokens(model.embed_ids(ids[idx]), valid[idx])
            loss = contrastive_loss(img, txt, model.scale(), [train.captions[i] for i in idx.tolist()])
            if not torch.isfinite(loss):
                raise TrainingDivergenceError("pretrain-vlm", step, {"contrastive": loss.item()})
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_loss += loss.item()
            batches += 1
            step += 1
        model.eval()
        acc = retrieval_accuracy(model, vocab, held) if len(held) >= 16 else float("nan")
        history["loss"].append(epoch_loss / max(batches, 1))
        history["logit_scale"].append(float(model.scale().item()))
        history["heldout_retrieval"].append(acc)
        logger.info(
            f"vlm epoch {epoch + 1}/{config.epochs} "
            + format_losses({"loss": history["loss"][-1], "retrieval": acc})
        )
    model.freeze()
    return model, history


# ============================================================================
# Perceptual network
# ============================================================================

class PerceptualNet(Freezable):
    """
    Fixed feature extractor: a frozen copy of the image trunk.

    Activations are unit-normalized along channels at every location, so
    features compare structure more than global brightness.
    """

    def __init__(self, stages: nn.ModuleList, layers: Sequence[int]):
        super().__init__()
        layers = sorted(set(int(i) for i in layers))
        if not layers or layers[0] < 0 or layers[-1] >= len(stages):
            raise ParameterError(f"perceptual layers {layers} out of range for {len(stages)} stages")
        self.layers = layers
        self.stages = copy.deepcopy(stages[:layers[-1] + 1])
        self.freeze()

    @classmethod
    def from_encoder(cls, encoder: DualEncoder, layers: Sequence[int]) -> "PerceptualNet":
        return cls(encoder.image_stages, layers)

    def forward(self, images: torch.Tensor) -> list[torch.Tensor]:
        x = images - 0.5
        outs = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i in self.layers:
                outs.append(F.normalize(x, dim=1, eps=1e-6))
        return outs


def perceptual_features(image, net: PerceptualNet) -> list[torch.Tensor]:
    """Activations at the selected layers for one image or a batch."""
    if isinstance(image, np.ndarray):
        image = images_to_tensor(image)
    elif image.dim() == 3:
        image = image.unsqueeze(0)
    return net(image)


# ============================================================================
# Persistence
# ============================================================================

def architecture_hash(config: VLMConfig, vocab: Vocabulary) -> str:
    arch = config.model_dump(mode="json", include={
        "d_tok", "d_emb", "max_length", "text_layers", "text_heads", "image_widths",
    })
    return hashlib.sha256(canonical_json({"arch": arch, "vocab": vocab.hash}).encode("utf-8")).hexdigest()


def save_dual_encoder(encoder: DualEncoder, vocab: Vocabulary, path: Path, seed: int) -> tuple[Path, Path]:
    """Weights plus a JSON sidecar; returns (weights_path, sidecar_path)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(encoder.state_dict(), path)
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps({
        "format_version": FORMAT_VERSION,
        "architecture_hash": architecture_hash(encoder.config, vocab),
        "config": encoder.config.model_dump(mode="json"),
        "vocabulary": vocab.words[1:],
        "perceptual_layers": list(encoder.config.perceptual_layers),
        "seed": seed,
    }, indent=2, sort_keys=True), encoding="utf-8")
    return path, sidecar


def load_dual_encoder(path: Path) -> tuple[DualEncoder, Vocabulary]:
    """Load weights written by `save_dual_encoder` and return them frozen."""
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    if meta.get("format_version") != FORMAT_VERSION:
        raise ArtifactMismatchError("pretrain-vlm", str(FORMAT_VERSION), str(meta.get("format_version")))
    config = VLMConfig(**meta["config"])
    vocab = Vocabulary(meta["vocabulary"])
    actual = architecture_hash(config, vocab)
    if actual != meta["architecture_hash"]:
        raise ArtifactMismatchError("pretrain-vlm", meta["architecture_hash"], actual)
    model = DualEncoder(config, len(vocab))
    model.load_state_dict(torch.load(path, map_location="cpu", weights_only=True))
    return model.freeze(), vocab
