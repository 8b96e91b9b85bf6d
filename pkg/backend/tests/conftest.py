"""
Shared fixtures: tiny configs, a small frozen dual encoder and prompt set,
and an isolated runs root.
"""
import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent.parent))

from app.config import CANONICAL_DOMAINS, PromptConfig, RunConfig, VLMConfig, WorldConfig, settings  # noqa: E402
from app.engine.datasets import sample_semantic_dataset  # noqa: E402
from app.engine.prompt import PromptParameters  # noqa: E402
from app.engine.synthworld import SynthWorld  # noqa: E402
from app.engine.vlm import DualEncoder, Vocabulary  # noqa: E402

RESOLUTION = 16


@pytest.fixture(autouse=True)
def runs_root(tmp_path, monkeypatch):
    # Every test writes under its own runs root
    root = tmp_path / "runs"
    monkeypatch.setattr(settings, "runs_root", root)
    monkeypatch.setattr(settings, "ablation_workers", 1)
    return root


@pytest.fixture
def world_config() -> WorldConfig:
    return WorldConfig(resolution=RESOLUTION)


@pytest.fixture
def world(world_config) -> SynthWorld:
    return SynthWorld(world_config)


@pytest.fixture
def seen_domains():
    return [CANONICAL_DOMAINS[0], CANONICAL_DOMAINS[1]]


@pytest.fixture
def vlm_config() -> VLMConfig:
    return VLMConfig(
        d_tok=16, d_emb=16, text_layers=1, text_heads=2,
        image_widths=[8, 8, 8, 8], epochs=1, batch_size=8, min_pairs=1,
    )


@pytest.fixture
def prompt_config() -> PromptConfig:
    return PromptConfig(backbone_width=8, backbone_blocks=2, epochs=1, batch_size=4)


@pytest.fixture
def vocab(prompt_config) -> Vocabulary:
    return Vocabulary.for_prompts(prompt_config)


@pytest.fixture
def encoder(vlm_config, vocab) -> DualEncoder:
    torch.manual_seed(0)
    return DualEncoder(vlm_config, len(vocab)).freeze()


@pytest.fixture
def prompt_params(prompt_config, seen_domains, encoder, vocab) -> PromptParameters:
    torch.manual_seed(0)
    return PromptParameters(prompt_config, seen_domains, encoder, vocab)


@pytest.fixture
def semantic(world, seen_domains):
    return sample_semantic_dataset(world, seen_domains, per_domain=4, seed=0)


@pytest.fixture
def run_config(tmp_path) -> RunConfig:
    """Default-shaped run config at test resolution, rooted in tmp_path."""
    return RunConfig.model_validate({
        "name": "unit",
        "world": {"resolution": RESOLUTION},
        "aligner": {"patch_size": 8},
        "io": {"run_dir": str(tmp_path / "run")},
    })


@pytest.fixture
def finite_difference():
    """
    Central-difference check of autograd against a scalar loss closure,
    on a few seeded coordinates of one float64 parameter.
    """
    def check(loss_fn, param: torch.Tensor, coords: int = 6, eps: float = 1e-6) -> None:
        (grad,) = torch.autograd.grad(loss_fn(), param)
        flat, grad = param.data.view(-1), grad.reshape(-1)
        picks = torch.randperm(flat.numel(), generator=torch.Generator().manual_seed(0))[:coords]
        with torch.no_grad():
            for i in picks.tolist():
                original = flat[i].item()
                flat[i] = original + eps
                up = loss_fn().item()
                flat[i] = original - eps
                down = loss_fn().item()
                flat[i] = original
                assert grad[i].item() == pytest.approx((up - down) / (2 * eps), rel=1e-4, abs=1e-7)
        assert grad.abs().sum() > 0

    return check
