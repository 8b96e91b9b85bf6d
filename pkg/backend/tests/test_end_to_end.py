"""
Full-pipeline and long-training checks. Deselected by default; run with
`pytest -m slow`.
"""
import asyncio
import math

import numpy as np
import pandas as pd
import pytest

from app.cli import stages_for
from app.config import CANONICAL_DOMAINS, PPOConfig, PromptConfig, RunConfig, VLMConfig, WorldConfig
from app.engine.datasets import sample_caption_pairs, sample_semantic_dataset
from app.engine.policy import FeatureExtractor, Featurizer, evaluate, random_policy_returns, train_ppo
from app.engine.prompt import tune
from app.engine.synthworld import DrivingEnv, SynthWorld
from app.engine.vlm import Vocabulary, pretrain
from app.storage.paths import RunLayout
from app.worker.runner import PipelineRunner

pytestmark = pytest.mark.slow

CLEAR_NOON = CANONICAL_DOMAINS[0]


def _tiny_run(run_dir, plans=()) -> RunConfig:
    return RunConfig.model_validate({
        "name": "e2e",
        "world": {
            "resolution": 16, "step_budget": 40,
            "semantic_per_domain": 16, "policy_images": 32, "vlm_pairs_per_domain": 20,
        },
        "vlm": {
            "d_tok": 16, "d_emb": 16, "text_layers": 1, "text_heads": 2,
            "image_widths": [8, 8, 8, 8], "epochs": 2, "batch_size": 16, "min_pairs": 1,
        },
        "prompt": {"backbone_width": 8, "backbone_blocks": 2, "epochs": 2, "batch_size": 8},
        "aligner": {"patch_size": 8, "num_patches": 2, "epochs": 1, "batch_size": 8, "base_width": 4, "depth": 2},
        "policy": {
            "latent_dim": 8, "ae_epochs": 1, "ae_batch_size": 16,
            "ppo": {"total_steps": 64, "horizon": 32, "num_envs": 2, "minibatch_size": 16, "epochs": 1, "hidden": 16},
        },
        "eval": {"episodes": 2, "gap_samples": 8, "seeds": [0, 1], "ablation_plans": list(plans)},
        "io": {"run_dir": str(run_dir)},
    })


def _run_pipeline(config: RunConfig) -> dict[str, str]:
    runner = PipelineRunner(config, show_progress=False)
    return asyncio.run(runner.run(stages_for("pipeline", config)))


# ============================================================================
# Pipeline
# ============================================================================

def test_pipeline_end_to_end(tmp_path):
    config = _tiny_run(tmp_path / "run", plans=["seeds"])
    outcome = _run_pipeline(config)
    assert set(outcome.values()) == {"completed"}
    assert list(outcome)[-2:] == ["ablate-seeds", "report"]

    report_dir = RunLayout(config.resolved_run_dir()).report_dir
    transfer = pd.read_csv(report_dir / "tables" / "transfer.csv")
    assert list(transfer["agent"]) == ["pva", "control"]
    seeds = pd.read_csv(report_dir / "tables" / "transfer_seeds.csv")
    assert list(seeds["seed"]) == [0, 1]
    assert seeds["pva_minus_control"].notna().all()
    gap = pd.read_csv(report_dir / "tables" / "gap.csv")
    assert gap["encoder_sha256"].str.len().eq(64).all()
    assert "### Per seed" in (report_dir / "report.md").read_text(encoding="utf-8")


def test_pipeline_rerun_is_byte_identical(tmp_path):
    first, second = _tiny_run(tmp_path / "a"), _tiny_run(tmp_path / "b")
    _run_pipeline(first)
    _run_pipeline(second)

    def outputs(config):
        layout = RunLayout(config.resolved_run_dir())
        files = [layout.eval_dir / "summary.csv", layout.eval_dir / "gap.json", layout.report_dir / "report.md"]
        files += sorted((layout.report_dir / "tables").glob("*.csv"))
        return {path.relative_to(layout.root): path.read_bytes() for path in files}

    assert outputs(first) == outputs(second)


# ============================================================================
# Long training
# ============================================================================

def test_ppo_beats_the_random_policy():
    world = WorldConfig(resolution=16, step_budget=100)
    env_fn = lambda: DrivingEnv(world, CLEAR_NOON)  # noqa: E731
    featurizer = Featurizer(FeatureExtractor(8, 16).drop_decoder().freeze())
    config = PPOConfig(total_steps=20_000, horizon=512, num_envs=4, minibatch_size=128, epochs=4)
    agent, _ = train_ppo(env_fn, featurizer, config, hidden=32, seed=0)

    _, summary = evaluate(agent, featurizer, world, CLEAR_NOON, 5, seed=100)
    baseline = float(np.mean(random_policy_returns(env_fn, 20, seed=100)))
    assert summary["mean_return"] > baseline


@pytest.fixture(scope="module")
def pretrained():
    world = SynthWorld(WorldConfig(resolution=32))
    pairs = sample_caption_pairs(world, per_domain=200, seed=0)
    vocab = Vocabulary.for_prompts(PromptConfig())
    config = VLMConfig(
        d_tok=64, d_emb=64, image_widths=[16, 32, 64, 64],
        epochs=15, batch_size=32, min_pairs=1, holdout_fraction=0.15,
    )
    encoder, history = pretrain(pairs, config, vocab, seed=0)
    return world, encoder, vocab, history


def test_pretraining_reaches_retrieval_accuracy(pretrained):
    _, _, _, history = pretrained
    assert history["heldout_retrieval"][-1] >= 0.8


def test_prompt_tuning_separates_seen_domains(pretrained):
    world, encoder, vocab, _ = pretrained
    domains = [CANONICAL_DOMAINS[0], CANONICAL_DOMAINS[1]]
    semantic = sample_semantic_dataset(world, domains, per_domain=50, seed=0)
    config = PromptConfig(epochs=50, backbone_width=16, backbone_blocks=2)
    _, history = tune(semantic, encoder, vocab, config, domains, seed=0)
    assert len(history["loss_domain"]) == 50
    assert history["loss_domain"][-1] < math.log(len(domains))
