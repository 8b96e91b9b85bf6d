import pytest
import torch

from app.engine import pipeline
from app.engine.pipeline import StageContext, _check_artifacts_unchanged, _train_agent, artifact_hash
from app.engine.policy import ActorCritic
from app.middleware.error_handler import FrozenParameterError
from app.storage.paths import RunLayout


@pytest.fixture
def policy_ctx(run_config) -> StageContext:
    config = run_config.model_copy(update={
        "policy": run_config.policy.model_copy(update={"latent_dim": 8, "ae_epochs": 1, "ae_batch_size": 4}),
    })
    return StageContext(config=config, layout=RunLayout(config.resolved_run_dir()), stage="train-policy")


def _fake_ppo(mutate: bool):
    def train(env_fn, featurizer, ppo_config, hidden, seed, progress=None):
        if mutate:
            with torch.no_grad():
                next(featurizer.extractor.parameters()).add_(1.0)
        return ActorCritic(featurizer.dim, 8).freeze(), {"update_loss": []}

    return train


def test_train_agent_keeps_extractor_frozen(policy_ctx, semantic, monkeypatch):
    monkeypatch.setattr(pipeline, "train_ppo", _fake_ppo(mutate=False))
    agent, featurizer, history = _train_agent(policy_ctx, semantic, None, "pva", (0.0, 1.0))
    assert agent.frozen
    assert set(history) == {"autoencoder", "ppo"}


def test_train_agent_rejects_extractor_drift(policy_ctx, semantic, monkeypatch):
    monkeypatch.setattr(pipeline, "train_ppo", _fake_ppo(mutate=True))
    with pytest.raises(FrozenParameterError, match="extractor"):
        _train_agent(policy_ctx, semantic, None, "pva", (0.0, 1.0))


def test_upstream_artifacts_must_match_their_digests(policy_ctx, tmp_path):
    weights = tmp_path / "vlm.pt"
    weights.write_bytes(b"weights")
    policy_ctx.inputs["vlm"] = weights
    policy_ctx.digests["vlm"] = artifact_hash(weights)
    _check_artifacts_unchanged(policy_ctx, ("vlm", "prompts"))

    weights.write_bytes(b"rewritten")
    with pytest.raises(FrozenParameterError, match="vlm"):
        _check_artifacts_unchanged(policy_ctx, ("vlm", "prompts"))
