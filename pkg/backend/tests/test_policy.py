import json
import math

import numpy as np
import pytest
import torch

from app.config import CANONICAL_DOMAINS, PolicyConfig, PPOConfig, WorldConfig
from app.engine.policy import (
    ActorCritic,
    FeatureExtractor,
    Featurizer,
    RunningMeanStd,
    compute_gae,
    evaluate,
    load_policy,
    normalize_advantages,
    ppo_loss,
    pretrain_features,
    random_policy_returns,
    save_policy,
    train_ppo,
    write_episode_records,
)
from app.engine.synthworld import ACC_BOUND, STEER_BOUND, DrivingEnv
from app.middleware.error_handler import ArtifactMismatchError, ParameterError

CLEAR_NOON = CANONICAL_DOMAINS[0]
SHORT_WORLD = WorldConfig(resolution=16, step_budget=5)


@pytest.fixture
def featurizer() -> Featurizer:
    torch.manual_seed(0)
    return Featurizer(FeatureExtractor(8, 16).drop_decoder().freeze())


@pytest.fixture
def agent() -> ActorCritic:
    torch.manual_seed(0)
    return ActorCritic(9, 8).freeze()


# ============================================================================
# Advantage estimation
# ============================================================================

def test_gae_without_terminals():
    rewards = torch.ones(3, 1)
    values = torch.zeros(3, 1)
    adv, returns = compute_gae(rewards, values, torch.zeros(3, 1), torch.zeros(1), gamma=0.9, lam=0.8)
    torch.testing.assert_close(adv[:, 0], torch.tensor([2.2384, 1.72, 1.0]))
    torch.testing.assert_close(returns, adv)


def test_gae_cuts_at_terminal():
    dones = torch.tensor([[0.0], [1.0], [0.0]])
    adv, _ = compute_gae(torch.ones(3, 1), torch.zeros(3, 1), dones, torch.zeros(1), gamma=0.9, lam=0.8)
    torch.testing.assert_close(adv[:, 0], torch.tensor([1.72, 1.0, 1.0]))


def test_gae_bootstraps_through_a_timeout():
    truncated = torch.tensor([[0.0], [1.0], [0.0]])
    final_values = torch.tensor([[0.0], [5.0], [0.0]])
    adv, returns = compute_gae(
        torch.ones(3, 1), torch.zeros(3, 1), torch.zeros(3, 1), torch.zeros(1), gamma=0.9, lam=0.8,
        truncated=truncated, final_values=final_values,
    )
    torch.testing.assert_close(adv[:, 0], torch.tensor([4.96, 5.5, 1.0]))
    torch.testing.assert_close(returns, adv)


def test_train_ppo_with_timeouts(featurizer):
    config = PPOConfig(total_steps=24, horizon=12, num_envs=2, minibatch_size=4, epochs=1)
    world = WorldConfig(resolution=16, step_budget=2, obstacles=[])
    agent, history = train_ppo(lambda: DrivingEnv(world, CLEAR_NOON), featurizer, config, hidden=8, seed=0)
    assert agent.frozen
    assert len(history["episode_returns"]) >= 4
    assert all(math.isfinite(v) for v in history["update_loss"])


def test_gae_bootstraps_from_last_value():
    adv, _ = compute_gae(torch.zeros(1, 1), torch.zeros(1, 1), torch.zeros(1, 1), torch.tensor([2.0]), gamma=0.5, lam=1.0)
    assert adv.item() == pytest.approx(1.0)


def test_normalize_advantages():
    out = normalize_advantages(torch.tensor([1.0, 2.0, 3.0, 4.0]))
    assert out.mean().item() == pytest.approx(0.0, abs=1e-6)
    assert out.std(unbiased=False).item() == pytest.approx(1.0, abs=1e-4)


# ============================================================================
# Actor-critic
# ============================================================================

def test_actions_stay_inside_open_bounds(agent):
    torch.manual_seed(1)
    features = torch.randn(10_000, 9) * 50.0
    action, _, logp, value = agent.act(features, generator=torch.Generator().manual_seed(0))
    assert action.shape == (10_000, 2)
    assert (action[:, 0].abs() < ACC_BOUND).all()
    assert (action[:, 1].abs() < STEER_BOUND).all()
    assert logp.shape == value.shape == (10_000,)


def test_deterministic_act_is_repeatable(agent):
    features = torch.randn(4, 9)
    a, _, _, _ = agent.act(features, deterministic=True)
    b, _, _, _ = agent.act(features, deterministic=True)
    torch.testing.assert_close(a, b)


def test_ppo_ratio_is_one_for_unchanged_policy():
    torch.manual_seed(0)
    agent = ActorCritic(9, 8)
    features = torch.randn(6, 9)
    _, pre, logp, _ = agent.act(features)
    _, terms = ppo_loss(agent, features, pre, logp, torch.ones(6), torch.zeros(6), PPOConfig())
    assert terms["ratio_max"].item() == pytest.approx(1.0, abs=1e-5)
    assert set(terms) == {"policy", "value", "entropy", "ratio_max"}


# ============================================================================
# Featurization
# ============================================================================

def test_featurizer_shape(featurizer):
    out = featurizer.batch(np.zeros((3, 16, 16, 3), dtype=np.float32), np.array([0.0, 1.0, 2.0]))
    assert featurizer.dim == 9
    assert out.shape == (3, 9)
    torch.testing.assert_close(out[:, -1], torch.tensor([0.0, 1.0, 2.0]))
    with pytest.raises(ParameterError):
        featurizer.batch(np.zeros((1, 8, 8, 3)), np.array([0.0]))


def test_running_mean_std():
    rms = RunningMeanStd()
    rms.update(torch.tensor([1.0, 2.0, 3.0, 4.0]))
    assert rms.mean.item() == pytest.approx(2.5, abs=1e-3)
    assert rms.var.item() == pytest.approx(1.25, abs=1e-3)


def test_pretrain_features(semantic):
    config = PolicyConfig(latent_dim=8, ae_epochs=2, ae_batch_size=4)
    extractor, history = pretrain_features(semantic, None, config, seed=0)
    assert extractor.frozen
    assert not extractor.has_decoder
    assert len(history["mse"]) == 2
    assert math.isfinite(history["initial_mse"])
    assert extractor.encode(semantic.tensor()).shape == (8, 8)
    with pytest.raises(ParameterError):
        extractor.reconstruct(semantic.tensor())


# ============================================================================
# Training and evaluation
# ============================================================================

def test_train_ppo_runs_expected_updates(featurizer):
    config = PPOConfig(total_steps=16, horizon=8, num_envs=2, minibatch_size=4, epochs=1)
    agent, history = train_ppo(lambda: DrivingEnv(SHORT_WORLD, CLEAR_NOON), featurizer, config, hidden=8, seed=0)
    assert agent.frozen
    assert len(history["update_loss"]) == 2
    assert len(history["adv_mean"]) == 2
    assert all(math.isfinite(v) for v in history["update_loss"])


def test_evaluate_is_deterministic(agent, featurizer):
    a, summary = evaluate(agent, featurizer, SHORT_WORLD, CLEAR_NOON, 2, seed=3)
    b, _ = evaluate(agent, featurizer, SHORT_WORLD, CLEAR_NOON, 2, seed=3)
    assert [r.actions for r in a] == [r.actions for r in b]
    assert [r.seed for r in a] == [3, 4]
    assert summary["episodes"] == 2
    assert all(r.length <= 5 for r in a)


def test_evaluate_needs_episodes(agent, featurizer):
    with pytest.raises(ParameterError):
        evaluate(agent, featurizer, SHORT_WORLD, CLEAR_NOON, 0, seed=0)


def test_episode_records_are_jsonl(agent, featurizer, tmp_path):
    records, _ = evaluate(agent, featurizer, SHORT_WORLD, CLEAR_NOON, 2, seed=0)
    path = write_episode_records(records, tmp_path / "episodes.jsonl")
    rows = [json.loads(line) for line in path.read_text(encoding="utf-8").splitlines()]
    assert len(rows) == 2
    assert rows[0]["domain"] == "ClearNoon"
    assert rows[0]["return"] == pytest.approx(sum(rows[0]["rewards"]))


def test_random_policy_returns_are_seeded():
    env_fn = lambda: DrivingEnv(SHORT_WORLD, CLEAR_NOON)  # noqa: E731
    assert random_policy_returns(env_fn, 2, seed=0) == random_policy_returns(env_fn, 2, seed=0)


def test_save_and_load_policy(agent, featurizer, tmp_path):
    config = PolicyConfig(latent_dim=8, ppo=PPOConfig(hidden=8))
    upstream = {"train-aligner": "a" * 64}
    path = save_policy(agent, featurizer, config, upstream, tmp_path / "policy.pt")
    loaded, loaded_featurizer = load_policy(path, None, upstream)
    assert loaded.frozen
    assert loaded_featurizer.aligner is None
    features = torch.randn(2, 9)
    torch.testing.assert_close(loaded.act(features, deterministic=True)[0], agent.act(features, deterministic=True)[0])
    with pytest.raises(ArtifactMismatchError):
        load_policy(path, None, {"train-aligner": "b" * 64})
