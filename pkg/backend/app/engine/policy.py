"""
Stage 3: robust policy.

- FeatureExtractor: convolutional autoencoder pretrained on aligned D_policy
  images; only its encoder is kept.
- Featurizer: image -> aligner -> encoder, with velocity appended
  (optionally running-normalized). Without an aligner it is the no-aligner
  control path.
- ActorCritic: squashed Gaussian actor over (acc, steer) and a value head,
  trained with clipped-surrogate PPO and GAE over a batch of environments.
"""
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..config import DomainSpec, PolicyConfig, PPOConfig, WorldConfig
from ..middleware.error_handler import ArtifactMismatchError, ParameterError, TrainingDivergenceError
from ..utils.logger import format_losses, get_logger
from .aligner import VisualAligner, align_dataset
from .datasets import ImageDataset, images_to_tensor
from .synthworld import ACC_BOUND, STEER_BOUND, DrivingEnv, SynthWorld
from .vlm import Freezable

logger = get_logger(__name__)

FORMAT_VERSION = 1
# Squashed actions are scaled slightly inside the open bounds
ACTION_SCALE = torch.tensor([ACC_BOUND, STEER_BOUND]) * (1.0 - 1e-4)


# ============================================================================
# Feature extractor
# ============================================================================

class FeatureExtractor(Freezable):
    """Convolutional autoencoder; `encoder` maps an image to a z-dim latent."""

    def __init__(self, latent_dim: int = 64, resolution: int = 64, widths: Sequence[int] = (32, 64, 64, 128)):
        super().__init__()
        self.latent_dim = latent_dim
        self.resolution = resolution
        layers, c_in = [], 3
        for w in widths:
            layers += [nn.Conv2d(c_in, w, 4, stride=2, padding=1), nn.ReLU()]
            c_in = w
        self._side = resolution // 2 ** len(widths)
        self._widths = tuple(widths)
        flat = widths[-1] * self._side * self._side
        self.encoder = nn.Sequential(*layers, nn.Flatten(), nn.Linear(flat, latent_dim))

        dec, rev = [], list(widths[::-1]) + [3]
        for i in range(len(widths)):
            dec.append(nn.ConvTranspose2d(rev[i], rev[i + 1], 4, stride=2, padding=1))
            if i < len(widths) - 1:
                dec.append(nn.ReLU())
        self.decoder_input = nn.Linear(latent_dim, flat)
        self.decoder = nn.Sequential(*dec, nn.Sigmoid())

    @property
    def has_decoder(self) -> bool:
        return self.decoder is not None

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return self.encoder(images - 0.5)

    def reconstruct(self, images: torch.Tensor) -> torch.Tensor:
        if not self.has_decoder:
            raise ParameterError("decoder was discarded after pretraining")
        h = self.decoder_input(self.encode(images))
        h = F.relu(h).view(-1, self._widths[-1], self._side, self._side)
        return self.decoder(h)

    def drop_decoder(self) -> "FeatureExtractor":
        self.decoder = None
        self.decoder_input = None
        return self


def pretrain_features(
    dataset: ImageDataset,
    aligner: Optional[VisualAligner],
    config: PolicyConfig,
    seed: int,
) -> tuple[FeatureExtractor, dict[str, Any]]:
    """
    Train the autoencoder to reconstruct g_theta(I) (or I when `aligner` is None).

    Returns:
        (frozen extractor without decoder, history with `mse` per epoch and `initial_mse`)
    """
    torch.manual_seed(seed)
    images = dataset.tensor()
    targets = align_dataset(aligner, images) if aligner is not None else images
    resolution = images.shape[-1]
    extractor = FeatureExtractor(config.latent_dim, resolution)
    optimizer = torch.optim.Adam(extractor.parameters(), lr=config.ae_lr)
    generator = torch.Generator().manual_seed(seed)

    def full_mse() -> float:
        with torch.no_grad():
            total = sum(
                F.mse_loss(extractor.reconstruct(targets[s:s + 256]), targets[s:s + 256], reduction="sum").item()
                for s in range(0, len(targets), 256)
            )
        return total / targets.numel()

    history: dict[str, Any] = {"initial_mse": full_mse(), "mse": []}
    step = 0
    for epoch in range(config.ae_epochs):
        perm = torch.randperm(len(targets), generator=generator)
        for s in range(0, len(perm), config.ae_batch_size):
            batch = targets[perm[s:s + config.ae_batch_size]]
            loss = F.mse_loss(extractor.reconstruct(batch), batch)
            if not torch.isfinite(loss):
                raise TrainingDivergenceError("train-policy", step, {"reconstruction": loss.item()})
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            step += 1
        history["mse"].append(full_mse())
        logger.info(f"autoencoder epoch {epoch + 1}/{config.ae_epochs} " + format_losses({"mse": history["mse"][-1]}))
    extractor.drop_decoder()
    return extractor.freeze(), history


# ============================================================================
# Featurization
# ============================================================================

class RunningMeanStd(nn.Module):
    """Running mean/variance of a scalar stream (parallel Welford update)."""

    def __init__(self, epsilon: float = 1e-4):
        super().__init__()
        self.register_buffer("mean", torch.zeros(()))
        self.register_buffer("var", torch.ones(()))
        self.register_buffer("count", torch.tensor(epsilon))

    def update(self, x: torch.Tensor) -> None:
        batch_mean = x.mean()
        batch_var = x.var(unbiased=False)
        batch_count = x.numel()
        delta = batch_mean - self.mean
        total = self.count + batch_count
        self.mean += delta * batch_count / total
        m2 = self.var * self.count + batch_var * batch_count + delta ** 2 * self.count * batch_count / total
        self.var = m2 / total
        self.count = total

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        return (x - self.mean) / torch.sqrt(self.var + 1e-8)


class Featurizer:
    """Policy input: concat(encoder(g_theta(image)), velocity), dimension z + 1."""

    def __init__(
        self,
        extractor: FeatureExtractor,
        aligner: Optional[VisualAligner] = None,
        normalize_velocity: bool = False,
    ):
        self.extractor = extractor
        self.aligner = aligner
        self.normalizer = RunningMeanStd() if normalize_velocity else None
        self.update_normalizer = False

    @property
    def dim(self) -> int:
        return self.extractor.latent_dim + 1

    @property
    def provenance(self) -> dict[str, Any]:
        return {"aligner": self.aligner is not None, "normalize_velocity": self.normalizer is not None}

    @torch.no_grad()
    def batch(self, images: np.ndarray, velocities: np.ndarray) -> torch.Tensor:
        images = np.asarray(images, dtype=np.float32)
        res = self.extractor.resolution
        if images.ndim != 4 or images.shape[1:] != (res, res, 3):
            raise ParameterError(f"expected images (N, {res}, {res}, 3), got {images.shape}")
        x = images_to_tensor(images)
        if self.aligner is not None:
            x = self.aligner(x)
        z = self.extractor.encode(x)
        v = torch.as_tensor(np.asarray(velocities, dtype=np.float32)).view(-1)
        if self.normalizer is not None:
            if self.update_normalizer:
                self.normalizer.update(v)
            v = self.normalizer.normalize(v)
        return torch.cat([z, v.unsqueeze(-1)], dim=-1)


def featurize(obs, featurizer: Featurizer) -> np.ndarray:
    """Single observation (Observation or env dict) -> (z + 1,) vector."""
    if isinstance(obs, dict):
        image, velocity = obs["image"], float(np.asarray(obs["velocity"]).reshape(-1)[0])
    else:
        image, velocity = obs.image, obs.velocity
    return featurizer.batch(np.asarray(image)[None], np.array([velocity]))[0].numpy()


# ============================================================================
# Actor-critic
# ============================================================================

def _mlp(d_in: int, hidden: int, d_out: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, hidden), nn.Tanh(), nn.Linear(hidden, hidden), nn.Tanh(), nn.Linear(hidden, d_out))


class ActorCritic(Freezable):
    """Squashed Gaussian policy over (acc, steer) plus a state-value head."""

    def __init__(self, input_dim: int, hidden: int = 128):
        super().__init__()
        self.input_dim = input_dim
        self.actor = _mlp(input_dim, hidden, 2)
        self.critic = _mlp(input_dim, hidden, 1)
        self.log_std = nn.Parameter(torch.full((2,), -0.5))
        self.register_buffer("action_scale", ACTION_SCALE.clone())
        nn.init.normal_(self.actor[-1].weight, std=0.01)
        nn.init.zeros_(self.actor[-1].bias)

    def distribution(self, features: torch.Tensor) -> torch.distributions.Normal:
        mean = self.actor(features)
        std = torch.exp(self.log_std.clamp(-5.0, 2.0)).expand_as(mean)
        return torch.distributions.Normal(mean, std)

    def value(self, features: torch.Tensor) -> torch.Tensor:
        return self.critic(features).squeeze(-1)

    def squash(self, pre: torch.Tensor) -> torch.Tensor:
        return torch.tanh(pre) * self.action_scale.to(pre.dtype)

    @torch.no_grad()
    def act(
        self,
        features: torch.Tensor,
        deterministic: bool = False,
        generator: Optional[torch.Generator] = None,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (action, pre-squash sample, log_prob of the sample, value)."""
        dist = self.distribution(features)
        if deterministic:
            pre = dist.mean
        else:
            noise = torch.randn(dist.mean.shape, generator=generator, dtype=dist.mean.dtype)
            pre = dist.mean + dist.stddev * noise
        return self.squash(pre), pre, dist.log_prob(pre).sum(-1), self.value(features)


# ============================================================================
# PPO
# ============================================================================

def compute_gae(
    rewards: torch.Tensor,
    values: torch.Tensor,
    terminated: torch.Tensor,
    last_values: torch.Tensor,
    gamma: float,
    lam: float,
    truncated: Optional[torch.Tensor] = None,
    final_values: Optional[torch.Tensor] = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """
    GAE over a (T, E) rollout.

    A terminated step has no successor value. A truncated step (timeout)
    ends the advantage chain but still bootstraps from `final_values[t]`,
    the value of the last observation before the reset.

    Returns:
        (advantages, returns), both (T, E)
    """
    steps = rewards.shape[0]
    if truncated is None:
        truncated = torch.zeros_like(terminated)
    if final_values is None:
        final_values = torch.zeros_like(rewards)
    advantages = torch.zeros_like(rewards)
    gae = torch.zeros_like(last_values)
    for t in reversed(range(steps)):
        next_values = last_values if t == steps - 1 else values[t + 1]
        next_values = torch.where(truncated[t] > 0, final_values[t], next_values)
        delta = rewards[t] + gamma * next_values * (1.0 - terminated[t]) - values[t]
        episode_goes_on = (1.0 - terminated[t]) * (1.0 - truncated[t])
        gae = delta + gamma * lam * episode_goes_on * gae
        advantages[t] = gae
    return advantages, advantages + values


def normalize_advantages(advantages: torch.Tensor) -> torch.Tensor:
    return (advantages - advantages.mean()) / (advantages.std(unbiased=False) + 1e-8)


def ppo_loss(
    agent: ActorCritic,
    features: torch.Tensor,
    pre_actions: torch.Tensor,
    old_log_probs: torch.Tensor,
    advantages: torch.Tensor,
    returns: torch.Tensor,
    config: PPOConfig,
) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Clipped surrogate + value + entropy objective on one minibatch."""
    dist = agent.distribution(features)
    log_probs = dist.log_prob(pre_actions).sum(-1)
    ratio = torch.exp(log_probs - old_log_probs)
    surr1 = ratio * advantages
    surr2 = torch.clamp(ratio, 1.0 - config.clip_ratio, 1.0 + config.clip_ratio) * advantages
    policy_loss = -torch.min(surr1, surr2).mean()
    value_loss = F.mse_loss(agent.value(features), returns)
    entropy = dist.entropy().sum(-1).mean()
    total = policy_loss + config.value_coef * value_loss - config.entropy_coef * entropy
    return total, {"policy": policy_loss, "value": value_loss, "entropy": entropy, "ratio_max": ratio.max()}


def _stack_obs(observations: list[dict]) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([o["image"] for o in observations])
    velocities = np.array([float(o["velocity"][0]) for o in observations], dtype=np.float32)
    return images, velocities


def train_ppo(
    env_fn: Callable[[], DrivingEnv],
    featurizer: Featurizer,
    config: PPOConfig,
    hidden: int,
    seed: int,
    stage: str = "train-policy",
    progress: Optional[Callable[[int, int], None]] = None,
) -> tuple[ActorCritic, dict[str, list[float]]]:
    """
    PPO over `config.num_envs` environments built by `env_fn`.

    The featurizer (aligner + extractor) stays frozen; only the actor-critic
    is optimized.

    Returns:
        (frozen agent, history) with `episode_returns`, `update_loss`,
        `adv_mean`, `adv_std`
    """
    torch.manual_seed(seed)
    agent = ActorCritic(featurizer.dim, hidden)
    optimizer = torch.optim.Adam(agent.parameters(), lr=config.lr)
    generator = torch.Generator().manual_seed(seed)
    envs = [env_fn() for _ in range(config.num_envs)]
    observations = [env.reset(seed=seed * 1000 + i)[0] for i, env in enumerate(envs)]
    running_returns = np.zeros(len(envs))

    steps_per_env = max(1, config.horizon // len(envs))
    updates = max(1, math.ceil(config.total_steps / (steps_per_env * len(envs))))
    history: dict[str, list[float]] = {"episode_returns": [], "update_loss": [], "adv_mean": [], "adv_std": []}
    featurizer.update_normalizer = featurizer.normalizer is not None

    @torch.no_grad()
    def bootstrap_values(obs: list[dict]) -> torch.Tensor:
        # Bootstrap features must not feed the running velocity statistics
        updating = featurizer.update_normalizer
        featurizer.update_normalizer = False
        try:
            return agent.value(featurizer.batch(*_stack_obs(obs)))
        finally:
            featurizer.update_normalizer = updating

    for update in range(updates):
        feats, pres, logps, vals, rews, terms, truncs, finals = [], [], [], [], [], [], [], []
        for _ in range(steps_per_env):
            f = featurizer.batch(*_stack_obs(observations))
            action, pre, logp, value = agent.act(f, generator=generator)
            step_rewards, step_terms, step_truncs = [], [], []
            timed_out: dict[int, dict] = {}
            for i, env in enumerate(envs):
                obs, reward, terminated, truncated, _ = env.step(action[i].numpy())
                running_returns[i] += reward
                if truncated and not terminated:
                    timed_out[i] = obs
                if terminated or truncated:
                    history["episode_returns"].append(float(running_returns[i]))
                    running_returns[i] = 0.0
                    obs, _ = env.reset()
                observations[i] = obs
                step_rewards.append(reward)
                step_terms.append(float(terminated))
                step_truncs.append(float(truncated and not terminated))
            final = torch.zeros(len(envs))
            if timed_out:
                final[list(timed_out)] = bootstrap_values(list(timed_out.values()))
            feats.append(f)
            pres.append(pre)
            logps.append(logp)
            vals.append(value)
            rews.append(torch.tensor(step_rewards, dtype=torch.float32))
            terms.append(torch.tensor(step_terms, dtype=torch.float32))
            truncs.append(torch.tensor(step_truncs, dtype=torch.float32))
            finals.append(final)

        advantages, returns = compute_gae(
            torch.stack(rews), torch.stack(vals), torch.stack(terms), bootstrap_values(observations),
            config.gamma, config.gae_lambda, truncated=torch.stack(truncs), final_values=torch.stack(finals),
        )
        b_feats = torch.cat(feats)
        b_pres = torch.cat(pres)
        b_logps = torch.cat(logps)
        b_returns = returns.reshape(-1)
        b_adv = normalize_advantages(advantages.reshape(-1))
        history["adv_mean"].append(float(b_adv.mean()))
        history["adv_std"].append(float(b_adv.std(unbiased=False)))

        losses = []
        for _ in range(config.epochs):
            perm = torch.randperm(len(b_feats), generator=generator)
            for s in range(0, len(perm), config.minibatch_size):
                idx = perm[s:s + config.minibatch_size]
                total, terms = ppo_loss(agent, b_feats[idx], b_pres[idx], b_logps[idx], b_adv[idx], b_returns[idx], config)
                if not torch.isfinite(total):
                    raise TrainingDivergenceError(stage, update, {k: v.item() for k, v in terms.items()})
                optimizer.zero_grad()
                total.backward()
                nn.utils.clip_grad_norm_(agent.parameters(), config.max_grad_norm)
                optimizer.step()
                losses.append(total.item())
        history["update_loss"].append(float(np.mean(losses)))
        recent = history["episode_returns"][-100:]
        if progress is not None:
            progress(update + 1, updates)
        logger.debug(
            f"ppo update {update + 1}/{updates} "
            + format_losses({"loss": history["update_loss"][-1], "return100": float(np.mean(recent)) if recent else 0.0})
        )
    featurizer.update_normalizer = False
    return agent.freeze(), history


def random_policy_returns(env_fn: Callable[[], DrivingEnv], episodes: int, seed: int) -> list[float]:
    """Returns of uniformly random actions; the baseline PPO must beat."""
    env = env_fn()
    env.action_space.seed(seed)
    returns = []
    for ep in range(episodes):
        env.reset(seed=seed + ep)
        total, done = 0.0, False
        while not done:
            _, reward, terminated, truncated, _ = env.step(env.action_space.sample())
            total += reward
            done = terminated or truncated
        returns.append(total)
    return returns


# ============================================================================
# Evaluation
# ============================================================================

@dataclass
class EpisodeRecord:
    domain: str
    actions: list[tuple[float, float]]
    rewards: list[float]
    reason: str
    seed: int
    observations: Optional[list[np.ndarray]] = field(default=None, repr=False)

    @property
    def episode_return(self) -> float:
        return float(sum(self.rewards))

    @property
    def length(self) -> int:
        return len(self.rewards)

    def to_json(self) -> dict[str, Any]:
        return {
            "domain": self.domain,
            "seed": self.seed,
            "reason": self.reason,
            "return": self.episode_return,
            "length": self.length,
            "actions": [list(a) for a in self.actions],
            "rewards": self.rewards,
        }


def evaluate(
    agent: ActorCritic,
    featurizer: Featurizer,
    world_config: WorldConfig,
    domain: DomainSpec,
    n_episodes: int,
    seed: int,
    save_observations: bool = False,
) -> tuple[list[EpisodeRecord], dict[str, float]]:
    """Deterministic (Gaussian mean) rollouts; episode i is reset with seed + i."""
    if n_episodes < 1:
        raise ParameterError(f"n_episodes must be >= 1, got {n_episodes}")
    env = DrivingEnv(world_config, domain, SynthWorld(world_config))
    records = []
    for ep in range(n_episodes):
        obs, _ = env.reset(seed=seed + ep)
        actions, rewards, frames = [], [], [obs["image"]] if save_observations else None
        reason, done = "running", False
        while not done:
            f = featurizer.batch(obs["image"][None], np.array([obs["velocity"][0]]))
            action, _, _, _ = agent.act(f, deterministic=True)
            a = action[0].numpy()
            obs, reward, terminated, truncated, info = env.step(a)
            actions.append((float(a[0]), float(a[1])))
            rewards.append(float(reward))
            if frames is not None:
                frames.append(obs["image"])
            reason = info["reason"]
            done = terminated or truncated
        records.append(EpisodeRecord(domain.name, actions, rewards, reason, seed + ep, frames))
    return records, summarize(records)


def summarize(records: Sequence[EpisodeRecord]) -> dict[str, float]:
    returns = np.array([r.episode_return for r in records])
    return {
        "episodes": len(records),
        "mean_return": float(returns.mean()),
        "std_return": float(returns.std()),
        "arrival_rate": float(np.mean([r.reason == "arrived" for r in records])),
        "mean_length": float(np.mean([r.length for r in records])),
    }


def write_episode_records(records: Sequence[EpisodeRecord], path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r.to_json(), sort_keys=True) + "\n" for r in records), encoding="utf-8")
    return path


# ============================================================================
# Persistence
# ============================================================================

def save_policy(
    agent: ActorCritic,
    featurizer: Featurizer,
    config: PolicyConfig,
    upstream: dict[str, str],
    path: Path,
) -> Path:
    """Actor-critic + extractor + normalizer in one file, with upstream artifact hashes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format_version": FORMAT_VERSION,
        "policy_config": config.model_dump(mode="json"),
        "upstream": upstream,
        "uses_aligner": featurizer.aligner is not None,
        "resolution": featurizer.extractor.resolution,
        "agent": agent.state_dict(),
        "extractor": featurizer.extractor.state_dict(),
        "normalizer": featurizer.normalizer.state_dict() if featurizer.normalizer is not None else None,
    }, path)
    return path


def load_policy(
    path: Path,
    aligner: Optional[VisualAligner],
    expected_upstream: Optional[dict[str, str]] = None,
) -> tuple[ActorCritic, Featurizer]:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if payload.get("format_version") != FORMAT_VERSION:
        raise ArtifactMismatchError("train-policy", str(FORMAT_VERSION), str(payload.get("format_version")))
    for name, digest in (expected_upstream or {}).items():
        recorded = payload["upstream"].get(name)
        if recorded != digest:
            raise ArtifactMismatchError(name, str(recorded), digest)
    config = PolicyConfig(**payload["policy_config"])
    extractor = FeatureExtractor(config.latent_dim, payload["resolution"]).drop_decoder()
    extractor.load_state_dict(payload["extractor"])
    featurizer = Featurizer(extractor.freeze(), aligner if payload["uses_aligner"] else None, config.normalize_velocity)
    if featurizer.normalizer is not None:
        featurizer.normalizer.load_state_dict(payload["normalizer"])
    agent = ActorCritic(featurizer.dim, config.ppo.hidden)
    agent.load_state_dict(payload["agent"])
    return agent.freeze(), featurizer
