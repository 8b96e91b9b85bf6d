"""
Configuration for the prompt-based visual alignment pipeline.

Two layers, kept apart:
- `Settings`: process-level knobs read from the environment or a .env file
  (run directory root, thread count, tracker server).
- `RunConfig`: the declarative, schema-validated run document (YAML) that
  fully determines an experiment together with its seed.
"""
import hashlib
import json
from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from .middleware.error_handler import ConfigError


class Settings(BaseSettings):
    """Process settings loaded from environment (prefix PVA_) or .env file."""

    model_config = SettingsConfigDict(env_prefix="PVA_", env_file=".env", env_file_encoding="utf-8")

    runs_root: Path = Field(
        default=Path("./runs"),
        description="Root directory holding one sub-directory per named run"
    )
    num_threads: Optional[int] = Field(
        default=None,
        description="torch intra-op thread count (None keeps the torch default)"
    )
    device: str = Field(default="cpu", description="torch device for every stage")
    log_level: str = Field(default="INFO")
    ablation_workers: int = Field(
        default=1,
        description="Parallel variant processes used by `ablate` (1 = sequential)"
    )

    # Tracker server settings
    server_host: str = Field(default="127.0.0.1")
    server_port: int = Field(default=8000)

    def run_dir(self, name: str) -> Path:
        """Directory of a named run."""
        return self.runs_root / name

    def ensure_directories(self) -> None:
        """Create the runs root."""
        self.runs_root.mkdir(parents=True, exist_ok=True)


# Global settings instance
settings = Settings()


# ============================================================================
# Run configuration schema
# ============================================================================

class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DomainSpec(BaseModel):
    """Parametric weather that controls how a driving state is rendered."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    cloudiness: float = Field(ge=0.0, le=1.0, description="Desaturation and contrast loss")
    precipitation: float = Field(ge=0.0, le=1.0, description="Rain streaks and road reflections")
    sun_altitude: float = Field(ge=-90.0, le=90.0, description="Degrees; drives brightness and warm tint")
    sun_azimuth: float = Field(ge=0.0, lt=360.0, description="Degrees; drives shadow direction")


CANONICAL_DOMAINS: tuple[DomainSpec, ...] = (
    DomainSpec(name="ClearNoon", cloudiness=0.1, precipitation=0.0, sun_altitude=70.0, sun_azimuth=150.0),
    DomainSpec(name="HardRainNoon", cloudiness=0.9, precipitation=0.9, sun_altitude=70.0, sun_azimuth=150.0),
    DomainSpec(name="ClearSunset", cloudiness=0.1, precipitation=0.0, sun_altitude=6.0, sun_azimuth=270.0),
    DomainSpec(name="WetCloudySunset", cloudiness=0.7, precipitation=0.2, sun_altitude=6.0, sun_azimuth=270.0),
    DomainSpec(name="SoftRainSunset", cloudiness=0.6, precipitation=0.45, sun_altitude=6.0, sun_azimuth=270.0),
    DomainSpec(name="ClearNight", cloudiness=0.1, precipitation=0.0, sun_altitude=-40.0, sun_azimuth=0.0),
)


class WorldConfig(_Section):
    resolution: int = Field(default=64, ge=16, description="Square image side in pixels (multiple of 16)")
    dt: float = Field(default=0.1, gt=0.0, description="Seconds per step")
    step_budget: int = Field(default=400, ge=1, description="Steps before a timeout termination")
    arrival_radius: float = Field(default=1.0, gt=0.0, description="Distance to goal that counts as arrival")
    arrival_bonus: float = Field(default=100.0, ge=0.0, description="Reward added on the arrival step")
    route_length: float = Field(default=80.0, gt=0.0, description="Goal distance along the lane")
    lane_half_width: float = Field(default=2.0, gt=0.0, description="Lane exit beyond this lateral offset")
    v_max: float = Field(default=10.0, gt=0.0, description="Speed ceiling in world units per second")
    steer_gain: float = Field(default=5.0, gt=0.0, description="Heading rate per unit steer")
    lambda_v: float = Field(default=1.0, description="Speed reward weight")
    lambda_col: float = Field(default=100.0, description="Collision penalty weight")
    lambda_out: float = Field(default=100.0, description="Lane exit penalty weight")
    r_const: float = Field(default=-0.1, description="Constant per-step reward")
    obstacles: list[tuple[float, float]] = Field(
        default=[(30.0, 1.0), (55.0, -1.0)],
        description="Static obstacle centers (along-lane, lateral)"
    )
    obstacle_radius: float = Field(default=0.7, gt=0.0)
    domains: list[DomainSpec] = Field(default_factory=lambda: list(CANONICAL_DOMAINS))
    seen_domains: list[str] = Field(
        default=["ClearNoon", "HardRainNoon"],
        description="Training domains for stages 1-2, in domain-index order"
    )
    unseen_domains: list[str] = Field(
        default=["ClearSunset", "WetCloudySunset", "SoftRainSunset"],
        description="Evaluation-only domains"
    )
    semantic_per_domain: int = Field(default=100, ge=1, description="D_semantic images per seen domain")
    policy_images: int = Field(default=1000, ge=1, description="D_policy images from the unified domain")
    vlm_pairs_per_domain: int = Field(default=300, ge=1, description="Caption pairs per registered domain")

    @field_validator("resolution")
    @classmethod
    def _multiple_of_16(cls, v: int) -> int:
        if v % 16:
            raise ValueError("resolution must be a multiple of 16")
        return v

    @model_validator(mode="after")
    def _check_domains(self) -> "WorldConfig":
        names = [d.name for d in self.domains]
        if len(set(names)) != len(names):
            raise ValueError("domain names must be unique")
        for name in self.seen_domains + self.unseen_domains:
            if name not in names:
                raise ValueError(f"domain {name!r} is not registered")
        if len(self.seen_domains) < 2:
            raise ValueError("at least two seen domains are required")
        return self


class VLMConfig(_Section):
    d_tok: int = Field(default=128, ge=1, description="Token vector width")
    d_emb: int = Field(default=128, ge=1, description="Joint embedding width")
    max_length: int = Field(default=64, ge=1, description="Longest accepted token sequence")
    text_layers: int = Field(default=2, ge=1, description="Transformer layers in the text encoder")
    text_heads: int = Field(default=4, ge=1)
    image_widths: list[int] = Field(default=[32, 64, 128, 128], description="Channels per stride-2 stage")
    perceptual_layers: list[int] = Field(default=[0, 1], description="Trunk stages used by the feature loss")
    logit_scale_init: float = Field(default=1.0 / 0.07, gt=0.0)
    lr: float = Field(default=1e-3, gt=0.0)
    epochs: int = Field(default=30, ge=1)
    batch_size: int = Field(default=32, ge=2)
    holdout_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)
    min_pairs: int = Field(default=1000, ge=1, description="Smallest accepted pretraining set")

    @model_validator(mode="after")
    def _check_heads(self) -> "VLMConfig":
        if self.d_tok % self.text_heads:
            raise ValueError("d_tok must be divisible by text_heads")
        return self


class PromptConfig(_Section):
    L_G: int = Field(default=10, ge=1, description="Global prompt length")
    L_S: int = Field(default=5, ge=1, description="Domain-specific prompt length")
    L_C: int = Field(default=10, ge=1, description="Instance-conditional prompt length")
    prefix_text: str = Field(default="Driving the car on", description="Fixed segment before the learnable tokens")
    suffix_text: str = Field(default="the day.", description="Fixed segment after the learnable tokens")
    tau_d: float = Field(default=0.5, gt=0.0, description="Domain loss temperature")
    tau_ins: float = Field(default=0.1, gt=0.0, description="Instance loss temperature")
    lr_domain: float = Field(default=4e-4, gt=0.0, description="Learning rate of P_G and P_S")
    lr_instance: float = Field(default=5e-5, gt=0.0, description="Learning rate of the instance learner")
    epochs: int = Field(default=50, ge=0)
    batch_size: int = Field(default=16, ge=2)
    alternation: Literal["epoch", "step"] = Field(default="epoch", description="Phase switching granularity")
    denominator: Literal["matched", "cross"] = Field(
        default="matched",
        description="Instance loss denominator: matched pairs as printed, or anchor-vs-all prompts"
    )
    init_std: float = Field(default=0.02, gt=0.0, description="Gaussian init of learnable tokens")
    backbone_width: int = Field(default=32, ge=1)
    backbone_blocks: int = Field(default=4, ge=1)
    use_global: bool = Field(default=True, description="Include P_G")
    use_domain: bool = Field(default=True, description="Include P_S")
    use_instance: bool = Field(default=True, description="Include P_C")
    fixed_sentence: bool = Field(default=False, description="Skip tuning and use a fixed template sentence")


class AlignConfig(_Section):
    unified_domain: int = Field(default=0, ge=0, description="Index (into seen domains) of the target domain u")
    num_patches: int = Field(default=16, ge=1, description="M patches per image")
    patch_size: int = Field(default=24, ge=2, description="Crop side in pixels")
    rotation_range: float = Field(default=30.0, ge=0.0, description="Max absolute rotation in degrees")
    tau_patch: float = Field(default=0.7, ge=0.0, lt=2.0, description="Patch rejection threshold")
    lambda_patch: float = Field(default=2.0, ge=0.0)
    lambda_feature: float = Field(default=1.0, ge=0.0)
    use_global: bool = Field(default=True)
    use_patch: bool = Field(default=True)
    use_feature: bool = Field(default=True)
    patch_reduction: Literal["sum", "mean"] = Field(default="sum", description="Sum over M as printed, or mean")
    lr: float = Field(default=2e-4, gt=0.0)
    epochs: int = Field(default=40, ge=0)
    batch_size: int = Field(default=8, ge=1)
    base_width: int = Field(default=32, ge=1)
    depth: int = Field(default=3, ge=1)
    holdout_fraction: float = Field(default=0.1, ge=0.0, lt=1.0)


class PPOConfig(_Section):
    gamma: float = Field(default=0.99, gt=0.0, le=1.0)
    gae_lambda: float = Field(default=0.95, gt=0.0, le=1.0)
    clip_ratio: float = Field(default=0.2, gt=0.0)
    epochs: int = Field(default=4, ge=1)
    minibatch_size: int = Field(default=64, ge=1)
    horizon: int = Field(default=1024, ge=1, description="Steps collected per update (across envs)")
    total_steps: int = Field(default=200_000, ge=1)
    entropy_coef: float = Field(default=0.005, ge=0.0)
    value_coef: float = Field(default=0.5, ge=0.0)
    lr: float = Field(default=3e-4, gt=0.0)
    max_grad_norm: float = Field(default=0.5, gt=0.0)
    num_envs: int = Field(default=8, ge=1)
    hidden: int = Field(default=128, ge=1)
    seed: Optional[int] = Field(default=None, description="Overrides the derived stage seed")


class PolicyConfig(_Section):
    latent_dim: int = Field(default=64, ge=1, description="z")
    ae_epochs: int = Field(default=30, ge=0)
    ae_lr: float = Field(default=1e-3, gt=0.0)
    ae_batch_size: int = Field(default=64, ge=1)
    normalize_velocity: bool = Field(default=False, description="Running normalization of the velocity input")
    train_control: bool = Field(default=True, description="Also train the no-aligner control agent")
    ppo: PPOConfig = Field(default_factory=PPOConfig)


class EvalConfig(_Section):
    seeds: list[int] = Field(default=[0, 1, 2])
    episodes: int = Field(default=10, ge=1, description="Episodes per domain")
    gap_metric: Literal["energy", "mmd"] = Field(default="energy")
    gap_space: Literal["policy", "embedding"] = Field(default="policy")
    projection: Literal["pca", "tsne"] = Field(default="pca")
    gap_samples: int = Field(default=50, ge=2, description="Images per domain for gap metrics")
    prompt_variants: list[str] = Field(
        default=["fixed_sentence", "domain_instance", "global_instance", "global_domain", "full"]
    )
    loss_variants: list[str] = Field(
        default=["full", "no_feature", "no_patch", "no_global"]
    )
    length_sweep: list[tuple[int, int, int]] = Field(
        default=[],
        description="(L_G, L_S, L_C) triples run by `ablate --plan lengths`"
    )
    ablation_plans: list[Literal["prompts", "losses", "lengths", "seeds"]] = Field(
        default=[],
        description="Plans `pipeline` runs between `evaluate` and `report`"
    )


class IOConfig(_Section):
    run_dir: Optional[Path] = Field(default=None, description="Defaults to <runs_root>/<name>")
    save_observations: bool = Field(default=False, description="Keep images in evaluation records")


class RunConfig(_Section):
    name: str = Field(default="default")
    seed: int = Field(default=0)
    world: WorldConfig = Field(default_factory=WorldConfig)
    vlm: VLMConfig = Field(default_factory=VLMConfig)
    prompt: PromptConfig = Field(default_factory=PromptConfig)
    aligner: AlignConfig = Field(default_factory=AlignConfig)
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    io: IOConfig = Field(default_factory=IOConfig)

    @model_validator(mode="after")
    def _check_cross_section(self) -> "RunConfig":
        if self.aligner.unified_domain >= len(self.world.seen_domains):
            raise ValueError("aligner.unified_domain must index a seen domain")
        if self.aligner.patch_size >= self.world.resolution:
            raise ValueError("aligner.patch_size must be smaller than world.resolution")
        if self.vlm.max_length < self._prompt_length_upper_bound():
            raise ValueError("vlm.max_length is shorter than the assembled prompt")
        return self

    def _prompt_length_upper_bound(self) -> int:
        p = self.prompt
        fixed = len(p.prefix_text.split()) + len(p.suffix_text.split())
        return fixed + p.L_G + p.L_S + p.L_C

    def resolved_run_dir(self) -> Path:
        return self.io.run_dir or settings.run_dir(self.name)

    @property
    def target_domain(self) -> DomainSpec:
        return self.domain(self.world.seen_domains[self.aligner.unified_domain])

    def domain(self, name: str) -> DomainSpec:
        for d in self.world.domains:
            if d.name == name:
                return d
        raise ConfigError(f"domain {name!r} is not registered", key_path="world.domains")


# ============================================================================
# Loading, overrides, hashing
# ============================================================================

def _key_path(error: dict) -> str:
    return ".".join(str(part) for part in error.get("loc", ()))


def validate_run_config(data: dict) -> RunConfig:
    """Validate a raw mapping, converting schema errors into ConfigError."""
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        first = exc.errors()[0]
        key_path = _key_path(first)
        raise ConfigError(
            f"invalid config at {key_path or '<root>'}: {first['msg']}",
            key_path=key_path,
            details={"errors": [{"key_path": _key_path(e), "msg": e["msg"]} for e in exc.errors()]},
        ) from exc


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """
    Apply `section.key=value` overrides to a raw config mapping.

    Values are parsed as YAML scalars so `0.5`, `true` and `[1, 2]` keep
    their types.
    """
    data = json.loads(json.dumps(data, default=str))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value", key_path=item)
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a leaf", key_path=key)
        node[parts[-1]] = yaml.safe_load(raw)
    return data


def load_run_config(
    path: Optional[Path] = None,
    overrides: Optional[list[str]] = None,
    seed: Optional[int] = None,
) -> RunConfig:
    """Load a YAML run config (or the defaults), apply flag overrides and validate."""
    data: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}", key_path="")
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file is not valid YAML: {exc}", key_path="") from exc
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping", key_path="")
    data = apply_overrides(data, overrides or [])
    if seed is not None:
        data["seed"] = seed
    return validate_run_config(data)


def dump_run_config(config: RunConfig) -> str:
    """YAML snapshot of a config, with every default spelled out."""
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=True)


def canonical_json(data: Any) -> str:
    return json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)


def config_hash(config: BaseModel) -> str:
    """SHA-256 of the canonical JSON form of a config (or config section)."""
    payload = config.model_dump(mode="json")
    if isinstance(config, RunConfig):
        # io.run_dir only says where results go, not what they are
        payload["io"].pop("run_dir", None)
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def derive_seed(seed: int, label: str) -> int:
    """Deterministic per-stage seed derived from the run seed."""
    digest = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little") & 0x7FFFFFFF
