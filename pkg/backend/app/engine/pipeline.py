"""
Stage registry and stage implementations.

Each stage reads verified upstream artifacts, runs one engine entry point
and returns the files it produced (name -> path). The runner hashes those
files and records them in the run's manifest.

    gen-data -> pretrain-vlm -> tune-prompts -> train-aligner
             -> train-policy -> evaluate -> [ablate-<plan>] -> report
"""
import functools
import hashlib
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import pandas as pd
import torch
from PIL import Image

from ..config import RunConfig, canonical_json, derive_seed
from ..db import manifest
from ..db.db import init_database
from ..middleware.error_handler import ArtifactMismatchError, FrozenParameterError, MissingArtifactError
from ..storage.paths import RunLayout, compute_directory_hash, compute_file_hash, module_checksum
from ..utils.logger import get_logger
from .aligner import load_aligner, save_aligner, train_aligner
from .attribution import SEGMENTS, attribution_map, mask_mass
from .datasets import load_dataset, sample_caption_pairs, sample_policy_dataset, sample_semantic_dataset, save_dataset
from .gap import domain_gap
from .policy import (
    Featurizer, evaluate, load_policy, pretrain_features, random_policy_returns, save_policy, train_ppo,
    write_episode_records,
)
from .prompt import load_prompts, save_prompts, tune
from .synthworld import DrivingEnv, SynthWorld
from .vlm import PerceptualNet, Vocabulary, load_dual_encoder, pretrain, save_dual_encoder

logger = get_logger(__name__)

PIPELINE_STAGES = ("gen-data", "pretrain-vlm", "tune-prompts", "train-aligner", "train-policy", "evaluate", "report")
ABLATION_PLANS = ("prompts", "losses", "lengths", "seeds")


def ablation_stage(plan: str) -> str:
    return f"ablate-{plan}"


# ============================================================================
# Context
# ============================================================================

@dataclass
class StageContext:
    """What a stage sees: its config, run layout and verified inputs."""
    config: RunConfig
    layout: RunLayout
    stage: str
    inputs: dict[str, Path] = field(default_factory=dict)
    digests: dict[str, str] = field(default_factory=dict)
    progress: Callable[[float, str], None] = lambda fraction, detail: None

    @property
    def seed(self) -> int:
        return derive_seed(self.config.seed, self.stage)

    def input(self, name: str) -> Path:
        if name not in self.inputs:
            raise MissingArtifactError(ARTIFACT_PRODUCERS.get(name, name))
        return self.inputs[name]

    def has_input(self, name: str) -> bool:
        return name in self.inputs


@dataclass(frozen=True)
class StageSpec:
    name: str
    sections: tuple[str, ...]
    upstream: tuple[str, ...]
    run: Callable[[StageContext], dict[str, Path]]
    optional_upstream: tuple[str, ...] = ()
    prompt_text: bool = False


def stage_hash(config: RunConfig, stage: str) -> str:
    """Hash of the seed plus the config sections a stage depends on."""
    spec = STAGE_SPECS[stage]
    payload = {"stage": stage, "seed": config.seed}
    for section in spec.sections:
        payload[section] = getattr(config, section).model_dump(mode="json")
    if "io" in payload:
        # where a run lives does not change what it produces
        payload["io"].pop("run_dir", None)
    if spec.prompt_text:
        payload["prompt_text"] = [config.prompt.prefix_text, config.prompt.suffix_text]
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def artifact_hash(path: Path) -> str:
    path = Path(path)
    return compute_directory_hash(path) if path.is_dir() else compute_file_hash(path)


# ============================================================================
# Shared loaders
# ============================================================================

def _seen(config: RunConfig):
    return [config.domain(n) for n in config.world.seen_domains]


def _unseen(config: RunConfig):
    return [config.domain(n) for n in config.world.unseen_domains]


def _write_json(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=float) + "\n", encoding="utf-8")
    return path


def _write_csv(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
    return path


def _load_vlm(ctx: StageContext):
    return load_dual_encoder(ctx.input("vlm"))


def _load_prompts(ctx: StageContext, encoder, vocab):
    return load_prompts(ctx.input("prompts"), encoder, vocab, _seen(ctx.config))


def _load_aligner(ctx: StageContext):
    aligner, _ = load_aligner(ctx.input("aligner"), expected_prompt_hash=ctx.digests.get("prompts"))
    return aligner


def _check_frozen(label: str, before: str, module: torch.nn.Module) -> None:
    after = module_checksum(module)
    if after != before:
        raise FrozenParameterError(f"{label} parameters changed during training")


def _check_artifacts_unchanged(ctx: StageContext, names: tuple[str, ...]) -> None:
    for name in names:
        if name in ctx.digests and artifact_hash(ctx.input(name)) != ctx.digests[name]:
            raise FrozenParameterError(f"{name} artifact changed during {ctx.stage}")


def _policy_upstream(ctx: StageContext) -> dict[str, str]:
    return {name: ctx.digests[name] for name in ("aligner", "prompts", "vlm") if name in ctx.digests}


# ============================================================================
# Stages
# ============================================================================

def run_gen_data(ctx: StageContext) -> dict[str, Path]:
    config = ctx.config
    world = SynthWorld(config.world)
    data = ctx.layout.data_dir
    semantic = sample_semantic_dataset(world, _seen(config), config.world.semantic_per_domain, ctx.seed)
    ctx.progress(0.2, "D_semantic")
    save_dataset(semantic, data / "semantic")
    policy = sample_policy_dataset(world, config.target_domain, config.world.policy_images, ctx.seed)
    ctx.progress(0.5, "D_policy")
    save_dataset(policy, data / "policy")
    pairs = sample_caption_pairs(world, config.world.vlm_pairs_per_domain, ctx.seed)
    ctx.progress(0.9, "caption pairs")
    save_dataset(pairs, data / "pairs")
    return {"semantic": data / "semantic", "policy_images": data / "policy", "pairs": data / "pairs"}


def run_pretrain_vlm(ctx: StageContext) -> dict[str, Path]:
    pairs = load_dataset(ctx.input("pairs"))
    vocab = Vocabulary.for_prompts(ctx.config.prompt)
    encoder, history = pretrain(pairs, ctx.config.vlm, vocab, ctx.seed)
    weights, sidecar = save_dual_encoder(encoder, vocab, ctx.layout.models_dir / "vlm.pt", ctx.seed)
    hist = _write_json(ctx.layout.models_dir / "vlm_history.json", history)
    return {"vlm": weights, "vlm_meta": sidecar, "vlm_history": hist}


def run_tune_prompts(ctx: StageContext) -> dict[str, Path]:
    semantic = load_dataset(ctx.input("semantic"))
    encoder, vocab = _load_vlm(ctx)
    encoder_sum = module_checksum(encoder)
    params, history = tune(semantic, encoder, vocab, ctx.config.prompt, _seen(ctx.config), ctx.seed)
    _check_frozen("encoder", encoder_sum, encoder)
    path = save_prompts(params, ctx.layout.models_dir / "prompts.pt")
    hist = _write_json(ctx.layout.models_dir / "prompts_history.json", history)
    return {"prompts": path, "prompts_history": hist}


def run_train_aligner(ctx: StageContext) -> dict[str, Path]:
    config = ctx.config
    semantic = load_dataset(ctx.input("semantic"))
    encoder, vocab = _load_vlm(ctx)
    params = _load_prompts(ctx, encoder, vocab)
    net = PerceptualNet.from_encoder(encoder, config.vlm.perceptual_layers)
    before = {"encoder": module_checksum(encoder), "prompts": module_checksum(params)}
    aligner, history = train_aligner(semantic, params, encoder, net, config.aligner, ctx.seed)
    _check_frozen("encoder", before["encoder"], encoder)
    _check_frozen("prompt", before["prompts"], params)
    path = save_aligner(aligner, config.aligner, ctx.digests["prompts"], ctx.layout.models_dir / "aligner.pt")
    hist = _write_json(ctx.layout.models_dir / "aligner_history.json", history)
    return {"aligner": path, "aligner_history": hist}


def _train_agent(ctx: StageContext, images, aligner, label: str, progress_span: tuple[float, float]):
    config = ctx.config
    seed = derive_seed(ctx.seed, label)
    extractor, ae_history = pretrain_features(images, aligner, config.policy, seed)
    extractor_sum = module_checksum(extractor)
    featurizer = Featurizer(extractor, aligner, config.policy.normalize_velocity)
    env_fn = functools.partial(DrivingEnv, config.world, config.target_domain)
    ppo_seed = config.policy.ppo.seed if config.policy.ppo.seed is not None else seed
    start, width = progress_span

    def report(done: int, total: int) -> None:
        ctx.progress(start + width * done / total, f"{label} PPO update {done}/{total}")

    agent, history = train_ppo(env_fn, featurizer, config.policy.ppo, config.policy.ppo.hidden, ppo_seed,
                               progress=report)
    _check_frozen("extractor", extractor_sum, extractor)
    return agent, featurizer, {"autoencoder": ae_history, "ppo": history}


def run_train_policy(ctx: StageContext) -> dict[str, Path]:
    config = ctx.config
    images = load_dataset(ctx.input("policy_images"))
    aligner = _load_aligner(ctx)
    aligner_sum = module_checksum(aligner)
    models = ctx.layout.models_dir

    env_fn = functools.partial(DrivingEnv, config.world, config.target_domain)
    baseline = random_policy_returns(env_fn, episodes=20, seed=derive_seed(ctx.seed, "random"))
    spans = ((0.0, 0.5), (0.5, 0.5)) if config.policy.train_control else ((0.0, 1.0),)

    agent, featurizer, history = _train_agent(ctx, images, aligner, "pva", spans[0])
    _check_frozen("aligner", aligner_sum, aligner)
    outputs = {"policy": save_policy(agent, featurizer, config.policy, _policy_upstream(ctx), models / "policy.pt")}
    summary = {"random_baseline_mean": float(np.mean(baseline)), "pva": history}

    if config.policy.train_control:
        control, control_featurizer, control_history = _train_agent(ctx, images, None, "control", spans[1])
        outputs["policy_control"] = save_policy(
            control, control_featurizer, config.policy, _policy_upstream(ctx), models / "policy_control.pt"
        )
        summary["control"] = control_history
    _check_frozen("aligner", aligner_sum, aligner)
    _check_artifacts_unchanged(ctx, ("vlm", "prompts", "aligner"))
    outputs["policy_history"] = _write_json(models / "policy_history.json", summary)
    return outputs


def _gap_images(config: RunConfig, world: SynthWorld, seed: int) -> dict[str, np.ndarray]:
    domains = _seen(config) + _unseen(config)
    dataset = sample_semantic_dataset(world, domains, config.eval.gap_samples, seed)
    return {name: dataset.images[dataset.indices_of(k)] for k, name in enumerate(dataset.domain_names)}


def _gap_summary(report, config: RunConfig) -> dict:
    seen = config.world.seen_domains
    target = config.target_domain.name
    return {
        "gap": report.gap,
        "seen_gap": report.mean_pairwise(seen),
        "unseen_gap": report.gap_to(target, config.world.unseen_domains) if config.world.unseen_domains else None,
        "pairwise": {f"{a}|{b}": v for (a, b), v in sorted(report.pairwise.items())},
        "stats": report.stats,
    }


def _attribution(ctx: StageContext, world: SynthWorld, encoder, params) -> tuple[pd.DataFrame, list[Path]]:
    config = ctx.config
    rng = np.random.default_rng(derive_seed(ctx.seed, "attribution"))
    state = world.initial_state(rng)
    masks = world.geometry_masks(state)
    seen = config.world.seen_domains
    out_dir = ctx.layout.eval_dir / "attribution"
    out_dir.mkdir(parents=True, exist_ok=True)
    rows, files = [], []
    for domain in _seen(config) + _unseen(config):
        image = world.render(state, domain, seed=0)
        k = seen.index(domain.name) if domain.name in seen else config.aligner.unified_domain
        for segment in SEGMENTS:
            if params.fixed_sentence and segment != SEGMENTS[0]:
                continue
            saliency = attribution_map(params, encoder, image, k, segment)
            path = out_dir / f"{domain.name}_{segment}.png"
            Image.fromarray(np.round(saliency * 255.0).astype(np.uint8)).save(path, format="PNG")
            files.append(path)
            rows.append({
                "domain": domain.name,
                "segment": segment,
                "prompt_domain": seen[k],
                "road_mass": mask_mass(saliency, masks["road"]),
                "puddle_mass": mask_mass(saliency, masks["puddle"]),
                "sky_mass": mask_mass(saliency, masks["sky"]),
            })
    return pd.DataFrame(rows), files


def run_evaluate(ctx: StageContext) -> dict[str, Path]:
    config = ctx.config
    world = SynthWorld(config.world)
    encoder, vocab = _load_vlm(ctx)
    params = _load_prompts(ctx, encoder, vocab)
    aligner = _load_aligner(ctx)
    upstream = _policy_upstream(ctx)
    agents = {"pva": load_policy(ctx.input("policy"), aligner, upstream)}
    if ctx.has_input("policy_control"):
        agents["control"] = load_policy(ctx.input("policy_control"), None, upstream)

    eval_dir = ctx.layout.eval_dir
    seen = set(config.world.seen_domains)
    domains = _seen(config) + _unseen(config)
    episode_seed = derive_seed(ctx.seed, "episodes")
    rows, outputs = [], {}
    for label, (agent, featurizer) in agents.items():
        records = []
        for i, domain in enumerate(domains):
            ctx.progress(0.6 * (i + 1) / len(domains), f"{label} on {domain.name}")
            domain_records, summary = evaluate(
                agent, featurizer, config.world, domain, config.eval.episodes, episode_seed,
                save_observations=config.io.save_observations,
            )
            records.extend(domain_records)
            rows.append({
                "agent": label,
                "domain": domain.name,
                "split": "seen" if domain.name in seen else "unseen",
                **summary,
                "seed": config.seed,
                "policy_sha256": ctx.digests["policy" if label == "pva" else "policy_control"],
            })
        outputs[f"episodes_{label}"] = write_episode_records(records, eval_dir / f"episodes_{label}.jsonl")
    outputs["summary"] = _write_csv(pd.DataFrame(rows), eval_dir / "summary.csv")

    ctx.progress(0.7, "domain gap")
    images = _gap_images(config, world, derive_seed(ctx.seed, "gap"))
    _, featurizer = agents["pva"]
    gap = {}
    for label, path_aligner in (("raw", None), ("aligned", aligner)):
        report = domain_gap(
            images, path_aligner, config.eval.gap_space,
            metric=config.eval.gap_metric, projection=config.eval.projection,
            seed=derive_seed(ctx.seed, "projection"), min_samples=config.eval.gap_samples,
            encoder=encoder, extractor=featurizer.extractor,
        )
        gap[label] = _gap_summary(report, config)
        outputs[f"projection_{label}"] = _write_csv(
            pd.DataFrame(report.projection_rows()), eval_dir / f"projection_{label}.csv"
        )
    gap["metric"] = config.eval.gap_metric
    gap["space"] = config.eval.gap_space
    gap["encoder_sha256"] = ctx.digests["vlm"]
    gap["aligner_sha256"] = ctx.digests["aligner"]
    outputs["gap"] = _write_json(eval_dir / "gap.json", gap)

    ctx.progress(0.9, "attribution maps")
    attribution, _ = _attribution(ctx, world, encoder, params)
    outputs["attribution"] = _write_csv(attribution, eval_dir / "attribution.csv")
    outputs["attribution_maps"] = eval_dir / "attribution"
    return outputs


def run_ablation_stage(plan: str) -> Callable[[StageContext], dict[str, Path]]:
    def run(ctx: StageContext) -> dict[str, Path]:
        from .ablation import run_plan
        results = run_plan(ctx.config, ctx.layout, plan, progress=ctx.progress)
        return {f"ablation_{plan}": _write_csv(results, ctx.layout.root / plan / "results.csv")}
    return run


def run_report(ctx: StageContext) -> dict[str, Path]:
    from .report import emit_report
    return emit_report(ctx)


# ============================================================================
# Registry
# ============================================================================

_ALL = ("world", "vlm", "prompt", "aligner", "policy", "eval")

STAGE_SPECS: dict[str, StageSpec] = {
    spec.name: spec for spec in (
        StageSpec("gen-data", ("world",), (), run_gen_data),
        StageSpec("pretrain-vlm", ("world", "vlm"), ("gen-data",), run_pretrain_vlm, prompt_text=True),
        StageSpec("tune-prompts", ("world", "vlm", "prompt"), ("gen-data", "pretrain-vlm"), run_tune_prompts),
        StageSpec("train-aligner", ("world", "vlm", "prompt", "aligner"),
                  ("gen-data", "pretrain-vlm", "tune-prompts"), run_train_aligner),
        StageSpec("train-policy", ("world", "vlm", "prompt", "aligner", "policy"),
                  ("gen-data", "pretrain-vlm", "tune-prompts", "train-aligner"), run_train_policy),
        StageSpec("evaluate", _ALL + ("io",),
                  ("pretrain-vlm", "tune-prompts", "train-aligner", "train-policy"), run_evaluate),
        *(StageSpec(ablation_stage(plan), _ALL, (), run_ablation_stage(plan)) for plan in ABLATION_PLANS),
        StageSpec("report", _ALL + ("io",), ("train-policy", "evaluate"), run_report,
                  optional_upstream=tuple(ablation_stage(p) for p in ABLATION_PLANS)),
    )
}

ARTIFACT_PRODUCERS = {
    "semantic": "gen-data", "policy_images": "gen-data", "pairs": "gen-data",
    "vlm": "pretrain-vlm", "vlm_meta": "pretrain-vlm", "vlm_history": "pretrain-vlm",
    "prompts": "tune-prompts", "prompts_history": "tune-prompts",
    "aligner": "train-aligner", "aligner_history": "train-aligner",
    "policy": "train-policy", "policy_control": "train-policy", "policy_history": "train-policy",
    "summary": "evaluate", "gap": "evaluate", "attribution": "evaluate", "attribution_maps": "evaluate",
    "projection_raw": "evaluate", "projection_aligned": "evaluate",
    "episodes_pva": "evaluate", "episodes_control": "evaluate",
    **{f"ablation_{plan}": ablation_stage(plan) for plan in ABLATION_PLANS},
}


# ============================================================================
# Manifest helpers
# ============================================================================

async def verify_stage(config: RunConfig, layout: RunLayout, stage: str) -> dict[str, tuple[Path, str]]:
    """
    Check a completed stage against the current config and the files on disk.

    Returns:
        artifact name -> (absolute path, sha256)

    Raises:
        MissingArtifactError: stage never completed or a file is gone
        ArtifactMismatchError: config or content changed since the stage ran
    """
    record = await manifest.get_stage(layout.db_path, stage) if layout.db_path.exists() else None
    if record is None or record["state"] != manifest.StageState.COMPLETED.value:
        raise MissingArtifactError(stage)
    expected = stage_hash(config, stage)
    if record["config_hash"] != expected:
        raise ArtifactMismatchError(stage, expected, record["config_hash"])
    verified = {}
    for artifact in await manifest.get_artifacts(layout.db_path, stage):
        path = layout.root / artifact["path"]
        if not path.exists():
            raise MissingArtifactError(stage, details={"path": artifact["path"]})
        actual = artifact_hash(path)
        if actual != artifact["sha256"]:
            raise ArtifactMismatchError(stage, artifact["sha256"], actual)
        verified[artifact["name"]] = (path, actual)
    return verified


async def gather_inputs(config: RunConfig, layout: RunLayout, stage: str) -> dict[str, tuple[Path, str]]:
    """Verified artifacts of every upstream stage (optional ones only when present)."""
    spec = STAGE_SPECS[stage]
    inputs: dict[str, tuple[Path, str]] = {}
    for upstream in spec.upstream:
        inputs.update(await verify_stage(config, layout, upstream))
    for upstream in spec.optional_upstream:
        try:
            inputs.update(await verify_stage(config, layout, upstream))
        except MissingArtifactError:
            continue
    return inputs


async def import_stage(source: RunLayout, target: RunLayout, config: RunConfig, stage: str) -> bool:
    """
    Copy a completed stage from another run directory when its hash matches.

    Returns:
        True if the stage was imported
    """
    if not source.db_path.exists():
        return False
    record = await manifest.get_stage(source.db_path, stage)
    if record is None or record["state"] != manifest.StageState.COMPLETED.value:
        return False
    digest = stage_hash(config, stage)
    if record["config_hash"] != digest:
        return False
    artifacts = await manifest.get_artifacts(source.db_path, stage)
    await init_database(target.db_path)
    for artifact in artifacts:
        src, dst = source.root / artifact["path"], target.root / artifact["path"]
        dst.parent.mkdir(parents=True, exist_ok=True)
        if src.is_dir():
            shutil.copytree(src, dst, dirs_exist_ok=True)
        else:
            shutil.copy2(src, dst)
    await manifest.start_stage(target.db_path, stage, digest, record["upstream"])
    await manifest.complete_stage(
        target.db_path, stage, digest, {a["name"]: (a["path"], a["sha256"]) for a in artifacts}
    )
    logger.info(f"Imported [cyan]{stage}[/cyan] from {source.root}")
    return True


async def import_shared(source: RunLayout, target: RunLayout, config: RunConfig) -> list[str]:
    """Import pipeline stages in order until the first one whose hash differs."""
    imported = []
    for stage in PIPELINE_STAGES[:-1]:
        if not await import_stage(source, target, config, stage):
            break
        imported.append(stage)
    return imported


_UNTRACKED = {"config.yaml", "manifest.db", "manifest.db-journal", "manifest.db-wal", "manifest.db-shm"}


async def orphans(root: Path) -> list[str]:
    """
    Files under a run directory that no manifest entry accounts for.

    Nested run directories (ablation variants) are checked against their
    own manifest.
    """
    layout = RunLayout(root)
    tracked = []
    if layout.db_path.exists():
        tracked = [a["path"] for a in await manifest.get_artifacts(layout.db_path)]
    nested_roots = sorted(
        db.parent.relative_to(layout.root) for db in layout.root.rglob("manifest.db") if db.parent != layout.root
    )
    nested_roots = [r for r in nested_roots if not any(o in r.parents for o in nested_roots)]

    found = []
    for path in sorted(p for p in layout.root.rglob("*") if p.is_file()):
        rel = path.relative_to(layout.root)
        if rel.as_posix() in _UNTRACKED or rel.parts[0] == "state":
            continue
        if any(r in rel.parents for r in nested_roots):
            continue
        if not any(rel.as_posix() == t or rel.as_posix().startswith(t + "/") for t in tracked):
            found.append(rel.as_posix())
    for nested in nested_roots:
        found.extend((nested / p).as_posix() for p in await orphans(layout.root / nested))
    return sorted(found)
