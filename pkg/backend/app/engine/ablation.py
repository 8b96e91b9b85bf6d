"""
Ablation plans.

A plan is a list of named variants, each a set of config overrides applied
to the base run config. Every variant is run for every seed in
`eval.seeds` in its own run directory (runs/<name>/<plan>/<variant>/<seed>/),
reusing upstream stages whose hashes match instead of recomputing them.
The `seeds` plan has only the full variant and repeats the transfer
evaluation, PVA and control agents both, for every seed.
"""
import asyncio
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Optional

import pandas as pd

from ..config import RunConfig, config_hash, settings, validate_run_config
from ..middleware.error_handler import ParameterError
from ..storage.paths import RunLayout
from ..utils.logger import get_logger, setup_logging

logger = get_logger(__name__)

FULL = "full"

PROMPT_VARIANTS: dict[str, dict[str, Any]] = {
    "fixed_sentence": {"prompt.fixed_sentence": True},
    "domain_instance": {"prompt.use_global": False},
    "global_instance": {"prompt.use_domain": False},
    "global_domain": {"prompt.use_instance": False},
    FULL: {},
}

LOSS_VARIANTS: dict[str, dict[str, Any]] = {
    FULL: {},
    "no_feature": {"aligner.use_feature": False},
    "no_patch": {"aligner.use_patch": False},
    "no_global": {"aligner.use_global": False},
}

# Keys each plan may change; anything else differing between variants is a bug
PLAN_KEYS = {
    "prompts": {"prompt.fixed_sentence", "prompt.use_global", "prompt.use_domain", "prompt.use_instance"},
    "losses": {"aligner.use_feature", "aligner.use_patch", "aligner.use_global"},
    "lengths": {"prompt.L_G", "prompt.L_S", "prompt.L_C"},
    "seeds": set(),
}

VARIANT_STAGES = ("gen-data", "pretrain-vlm", "tune-prompts", "train-aligner", "train-policy", "evaluate")


@dataclass
class AblationPlan:
    name: str
    variants: dict[str, dict[str, Any]]
    seeds: list[int]

    def __post_init__(self):
        if FULL not in self.variants or self.variants[FULL]:
            raise ParameterError(f"plan {self.name!r} needs exactly one full variant with no overrides")
        if not self.seeds:
            raise ParameterError(f"plan {self.name!r} has no seeds")

    @property
    def ordered_variants(self) -> list[str]:
        """Full variant first so the others can import from it."""
        return [FULL] + [v for v in self.variants if v != FULL]


def length_variant_name(lengths: tuple[int, int, int]) -> str:
    return "LG{}_LS{}_LC{}".format(*lengths)


def build_plan(config: RunConfig, plan: str) -> AblationPlan:
    ev = config.eval
    if plan == "prompts":
        unknown = set(ev.prompt_variants) - set(PROMPT_VARIANTS)
        if unknown:
            raise ParameterError(f"unknown prompt variants: {sorted(unknown)}")
        variants = {v: PROMPT_VARIANTS[v] for v in ev.prompt_variants}
    elif plan == "losses":
        unknown = set(ev.loss_variants) - set(LOSS_VARIANTS)
        if unknown:
            raise ParameterError(f"unknown loss variants: {sorted(unknown)}")
        variants = {v: LOSS_VARIANTS[v] for v in ev.loss_variants}
    elif plan == "lengths":
        base = (config.prompt.L_G, config.prompt.L_S, config.prompt.L_C)
        variants = {FULL: {}}
        for lengths in ev.length_sweep:
            if tuple(lengths) == base:
                continue
            variants[length_variant_name(lengths)] = dict(zip(("prompt.L_G", "prompt.L_S", "prompt.L_C"), lengths))
    elif plan == "seeds":
        # the unmodified config, once per seed
        variants = {FULL: {}}
    else:
        raise ParameterError(f"unknown ablation plan {plan!r}")
    return AblationPlan(plan, variants, list(ev.seeds))


def _flatten(data: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for key, value in data.items():
        path = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, path + "."))
        else:
            out[path] = value
    return out


def config_diff(a: RunConfig, b: RunConfig) -> set[str]:
    """Dotted leaf keys whose values differ between two configs."""
    fa, fb = _flatten(a.model_dump(mode="json")), _flatten(b.model_dump(mode="json"))
    return {k for k in fa.keys() | fb.keys() if fa.get(k) != fb.get(k)}


def variant_config(base: RunConfig, layout: RunLayout, plan: str, variant: str, overrides: dict, seed: int) -> RunConfig:
    data = base.model_dump(mode="json")
    data["seed"] = seed
    data["name"] = f"{base.name}/{plan}/{variant}/{seed}"
    data["io"]["run_dir"] = str(layout.variant_dir(plan, variant, seed))
    for dotted, value in overrides.items():
        section, key = dotted.split(".")
        data[section][key] = value
    return validate_run_config(data)


def check_variant_isolation(full: RunConfig, other: RunConfig, plan: str) -> None:
    """Variants of one plan may differ only in the plan's own keys."""
    allowed = PLAN_KEYS[plan] | {"name", "io.run_dir"}
    extra = config_diff(full, other) - allowed
    if extra:
        raise ParameterError(f"variant differs from the full config outside plan {plan!r}: {sorted(extra)}")


async def _run_variant(config: RunConfig, sources: list[RunLayout]) -> None:
    from ..worker.runner import PipelineRunner
    from .pipeline import import_shared

    target = RunLayout(config.resolved_run_dir())
    for source in sources:
        if await import_shared(source, target, config):
            break
    await PipelineRunner(config, resume=True, show_progress=False).run(VARIANT_STAGES)


async def _run_seed(base: RunConfig, plan: AblationPlan, seed: int) -> list[dict[str, Any]]:
    layout = RunLayout(base.resolved_run_dir())
    full_config = variant_config(base, layout, plan.name, FULL, {}, seed)
    rows = []
    for variant in plan.ordered_variants:
        config = variant_config(base, layout, plan.name, variant, plan.variants[variant], seed)
        check_variant_isolation(full_config, config, plan.name)
        sources = [layout] if variant == FULL else [RunLayout(full_config.resolved_run_dir()), layout]
        logger.info(f"Ablation {plan.name}: variant [cyan]{variant}[/cyan] seed {seed}")
        await _run_variant(config, sources)
        rows.extend(_variant_rows(config, plan.name, variant))
    return rows


def _seed_worker(base_json: dict, plan_name: str, seed: int) -> list[dict[str, Any]]:
    setup_logging(settings.log_level)
    base = validate_run_config(base_json)
    return asyncio.run(_run_seed(base, build_plan(base, plan_name), seed))


def _variant_rows(config: RunConfig, plan: str, variant: str) -> list[dict[str, Any]]:
    layout = RunLayout(config.resolved_run_dir())
    summary = pd.read_csv(layout.eval_dir / "summary.csv")
    gap = json.loads((layout.eval_dir / "gap.json").read_text(encoding="utf-8"))
    digest = config_hash(config)
    return [
        {
            "plan": plan,
            "variant": variant,
            "seed": config.seed,
            "agent": row["agent"],
            "domain": row["domain"],
            "split": row["split"],
            "mean_return": row["mean_return"],
            "arrival_rate": row["arrival_rate"],
            "raw_gap": gap["raw"]["gap"],
            "aligned_gap": gap["aligned"]["gap"],
            "config_hash": digest,
            "policy_sha256": row["policy_sha256"],
        }
        for _, row in summary.iterrows()
    ]


def run_plan(
    base: RunConfig,
    layout: RunLayout,
    plan_name: str,
    progress: Optional[Callable[[float, str], None]] = None,
) -> pd.DataFrame:
    """
    Run every variant of a plan for every seed.

    Seeds run in parallel processes when `settings.ablation_workers > 1`;
    variants of one seed always run in order.

    Returns:
        Long-form results: one row per (variant, seed, agent, domain)
    """
    plan = build_plan(base, plan_name)
    rows: list[dict[str, Any]] = []
    if settings.ablation_workers > 1 and len(plan.seeds) > 1:
        payload = base.model_dump(mode="json")
        payload["io"]["run_dir"] = str(layout.root)
        with ProcessPoolExecutor(max_workers=settings.ablation_workers) as pool:
            futures = [pool.submit(_seed_worker, payload, plan_name, seed) for seed in plan.seeds]
            for i, future in enumerate(futures):
                rows.extend(future.result())
                if progress:
                    progress((i + 1) / len(futures), f"seed {plan.seeds[i]}")
    else:
        for i, seed in enumerate(plan.seeds):
            rows.extend(asyncio.run(_run_seed(base, plan, seed)))
            if progress:
                progress((i + 1) / len(plan.seeds), f"seed {seed}")
    order = {v: i for i, v in enumerate(plan.ordered_variants)}
    frame = pd.DataFrame(rows)
    frame["_order"] = frame["variant"].map(order)
    frame = frame.sort_values(["_order", "seed", "agent", "split", "domain"], kind="stable").drop(columns="_order")
    return frame.reset_index(drop=True)
