"""
Report bundle: CSV tables, projection scatter data and a markdown summary.

Nothing time-dependent is written, so identical inputs give byte-identical
files.
"""
import json
import shutil
from pathlib import Path
from typing import Any, Optional

import pandas as pd
from jinja2 import Environment, FileSystemLoader, StrictUndefined

from ..config import RunConfig, config_hash
from ..utils.logger import get_logger

logger = get_logger(__name__)

TEMPLATES_DIR = Path(__file__).resolve().parent.parent / "templates"
REPORT_TEMPLATE = "report.md.j2"


def _fmt(value: Any, digits: int = 2) -> str:
    if isinstance(value, float):
        return "nan" if value != value else f"{value:.{digits}f}"
    return str(value)


def _environment() -> Environment:
    env = Environment(
        loader=FileSystemLoader(str(TEMPLATES_DIR)),
        undefined=StrictUndefined,
        keep_trailing_newline=True,
        trim_blocks=True,
        lstrip_blocks=True,
    )
    env.filters["fmt"] = _fmt
    return env


def _write_csv(frame: pd.DataFrame, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.6f", lineterminator="\n")
    return path


def _domain_order(config: RunConfig) -> list[str]:
    return list(config.world.seen_domains) + list(config.world.unseen_domains)


# ============================================================================
# Tables
# ============================================================================

def transfer_table(summary: pd.DataFrame, config: RunConfig, digest: str) -> pd.DataFrame:
    """
    Mean return per agent and domain, seen domains first.

    One row per agent, with seen/unseen means, their ratio, the seed and
    the hashes that produced the row.
    """
    domains = _domain_order(config)
    seen, unseen = config.world.seen_domains, config.world.unseen_domains
    rows = []
    for agent, group in summary.groupby("agent", sort=False):
        returns = dict(zip(group["domain"], group["mean_return"]))
        seen_mean = float(pd.Series([returns[d] for d in seen]).mean())
        unseen_mean = float(pd.Series([returns[d] for d in unseen]).mean()) if unseen else float("nan")
        rows.append({
            "agent": agent,
            **{d: returns[d] for d in domains},
            "seen_mean": seen_mean,
            "unseen_mean": unseen_mean,
            "unseen_over_seen": unseen_mean / seen_mean if seen_mean else float("nan"),
            "seeds": str(config.seed),
            "policy_sha256": group["policy_sha256"].iloc[0],
            "config_hash": digest,
        })
    return pd.DataFrame(rows)


def ablation_table(results: pd.DataFrame, config: RunConfig) -> pd.DataFrame:
    """
    Variant x domain mean return averaged over seeds.

    `best_unseen_seeds` counts the seeds in which a variant had the highest
    unseen-domain mean among all variants.
    """
    domains = _domain_order(config)
    results = results[results["agent"] == "pva"]
    unseen = results[results["split"] == "unseen"]
    per_seed = unseen.groupby(["seed", "variant"], sort=False)["mean_return"].mean().reset_index()
    winners = per_seed.loc[per_seed.groupby("seed")["mean_return"].idxmax(), "variant"].value_counts()

    rows = []
    for variant, group in results.groupby("variant", sort=False):
        means = group.groupby("domain")["mean_return"].mean()
        split_means = group.groupby("split")["mean_return"].mean()
        rows.append({
            "variant": variant,
            **{d: float(means.get(d, float("nan"))) for d in domains},
            "seen_mean": float(split_means.get("seen", float("nan"))),
            "unseen_mean": float(split_means.get("unseen", float("nan"))),
            "best_unseen_seeds": int(winners.get(variant, 0)),
            "seeds": ";".join(str(s) for s in sorted(group["seed"].unique())),
            "config_hashes": ";".join(sorted(group["config_hash"].unique())),
            "policy_sha256": ";".join(sorted(group["policy_sha256"].unique())),
        })
    return pd.DataFrame(rows)


def gap_table(gap: dict[str, Any], config: RunConfig, digest: str) -> pd.DataFrame:
    rows = []
    raw = gap["raw"]
    for path in ("raw", "aligned"):
        entry = gap[path]
        rows.append({
            "path": path,
            "metric": gap["metric"],
            "space": gap["space"],
            "gap": entry["gap"],
            "seen_gap": entry["seen_gap"],
            "unseen_gap": entry["unseen_gap"],
            "seen_ratio_to_raw": entry["seen_gap"] / raw["seen_gap"] if raw["seen_gap"] else float("nan"),
            "seeds": str(config.seed),
            "config_hash": digest,
            "encoder_sha256": gap["encoder_sha256"],
            "aligner_sha256": gap["aligner_sha256"] if path == "aligned" else "",
        })
    return pd.DataFrame(rows)


def seed_transfer_table(results: pd.DataFrame) -> pd.DataFrame:
    """
    One row per seed: PVA and control mean returns on seen and unseen
    domains, the PVA-minus-control margin on unseen domains and the gaps
    measured in that seed's run.

    The margin is NaN when the run trained no control agent.
    """
    rows = []
    for seed, group in results.groupby("seed", sort=True):
        means = group.groupby(["agent", "split"])["mean_return"].mean()
        hashes = group.groupby("agent")["policy_sha256"].first()

        def mean(agent: str, split: str) -> float:
            return float(means.get((agent, split), float("nan")))

        pva_seen, pva_unseen = mean("pva", "seen"), mean("pva", "unseen")
        control_unseen = mean("control", "unseen")
        first = group.iloc[0]
        rows.append({
            "seed": int(seed),
            "pva_seen_mean": pva_seen,
            "pva_unseen_mean": pva_unseen,
            "control_seen_mean": mean("control", "seen"),
            "control_unseen_mean": control_unseen,
            "pva_minus_control": pva_unseen - control_unseen,
            "unseen_over_seen": pva_unseen / pva_seen if pva_seen else float("nan"),
            "raw_gap": float(first["raw_gap"]),
            "aligned_gap": float(first["aligned_gap"]),
            "config_hash": first["config_hash"],
            "pva_policy_sha256": hashes.get("pva", ""),
            "control_policy_sha256": hashes.get("control", ""),
        })
    return pd.DataFrame(rows)


# ============================================================================
# Bundle
# ============================================================================

def _records(frame: pd.DataFrame) -> list[dict[str, Any]]:
    return frame.to_dict(orient="records")


def emit_report(ctx) -> dict[str, Path]:
    """Write report.md, tables/*.csv and projections/*.csv for one run."""
    config: RunConfig = ctx.config
    report_dir = ctx.layout.report_dir
    digest = config_hash(config)
    outputs: dict[str, Path] = {}

    summary = pd.read_csv(ctx.input("summary"))
    transfer = transfer_table(summary, config, digest)
    outputs["table_transfer"] = _write_csv(transfer, report_dir / "tables" / "transfer.csv")

    gap = json.loads(ctx.input("gap").read_text(encoding="utf-8"))
    gaps = gap_table(gap, config, digest)
    outputs["table_gap"] = _write_csv(gaps, report_dir / "tables" / "gap.csv")

    for label in ("raw", "aligned"):
        name = f"projection_{label}"
        if ctx.has_input(name):
            target = report_dir / "projections" / f"{label}.csv"
            target.parent.mkdir(parents=True, exist_ok=True)
            shutil.copyfile(ctx.input(name), target)
            outputs[f"report_{name}"] = target

    attribution: Optional[pd.DataFrame] = None
    if ctx.has_input("attribution"):
        attribution = pd.read_csv(ctx.input("attribution"))

    ablations = {}
    for plan in ("prompts", "losses", "lengths"):
        name = f"ablation_{plan}"
        if ctx.has_input(name):
            table = ablation_table(pd.read_csv(ctx.input(name)), config)
            outputs[f"table_{name}"] = _write_csv(table, report_dir / "tables" / f"{name}.csv")
            ablations[plan] = _records(table)

    seeds: list[dict[str, Any]] = []
    if ctx.has_input("ablation_seeds"):
        table = seed_transfer_table(pd.read_csv(ctx.input("ablation_seeds")))
        outputs["table_transfer_seeds"] = _write_csv(table, report_dir / "tables" / "transfer_seeds.csv")
        seeds = _records(table)

    history = json.loads(ctx.input("policy_history").read_text(encoding="utf-8"))
    template = _environment().get_template(REPORT_TEMPLATE)
    text = template.render(
        name=config.name,
        seed=config.seed,
        config_hash=digest,
        artifacts=dict(sorted(ctx.digests.items())),
        seen=config.world.seen_domains,
        unseen=config.world.unseen_domains,
        target=config.target_domain.name,
        transfer=_records(transfer),
        gap=_records(gaps),
        random_baseline=history.get("random_baseline_mean"),
        attribution=_records(attribution) if attribution is not None else [],
        ablations=ablations,
        seed_transfer=seeds,
    )
    path = report_dir / "report.md"
    path.write_text(text, encoding="utf-8")
    outputs["report"] = path
    logger.info(f"Report written to {path}")
    return outputs
