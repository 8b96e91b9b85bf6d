"""
Command-line interface.

    python scripts/run_pipeline.py pipeline --config configs/default.yaml --seed 1
    python scripts/run_pipeline.py train-aligner --set aligner.lambda_patch=1.0 --resume
    python scripts/run_pipeline.py ablate --plan prompts

Exit codes: 0 success, 2 config error, 3 missing artifact, 4 training divergence.
"""
import argparse
import asyncio
from pathlib import Path
from typing import Optional, Sequence

import torch

from .config import load_run_config, settings
from .engine.pipeline import ABLATION_PLANS, PIPELINE_STAGES, ablation_stage, orphans
from .middleware.error_handler import PipelineError
from .utils.logger import console, get_logger, setup_logging
from .worker.runner import PipelineRunner

logger = get_logger(__name__)

SINGLE_STAGES = PIPELINE_STAGES


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pva",
        description="Prompt-based visual alignment pipeline for zero-shot policy transfer",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, default=None, help="YAML run config (defaults apply when omitted)")
    common.add_argument("--seed", type=int, default=None, help="Override the config seed")
    common.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="Override a config leaf, e.g. --set prompt.L_C=5 (repeatable)",
    )
    common.add_argument("--resume", action="store_true", help="Skip stages whose manifest entry still matches")
    common.add_argument("--log-level", default=None, help="Logging level (default from PVA_LOG_LEVEL)")

    sub = parser.add_subparsers(dest="command", required=True)
    for stage in SINGLE_STAGES:
        sub.add_parser(stage, parents=[common], help=f"Run the {stage} stage")
    ablate = sub.add_parser("ablate", parents=[common], help="Run an ablation plan")
    ablate.add_argument("--plan", choices=ABLATION_PLANS, required=True)
    sub.add_parser("pipeline", parents=[common], help="Run every stage in order")
    sub.add_parser("orphans", parents=[common], help="List files no manifest entry accounts for")
    return parser


def stages_for(command: str, config, plan: Optional[str] = None) -> list[str]:
    if command == "pipeline":
        plans = [ablation_stage(p) for p in config.eval.ablation_plans]
        return list(PIPELINE_STAGES[:-1]) + plans + [PIPELINE_STAGES[-1]]
    if command == "ablate":
        return [ablation_stage(plan)]
    return [command]


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level or settings.log_level)
    if settings.num_threads:
        torch.set_num_threads(settings.num_threads)

    try:
        config = load_run_config(args.config, args.overrides, args.seed)
        if args.command == "orphans":
            found = asyncio.run(orphans(config.resolved_run_dir()))
            for path in found:
                console.print(path)
            logger.info(f"{len(found)} orphaned files")
            return 0 if not found else 1
        stages = stages_for(args.command, config, getattr(args, "plan", None))
        runner = PipelineRunner(config, resume=args.resume)
        outcome = asyncio.run(runner.run(stages))
        for stage, result in outcome.items():
            logger.info(f"{stage}: {result}")
        return 0
    except PipelineError as exc:
        console.print(f"[error]{type(exc).__name__}:[/error] {exc.message}")
        return exc.exit_code
    except KeyboardInterrupt:
        console.print("\nStopped by user.")
        return 130
