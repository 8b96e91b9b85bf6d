import pytest

from app.cli import build_parser, main, stages_for
from app.config import load_run_config


def test_parser_accepts_stage_commands():
    args = build_parser().parse_args(["train-aligner", "--set", "aligner.lambda_patch=1.0", "--seed", "3", "--resume"])
    assert args.command == "train-aligner"
    assert args.overrides == ["aligner.lambda_patch=1.0"]
    assert args.seed == 3
    assert args.resume


def test_ablate_needs_a_known_plan():
    assert build_parser().parse_args(["ablate", "--plan", "losses"]).plan == "losses"
    with pytest.raises(SystemExit):
        build_parser().parse_args(["ablate", "--plan", "colors"])


def test_stages_for_pipeline():
    config = load_run_config()
    assert stages_for("pipeline", config) == [
        "gen-data", "pretrain-vlm", "tune-prompts", "train-aligner", "train-policy", "evaluate", "report",
    ]
    with_plan = load_run_config(overrides=["eval.ablation_plans=[prompts]"])
    assert stages_for("pipeline", with_plan)[-2:] == ["ablate-prompts", "report"]
    assert stages_for("ablate", config, "lengths") == ["ablate-lengths"]
    assert stages_for("evaluate", config) == ["evaluate"]


def test_bad_override_exits_with_config_error():
    assert main(["gen-data", "--set", "prompt.L_C"]) == 2
    assert main(["gen-data", "--set", "world.resolution=17"]) == 2


def test_missing_upstream_exits_with_missing_artifact(tmp_path):
    assert main(["train-aligner", "--set", f"io.run_dir={tmp_path / 'run'}"]) == 3


def test_orphans_exit_code(tmp_path):
    run_dir = tmp_path / "run"
    run_dir.mkdir()
    assert main(["orphans", "--set", f"io.run_dir={run_dir}"]) == 0
    (run_dir / "stray.txt").write_text("x", encoding="utf-8")
    assert main(["orphans", "--set", f"io.run_dir={run_dir}"]) == 1
