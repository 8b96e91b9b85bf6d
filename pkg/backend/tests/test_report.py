import json

import pandas as pd
import pytest

from app.config import config_hash
from app.engine.pipeline import StageContext
from app.engine.report import ablation_table, emit_report, gap_table, seed_transfer_table, transfer_table
from app.storage.paths import RunLayout

RETURNS = {
    "ClearNoon": 10.0,
    "HardRainNoon": 6.0,
    "ClearSunset": 4.0,
    "WetCloudySunset": 3.0,
    "SoftRainSunset": 5.0,
}
SEEN = {"ClearNoon", "HardRainNoon"}


def _summary() -> pd.DataFrame:
    rows = []
    for agent, shift in (("pva", 0.0), ("control", -2.0)):
        for domain, value in RETURNS.items():
            rows.append({
                "agent": agent,
                "domain": domain,
                "split": "seen" if domain in SEEN else "unseen",
                "mean_return": value + shift,
                "arrival_rate": 0.5,
                "seed": 0,
                "policy_sha256": f"{agent}-sha",
            })
    return pd.DataFrame(rows)


def _gap() -> dict:
    return {
        "metric": "energy",
        "space": "policy",
        "raw": {"gap": 3.0, "seen_gap": 2.0, "unseen_gap": 4.0},
        "aligned": {"gap": 1.5, "seen_gap": 1.0, "unseen_gap": 2.0},
        "encoder_sha256": "e" * 64,
        "aligner_sha256": "a" * 64,
    }


def _ablation() -> pd.DataFrame:
    rows = []
    unseen_returns = {("full", 0): 5.0, ("full", 1): 3.0, ("no_patch", 0): 4.0, ("no_patch", 1): 6.0}
    for (variant, seed), value in unseen_returns.items():
        for domain, split, ret in (("ClearNoon", "seen", 9.0), ("ClearSunset", "unseen", value)):
            for agent, shift in (("pva", 0.0), ("control", 50.0)):
                rows.append({
                    "plan": "losses", "variant": variant, "seed": seed, "agent": agent, "domain": domain,
                    "split": split, "mean_return": ret + shift, "arrival_rate": 0.0,
                    "raw_gap": 3.0, "aligned_gap": 1.5,
                    "config_hash": f"h{seed}", "policy_sha256": f"{agent}{variant}{seed}",
                })
    return pd.DataFrame(rows)


def test_transfer_table(run_config):
    table = transfer_table(_summary(), run_config, "digest")
    pva = table[table["agent"] == "pva"].iloc[0]
    assert list(table["agent"]) == ["pva", "control"]
    assert pva["seen_mean"] == pytest.approx(8.0)
    assert pva["unseen_mean"] == pytest.approx(4.0)
    assert pva["unseen_over_seen"] == pytest.approx(0.5)
    assert pva["policy_sha256"] == "pva-sha"
    assert pva["config_hash"] == "digest"


def test_ablation_table_counts_winning_seeds(run_config):
    table = ablation_table(_ablation(), run_config).set_index("variant")
    assert table.loc["full", "unseen_mean"] == pytest.approx(4.0)
    assert table.loc["no_patch", "unseen_mean"] == pytest.approx(5.0)
    assert table.loc["full", "best_unseen_seeds"] == 1
    assert table.loc["no_patch", "best_unseen_seeds"] == 1
    assert table.loc["full", "seeds"] == "0;1"
    assert table.loc["full", "ClearNoon"] == pytest.approx(9.0)


def test_gap_table_ratio_to_raw(run_config):
    table = gap_table(_gap(), run_config, "digest").set_index("path")
    assert table.loc["raw", "seen_ratio_to_raw"] == pytest.approx(1.0)
    assert table.loc["aligned", "seen_ratio_to_raw"] == pytest.approx(0.5)


def test_gap_table_carries_artifact_digests(run_config):
    table = gap_table(_gap(), run_config, "digest").set_index("path")
    assert (table["encoder_sha256"] == "e" * 64).all()
    assert table.loc["aligned", "aligner_sha256"] == "a" * 64
    assert table.loc["raw", "aligner_sha256"] == ""


def _seed_runs() -> pd.DataFrame:
    # seed 0: PVA ahead of the control on unseen domains, seed 1: behind
    unseen = {(0, "pva"): 5.0, (0, "control"): 3.0, (1, "pva"): 4.0, (1, "control"): 6.0}
    rows = []
    for (seed, agent), value in unseen.items():
        for domain, split, ret in (("ClearNoon", "seen", 10.0), ("ClearSunset", "unseen", value)):
            rows.append({
                "plan": "seeds", "variant": "full", "seed": seed, "agent": agent, "domain": domain,
                "split": split, "mean_return": ret, "arrival_rate": 0.0,
                "raw_gap": 3.0 + seed, "aligned_gap": 1.0 + seed,
                "config_hash": f"h{seed}", "policy_sha256": f"{agent}{seed}",
            })
    return pd.DataFrame(rows)


def test_seed_transfer_table_reports_margin_per_seed():
    table = seed_transfer_table(_seed_runs()).set_index("seed")
    assert list(table.index) == [0, 1]
    assert table.loc[0, "pva_minus_control"] == pytest.approx(2.0)
    assert table.loc[1, "pva_minus_control"] == pytest.approx(-2.0)
    assert table.loc[0, "unseen_over_seen"] == pytest.approx(0.5)
    assert table.loc[1, "aligned_gap"] == pytest.approx(2.0)
    assert table.loc[1, "control_policy_sha256"] == "control1"


def test_seed_transfer_table_without_control():
    runs = _seed_runs()
    table = seed_transfer_table(runs[runs["agent"] == "pva"])
    assert table["pva_minus_control"].isna().all()
    assert (table["control_policy_sha256"] == "").all()


@pytest.fixture
def report_ctx(run_config, tmp_path) -> StageContext:
    inputs_dir = tmp_path / "inputs"
    inputs_dir.mkdir()
    summary = inputs_dir / "summary.csv"
    _summary().to_csv(summary, index=False)
    gap = inputs_dir / "gap.json"
    gap.write_text(json.dumps(_gap()), encoding="utf-8")
    history = inputs_dir / "policy_history.json"
    history.write_text(json.dumps({"random_baseline_mean": -12.5}), encoding="utf-8")
    projection = inputs_dir / "projection_raw.csv"
    projection.write_text("domain,x,y\nClearNoon,0.1,0.2\n", encoding="utf-8")
    ablation = inputs_dir / "ablation_losses.csv"
    _ablation().to_csv(ablation, index=False)
    seeds = inputs_dir / "ablation_seeds.csv"
    _seed_runs().to_csv(seeds, index=False)
    return StageContext(
        config=run_config,
        layout=RunLayout(run_config.resolved_run_dir()),
        stage="report",
        inputs={
            "summary": summary, "gap": gap, "policy_history": history,
            "projection_raw": projection, "ablation_losses": ablation, "ablation_seeds": seeds,
        },
        digests={"summary": "s" * 64, "gap": "g" * 64},
    )


def test_emit_report_bundle(report_ctx, run_config):
    outputs = emit_report(report_ctx)
    report_dir = report_ctx.layout.report_dir
    assert outputs["report"] == report_dir / "report.md"
    assert (report_dir / "tables" / "transfer.csv").exists()
    assert (report_dir / "tables" / "gap.csv").exists()
    assert (report_dir / "tables" / "ablation_losses.csv").exists()
    assert (report_dir / "tables" / "transfer_seeds.csv").exists()
    assert (report_dir / "projections" / "raw.csv").exists()
    assert "report_projection_aligned" not in outputs

    text = outputs["report"].read_text(encoding="utf-8")
    assert config_hash(run_config) in text
    assert "## Ablation: losses" in text
    assert "### Per seed" in text
    assert "## Ablation: seeds" not in text
    assert "-12.50" in text
    assert "## Attribution" not in text


def test_emit_report_is_byte_stable(report_ctx):
    first = {name: path.read_bytes() for name, path in emit_report(report_ctx).items()}
    second = {name: path.read_bytes() for name, path in emit_report(report_ctx).items()}
    assert first == second
