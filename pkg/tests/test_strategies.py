#!/usr/bin/env python3
"""
Strategy and harness tests on the miniature experiment.
"""

import json
import sys
from pathlib import Path

import pandas as pd
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from conftest import tiny_spec
from bowda.strategies import (
    FROM_SOURCE,
    LOSS_COMBINATIONS,
    RESAMPLED,
    compare_strategies,
    effective_spec,
    run_architecture_ablation,
    run_loss_ablation,
    run_strategy,
)
from utils.config_validator import STRATEGIES, load_experiment_spec
from utils.threads import resolve_threads


def test_strategy_tables_are_consistent():
    assert RESAMPLED <= set(STRATEGIES) and FROM_SOURCE <= set(STRATEGIES)
    assert "target_only" not in FROM_SOURCE
    assert len(set(LOSS_COMBINATIONS)) == 4


def test_adapt_ce_pins_plain_losses():
    spec = effective_spec(tiny_spec("adapt_ce"))
    assert (spec.adversarial.seg_loss, spec.adversarial.disc_loss) == ("ce", "ce")
    untouched = effective_spec(tiny_spec("adapt_bowda"))
    assert (untouched.adversarial.seg_loss, untouched.adversarial.disc_loss) == ("bwsl", "bwtl")


@pytest.mark.slow
def test_target_only_run_writes_report(tmp_path):
    messages = []
    report = run_strategy(tiny_spec("target_only"), tmp_path, log_callback=messages.append)
    for name in ("spec.json", "preprocessing.log", "metrics.csv", "run.log", "snet_t.ckpt", "snet_t_log.csv"):
        assert (tmp_path / name).exists(), name
    assert not (tmp_path / "snet_s.ckpt").exists(), "target_only never trains SNet-s"
    assert report.source_checkpoint is None
    assert len(report.analyzer.region("whole")) == 2
    assert 0.0 <= report.mean_dsc <= 100.0
    assert messages and messages[0].startswith("strategy target_only")
    assert (tmp_path / "run.log").read_text(encoding="utf-8").splitlines() == messages


@pytest.mark.slow
def test_adapt_ce_run(tmp_path):
    report = run_strategy(tiny_spec("adapt_ce"), tmp_path)
    saved = json.loads((tmp_path / "spec.json").read_text(encoding="utf-8"))
    assert saved["adversarial"]["seg_loss"] == "ce" and saved["adversarial"]["disc_loss"] == "ce"
    assert report.source_checkpoint == tmp_path / "snet_s_best.ckpt"
    assert "disc_loss" in pd.read_csv(tmp_path / "snet_t_log.csv").columns


@pytest.mark.slow
def test_reused_source_checkpoint_is_not_retrained(tmp_path):
    first = run_strategy(tiny_spec("finetune"), tmp_path / "first")
    second = run_strategy(tiny_spec("finetune"), tmp_path / "second", source_checkpoint=first.source_checkpoint)
    assert second.source_checkpoint == first.source_checkpoint
    assert not (tmp_path / "second" / "snet_s.ckpt").exists()
    assert second.analyzer.values("dsc").tolist() == first.analyzer.values("dsc").tolist()


@pytest.mark.slow
def test_resampled_strategy_logs_preprocessing(tmp_path):
    report = run_strategy(tiny_spec("mix_resampled"), tmp_path)
    assert any(step.startswith("resample source") for step in report.steps)


# ── Harnesses ──

@pytest.mark.slow
def test_compare_strategies(tmp_path):
    frame = compare_strategies(tiny_spec(), tmp_path, ["target_only", "finetune"], reference="finetune")
    assert frame["strategy"].tolist() == ["target_only", "finetune"]
    assert {"mean_dsc", "std_dsc", "t", "p", "significant", "min", "median", "max"} <= set(frame.columns)
    assert (tmp_path / "comparison.csv").exists()
    assert pd.isna(frame.loc[frame["strategy"] == "finetune", "t"]).all()


@pytest.mark.slow
def test_loss_ablation_shares_source_network(tmp_path):
    summary = run_loss_ablation(tiny_spec(), tmp_path, seeds=[0])
    assert list(zip(summary["seg_loss"], summary["disc_loss"])) == list(LOSS_COMBINATIONS)
    trained = sorted(p.parent.name for p in tmp_path.rglob("snet_s.ckpt"))
    assert trained == ["ce_ce"], "SNet-s is trained once per seed"
    assert (tmp_path / "loss_ablation.csv").exists()


@pytest.mark.slow
def test_architecture_ablation(tmp_path):
    frame = run_architecture_ablation(tiny_spec(), tmp_path, presets=["fcn", "snet"])
    assert frame["preset"].tolist() == ["fcn", "snet"]
    assert frame.loc[0, ["dense", "residual", "long_connections"]].tolist() == [False, False, False]
    assert (tmp_path / "arch_ablation.csv").exists()


DESK_SPEC = Path(__file__).parent.parent / "configs" / "experiments" / "desk_bowda.json"


@pytest.mark.slow
@pytest.mark.benchmark
def test_boundary_weighted_adaptation_wins_on_phantoms(tmp_path):
    spec = load_experiment_spec(str(DESK_SPEC))
    frame = compare_strategies(spec, tmp_path, ["target_only", "adapt_ce", "adapt_bowda"],
                               reference="adapt_bowda", seeds=[0, 1, 2], workers=resolve_threads())
    dsc = frame.set_index("strategy")["mean_dsc"]
    assert dsc["adapt_bowda"] >= dsc["adapt_ce"] + 1.0, dsc.to_dict()
    assert dsc["adapt_bowda"] >= dsc["target_only"] + 1.0, dsc.to_dict()


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
