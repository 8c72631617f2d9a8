#!/usr/bin/env python3
"""
Configuration tests: shipped experiment files, domain presets, dotted
overrides and validation errors.
"""

import sys
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

sys.path.insert(0, str(Path(__file__).parent.parent))

from conftest import tiny_spec, tiny_spec_data
from utils.config_validator import (
    SNET_PRESETS,
    CropSpec,
    DataSource,
    ExperimentSpec,
    SNetConfig,
    WindowSpec,
    apply_overrides,
    config_digest,
    default_domains_path,
    format_validation_error,
    load_domain_presets,
    load_experiment_spec,
    parse_override,
)
from utils.threads import resolve_threads
from utils.validation import validate_crop_fits, validate_mask_array, validate_volume_array

CONFIG_DIR = Path(__file__).parent.parent / "configs" / "experiments"


def test_shipped_experiments_validate():
    files = sorted(CONFIG_DIR.glob("*.json"))
    assert {f.stem for f in files} >= {"desk_bowda", "loss_ablation", "arch_ablation", "full_scale"}
    for path in files:
        spec = load_experiment_spec(str(path))
        assert spec.name, f"{path.name} has no name"


def test_domain_presets():
    presets = load_domain_presets(str(default_domains_path()))
    assert set(presets) == {"source", "target"}
    assert presets["source"].blur_sigma < presets["target"].blur_sigma
    assert presets["source"].name == "source"


def test_parse_override_decodes_json():
    assert parse_override("sgd.lr=0.5") == ("sgd.lr", 0.5)
    assert parse_override("crop.dims=[8,16,16]") == ("crop.dims", [8, 16, 16])
    assert parse_override("name=run one") == ("name", "run one")
    with pytest.raises(ValueError):
        parse_override("no_equals_sign")


def test_overrides_apply_before_validation():
    data = apply_overrides(tiny_spec_data(), ["sgd.batch_size=4", "adversarial.adv_weight=0"])
    spec = ExperimentSpec.model_validate(data)
    assert spec.sgd.batch_size == 4
    assert spec.adversarial.adv_weight == 0.0


def test_with_strategy_revalidates():
    spec = tiny_spec()
    other = spec.with_strategy("adapt_ce", adversarial__seg_loss="ce")
    assert other.strategy == "adapt_ce" and other.adversarial.seg_loss == "ce"
    assert spec.strategy == "adapt_bowda", "the original spec is unchanged"
    with pytest.raises(ValidationError):
        spec.with_strategy("not_a_strategy")


def test_strategy_requires_source():
    data = tiny_spec_data("finetune")
    data["dataset"]["source"] = None
    with pytest.raises(ValidationError) as info:
        ExperimentSpec.model_validate(data)
    assert "requires a source" in format_validation_error(info.value)
    data["strategy"] = "target_only"
    assert ExperimentSpec.model_validate(data).dataset.source is None


def test_target_needs_validation_cases():
    data = tiny_spec_data()
    data["dataset"]["target"]["val_count"] = 0
    with pytest.raises(ValidationError):
        ExperimentSpec.model_validate(data)


def test_unknown_keys_are_rejected():
    data = tiny_spec_data()
    data["sgd"]["learning_rate"] = 0.1
    with pytest.raises(ValidationError):
        ExperimentSpec.model_validate(data)


def test_section_validators():
    with pytest.raises(ValidationError):
        CropSpec(dims=[8, 30, 32])
    assert WindowSpec(dims=[8, 32, 32]).stride == [4, 16, 16]
    with pytest.raises(ValidationError):
        WindowSpec(dims=[8, 32, 32], stride=[16, 16, 16])
    with pytest.raises(ValidationError):
        DataSource()
    with pytest.raises(ValidationError):
        SNetConfig(down_layers=[2, 2])


def test_presets_set_connection_flags():
    for name, (dense, residual, long_conn) in SNET_PRESETS.items():
        cfg = SNetConfig(preset=name)
        assert (cfg.dense_connections, cfg.residual_connections, cfg.long_connections) == (dense, residual, long_conn)


def test_digest_tracks_content():
    a, b = tiny_spec(), tiny_spec()
    assert config_digest(a) == config_digest(b)
    assert config_digest(a.snet) != config_digest(a.with_strategy("adapt_bowda", snet__growth=3).snet)
    assert len(config_digest(a)) == 64


def test_resolve_threads(monkeypatch):
    monkeypatch.delenv("BOWDA_THREADS", raising=False)
    assert resolve_threads(3) == 3
    monkeypatch.setenv("BOWDA_THREADS", "2")
    assert resolve_threads(None) == 2
    with pytest.raises(ValueError):
        resolve_threads(0)


def test_validation_helpers():
    ok, issues = validate_volume_array(np.zeros((2, 2, 2)), (1.0, 1.0, 1.0))
    assert ok and issues == []
    ok, issues = validate_volume_array(np.array([[[np.nan]]]), (1.0, 1.0, 1.0))
    assert not ok and issues
    ok, _ = validate_mask_array(np.array([[[0, 2]]]))
    assert not ok
    ok, issues = validate_crop_fits((8, 16, 16), (16, 16, 16))
    assert not ok and issues


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
