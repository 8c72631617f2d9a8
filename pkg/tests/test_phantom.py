#!/usr/bin/env python3
"""
Phantom generator and dataset loading tests.

Covers:
1. Determinism and shape statistics of generated phantoms
2. Domain presets: source boundaries sharper than target ones
3. gen_dataset manifests and their train/val split
4. prepare_data preprocessing steps
"""

import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from conftest import tiny_spec
from bowda.boundary import compare_domain_boundaries
from bowda.dataset import load_manifest_cases, prepare_data
from bowda.phantom import foreground_fraction_bounds, gen_dataset, gen_phantom, preset, split_counts
from utils.config_validator import DomainSpec


def _plain(**updates) -> DomainSpec:
    base = dict(name="plain", dims=[20, 24, 24], spacing=[1.0, 1.0, 1.0], radius_range=[5.0, 7.0],
                blur_sigma=0.0, noise_sigma=0.0, texture_amplitude=0.0, seed=4)
    base.update(updates)
    return DomainSpec(**base)


# ── Generator ──

def test_phantom_is_deterministic():
    spec = preset("target")
    a_img, a_mask = gen_phantom(spec, 3)
    b_img, b_mask = gen_phantom(spec, 3)
    assert np.array_equal(a_img.values, b_img.values)
    assert np.array_equal(a_mask.values, b_mask.values)
    c_img, _ = gen_phantom(spec, 4)
    assert not np.array_equal(a_img.values, c_img.values)
    assert a_img.spacing == tuple(spec.spacing)


def test_clean_phantom_has_two_levels():
    img, mask = gen_phantom(_plain(), 0)
    levels = np.unique(img.values)
    assert len(levels) == 2
    assert np.all(img.values[mask.foreground] == levels.max())
    assert np.all(img.values[~mask.foreground] == levels.min())


def test_shape_ignores_appearance_settings():
    _, clean = gen_phantom(_plain(), 2)
    _, noisy = gen_phantom(_plain(blur_sigma=1.5, noise_sigma=0.2, texture_amplitude=0.1), 2)
    assert np.array_equal(clean.values, noisy.values)


def test_foreground_fraction_within_bounds():
    spec = preset("source")
    lo, hi = foreground_fraction_bounds(spec)
    for i in range(10):
        _, mask = gen_phantom(spec, i)
        fraction = mask.count / mask.values.size
        assert lo <= fraction <= hi, f"case {i}: fraction {fraction:.4f} outside [{lo:.4f}, {hi:.4f}]"


def test_images_are_normalized():
    img, _ = gen_phantom(preset("target"), 0)
    values = img.values.astype(np.float64)
    assert abs(values.mean()) < 1e-5 and abs(values.std() - 1.0) < 1e-5


def test_oversized_radius_is_rejected():
    with pytest.raises(ValueError):
        _plain(dims=[12, 24, 24])


# ── Domain presets ──

def _domain_pairs(name, count, seed=None):
    spec = preset(name)
    if seed is not None:
        spec = spec.model_copy(update={"seed": seed})
    return [gen_phantom(spec, i) for i in range(count)]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_source_boundaries_are_sharper(seed):
    src, tgt = _domain_pairs("source", 6, seed), _domain_pairs("target", 6, seed)
    hist_src, hist_tgt = compare_domain_boundaries([v for v, _ in src], [m for _, m in src],
                                                   [v for v, _ in tgt], [m for _, m in tgt])
    assert hist_src.mean_magnitude > hist_tgt.mean_magnitude


def _background_spread(vol) -> float:
    values = np.sort(vol.values.reshape(-1))
    lower = values[: values.size // 2]
    q1, q3 = np.percentile(lower, [25, 75])
    return float(q3 - q1)


def test_domains_are_separable_by_background_texture():
    src = [_background_spread(v) for v, _ in _domain_pairs("source", 10)]
    tgt = [_background_spread(v) for v, _ in _domain_pairs("target", 10)]
    threshold = (np.mean(src) + np.mean(tgt)) / 2
    correct = sum(s < threshold for s in src) + sum(t >= threshold for t in tgt)
    assert correct / 20 > 0.8


# ── Datasets on disk ──

def test_split_counts():
    assert split_counts(18, 1 / 3) == (12, 6)
    assert split_counts(5, 0.5) == (2, 3)
    assert split_counts(4, 0.0) == (4, 0)
    with pytest.raises(ValueError):
        split_counts(4, 1.5)


def test_gen_dataset_manifest(tmp_path):
    spec = tiny_spec().dataset.target.phantom
    manifest = gen_dataset(spec, 4, tmp_path / "target", val_fraction=0.5, workers=2)
    on_disk = json.loads((tmp_path / "target" / "manifest.json").read_text())
    assert on_disk == manifest
    assert manifest["split"] == {"train": 2, "val": 2}
    assert [c["split"] for c in manifest["cases"]] == ["train", "train", "val", "val"]

    domain, train, val = load_manifest_cases(tmp_path / "target" / "manifest.json")
    assert domain == "target"
    assert [c.case_id for c in train] == ["target_000", "target_001"]
    assert [c.case_id for c in val] == ["target_002", "target_003"]
    img, mask = gen_phantom(spec, 2)
    assert np.array_equal(val[0].image.values, img.values)
    assert np.array_equal(val[0].mask.values, mask.values)
    assert val[0].image.spacing == img.spacing


def test_gen_dataset_rejects_empty(tmp_path):
    with pytest.raises(ValueError):
        gen_dataset(preset("source"), 0, tmp_path)


# ── Preprocessing ──

def test_prepare_data_target_only_skips_source():
    data = prepare_data(tiny_spec("target_only"))
    assert data.source is None
    assert len(data.target.train) == 3 and len(data.target.val) == 2
    assert data.steps[0].startswith("load target")


def test_prepare_data_resamples_source_on_request():
    spec = tiny_spec("mix_resampled")
    direct = prepare_data(spec)
    resampled = prepare_data(spec, resample_source=True)
    assert direct.source.spacing == (1.5, 1.0, 1.0)
    assert resampled.source.spacing == (1.0, 1.0, 1.0)
    assert resampled.source.train[0].image.dims == (24, 16, 16)
    assert any(step.startswith("resample source") for step in resampled.steps)
    assert not any(step.startswith("resample source") for step in direct.steps)
    values = resampled.source.train[0].image.values.astype(np.float64)
    assert abs(values.mean()) < 1e-5, "resampled images are renormalized"


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
