"""
Shared fixtures: a miniature two-domain experiment that trains in seconds.
"""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from utils.config_validator import ExperimentSpec


def tiny_spec_data(strategy: str = "adapt_bowda", seed: int = 0) -> dict:
    def domain(name, spacing, blur, noise, phantom_seed):
        return {
            "name": name, "dims": [16, 16, 16], "spacing": spacing, "radius_range": [3.5, 5.0],
            "blur_sigma": blur, "noise_sigma": noise, "texture_amplitude": 0.05, "seed": phantom_seed,
        }

    return {
        "name": "tiny",
        "strategy": strategy,
        "seed": seed,
        "dataset": {
            "source": {"phantom": domain("source", [1.5, 1.0, 1.0], 0.5, 0.05, 11),
                       "train_count": 3, "val_count": 0},
            "target": {"phantom": domain("target", [1.0, 1.0, 1.0], 1.5, 0.15, 23),
                       "train_count": 3, "val_count": 2},
            "target_spacing": [1.0, 1.0, 1.0],
        },
        "crop": {"dims": [8, 16, 16]},
        "window": {"dims": [8, 16, 16], "stride": [4, 8, 8]},
        "sgd": {"lr": 0.01, "momentum": 0.9, "decay": 1e-6, "batch_size": 1},
        "loss": {"dist_reduction": "mean"},
        "snet": {"base_width": 2, "down_layers": [1, 1, 1], "up_layers": [1, 1, 1], "growth": 2},
        "discriminator": {"widths": [2, 2, 2]},
        "epochs": {"source": 1, "target": 1, "adversarial": 1, "steps_per_epoch": 2},
    }


def tiny_spec(strategy: str = "adapt_bowda", seed: int = 0, **updates) -> ExperimentSpec:
    spec = ExperimentSpec.model_validate(tiny_spec_data(strategy, seed))
    return spec.with_strategy(strategy, **updates) if updates else spec


@pytest.fixture
def spec() -> ExperimentSpec:
    return tiny_spec()
