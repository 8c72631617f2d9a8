"""
Configuration validation using Pydantic models.

Validates experiment specs (configs/experiments/*.json) and domain presets
(configs/domains.json) before any training or generation starts.
"""

import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

STRATEGIES = (
    "target_only",
    "mix_direct",
    "mix_resampled",
    "finetune",
    "finetune_resampled",
    "adapt_ce",
    "adapt_bowda",
)
Strategy = Literal[
    "target_only",
    "mix_direct",
    "mix_resampled",
    "finetune",
    "finetune_resampled",
    "adapt_ce",
    "adapt_bowda",
]

# Architecture ablation presets: (dense, residual, long connections)
SNET_PRESETS: Dict[str, Tuple[bool, bool, bool]] = {
    "fcn": (False, False, False),
    "fcn_dense": (True, False, False),
    "fcn_dense_residual": (True, True, False),
    "snet": (True, True, True),
}


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


def _triple(v, name: str, positive: bool = True):
    values = list(v)
    if len(values) != 3:
        raise ValueError(f"{name} must have 3 components (depth, height, width), got {values}")
    if positive and any(x <= 0 for x in values):
        raise ValueError(f"{name} components must be > 0, got {values}")
    return values


class LossConfig(StrictModel):
    """Weights of the boundary terms and the probability clamp."""

    alpha: float = Field(default=1.0, ge=0, description="Transfer-loss boundary weight")
    beta: float = Field(default=0.1, ge=0, description="Distance-loss weight")
    eps: float = Field(default=1e-7, gt=0, lt=0.5, description="Probability clamp before logs")
    threshold: float = Field(default=0.5, gt=0, lt=1, description="Threshold defining the predicted boundary")
    dist_reduction: Literal["sum", "mean"] = Field(default="sum")


class SGDConfig(StrictModel):
    """SGD with momentum and per-epoch learning-rate decay."""

    lr: float = Field(default=1e-4, gt=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    decay: float = Field(default=1e-6, ge=0, description="lr_e = lr / (1 + decay * epoch)")
    batch_size: int = Field(default=2, ge=1, le=64)


class DRBConfig(StrictModel):
    """One densely-connected residual block."""

    in_channels: int = Field(..., ge=1)
    layers: int = Field(..., ge=1)
    growth: int = Field(..., ge=1)
    dropout: float = Field(default=0.3, ge=0, lt=1)
    dense: bool = True
    residual: bool = True
    normalization: bool = True

    @property
    def transition_in(self) -> int:
        """Channels entering the 1x1x1 transition."""
        if self.dense:
            return self.in_channels + self.layers * self.growth
        return self.growth


class SNetConfig(StrictModel):
    """
    Segmentation network layout.

    `down_layers` lists the DRB sizes of the encoder; `up_layers` those of
    the decoder in decoder order (1/4, 1/2, 1/1 resolution). Selecting a
    `preset` overwrites the three connection flags.
    """

    preset: Optional[Literal["fcn", "fcn_dense", "fcn_dense_residual", "snet"]] = None
    base_width: int = Field(default=8, ge=1, le=512)
    down_layers: List[int] = Field(default_factory=lambda: [2, 2, 2])
    up_layers: List[int] = Field(default_factory=lambda: [2, 2, 2])
    growth: int = Field(default=4, ge=1, le=256)
    dropout: float = Field(default=0.3, ge=0, lt=1)
    dense_connections: bool = True
    residual_connections: bool = True
    long_connections: bool = True
    normalization: bool = True

    @field_validator("down_layers", "up_layers")
    @classmethod
    def validate_block_sizes(cls, v):
        if len(v) != 3:
            raise ValueError(f"exactly 3 DRB sizes are required per path, got {v}")
        if any(n < 1 for n in v):
            raise ValueError(f"DRB sizes must be >= 1, got {v}")
        return v

    @model_validator(mode="after")
    def apply_preset(self):
        if self.preset is not None:
            dense, residual, long_conn = SNET_PRESETS[self.preset]
            self.dense_connections = dense
            self.residual_connections = residual
            self.long_connections = long_conn
        return self

    def _block(self, in_channels: int, layers: int) -> DRBConfig:
        return DRBConfig(
            in_channels=in_channels,
            layers=layers,
            growth=self.growth,
            dropout=self.dropout,
            dense=self.dense_connections,
            residual=self.residual_connections,
            normalization=self.normalization,
        )

    def down_blocks(self) -> List[DRBConfig]:
        return [self._block(self.base_width, n) for n in self.down_layers]

    def up_blocks(self) -> List[DRBConfig]:
        width = 2 * self.base_width if self.long_connections else self.base_width
        return [self._block(width, n) for n in self.up_layers]

    @property
    def feature_channels(self) -> int:
        """Channel count of each up-path feature handed to the discriminator."""
        return 2 * self.base_width if self.long_connections else self.base_width


class DiscriminatorConfig(StrictModel):
    """Widths of the three ConvBlocks (coarse to fine) and the LeakyReLU slope."""

    widths: List[int] = Field(default_factory=lambda: [8, 8, 8])
    leaky_slope: float = Field(default=0.2, ge=0, lt=1)
    normalization: bool = True

    @field_validator("widths")
    @classmethod
    def validate_widths(cls, v):
        if len(v) != 3 or any(w < 1 for w in v):
            raise ValueError(f"discriminator needs 3 positive widths, got {v}")
        return v


class DomainSpec(StrictModel):
    """Phantom generator settings for one imaging domain."""

    name: str = "domain"
    dims: List[int] = Field(default_factory=lambda: [32, 32, 32])
    spacing: List[float] = Field(default_factory=lambda: [1.5, 1.0, 1.0])
    radius_range: List[float] = Field(default_factory=lambda: [6.0, 10.0], description="Ellipsoid semi-axis range (voxels)")
    deformation: float = Field(default=0.15, ge=0, lt=1, description="Radial perturbation amplitude (fraction)")
    blur_sigma: float = Field(default=0.5, ge=0, description="Edge blur (voxels)")
    noise_sigma: float = Field(default=0.05, ge=0)
    fg_level: float = 1.0
    bg_level: float = 0.0
    texture_amplitude: float = Field(default=0.05, ge=0, lt=1)
    seed: int = Field(default=0, ge=0)

    @field_validator("dims")
    @classmethod
    def validate_dims(cls, v):
        return [int(x) for x in _triple(v, "dims")]

    @field_validator("spacing")
    @classmethod
    def validate_spacing(cls, v):
        return [float(x) for x in _triple(v, "spacing")]

    @field_validator("radius_range")
    @classmethod
    def validate_radius_range(cls, v):
        if len(v) != 2 or not (0 < v[0] <= v[1]):
            raise ValueError(f"radius_range must be [lo, hi] with 0 < lo <= hi, got {v}")
        return v

    @model_validator(mode="after")
    def validate_fit(self):
        # deformed radius can reach (1 + deformation) * hi; leave one voxel of margin
        reach = self.radius_range[1] * (1 + self.deformation) + 1
        if 2 * reach > min(self.dims):
            raise ValueError(
                f"ellipsoid of radius up to {reach:.1f} voxels cannot fit in dims {self.dims}"
            )
        if self.fg_level == self.bg_level:
            raise ValueError("fg_level and bg_level must differ")
        return self


class CropSpec(StrictModel):
    dims: List[int] = Field(default_factory=lambda: [8, 32, 32])

    @field_validator("dims")
    @classmethod
    def validate_dims(cls, v):
        v = [int(x) for x in _triple(v, "crop dims")]
        if any(x % 8 for x in v):
            raise ValueError(f"crop dims must be divisible by 8, got {v}")
        return v


class WindowSpec(StrictModel):
    dims: List[int] = Field(default_factory=lambda: [8, 32, 32])
    stride: Optional[List[int]] = Field(default=None, description="Defaults to half the window")

    @field_validator("dims")
    @classmethod
    def validate_dims(cls, v):
        return [int(x) for x in _triple(v, "window dims")]

    @model_validator(mode="after")
    def validate_stride(self):
        if self.stride is None:
            self.stride = [max(1, d // 2) for d in self.dims]
        stride = [int(x) for x in _triple(self.stride, "window stride")]
        if any(s > d for s, d in zip(stride, self.dims)):
            raise ValueError(f"window stride {stride} must not exceed window {self.dims}")
        self.stride = stride
        return self


class DataSource(StrictModel):
    """One domain's data: either a manifest written by gen-phantom or a phantom preset."""

    manifest: Optional[str] = None
    phantom: Optional[DomainSpec] = None
    train_count: int = Field(default=12, ge=1)
    val_count: int = Field(default=6, ge=0)

    @model_validator(mode="after")
    def validate_origin(self):
        if (self.manifest is None) == (self.phantom is None):
            raise ValueError("exactly one of 'manifest' or 'phantom' must be given")
        return self


class DatasetSpec(StrictModel):
    source: Optional[DataSource] = None
    target: DataSource
    target_spacing: Optional[List[float]] = Field(
        default=None, description="Spacing used by the *_resampled strategies (defaults to the target domain's)"
    )

    @field_validator("target_spacing")
    @classmethod
    def validate_target_spacing(cls, v):
        return None if v is None else [float(x) for x in _triple(v, "target_spacing")]


class AdversarialConfig(StrictModel):
    """Loss pairing for the adversarial phase."""

    seg_loss: Literal["ce", "bwsl"] = "bwsl"
    disc_loss: Literal["ce", "bwtl"] = "bwtl"
    adv_weight: float = Field(default=1.0, ge=0, description="Scale of the generator fooling term")


class EpochConfig(StrictModel):
    source: int = Field(default=10, ge=0)
    target: int = Field(default=10, ge=0)
    adversarial: int = Field(default=10, ge=0)
    steps_per_epoch: Optional[int] = Field(default=None, ge=1, description="Defaults to ceil(cases / batch)")


class ExperimentSpec(StrictModel):
    """A complete, serialisable experiment."""

    name: str = "experiment"
    strategy: Strategy = "adapt_bowda"
    seed: int = Field(default=0, ge=0)
    output_dir: str = "results"
    supervised_loss: Literal["ce", "bwsl"] = Field(
        default="ce", description="Loss of the supervised target phases of non-adversarial strategies"
    )
    dataset: DatasetSpec
    crop: CropSpec = Field(default_factory=CropSpec)
    window: WindowSpec = Field(default_factory=WindowSpec)
    sgd: SGDConfig = Field(default_factory=SGDConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    snet: SNetConfig = Field(default_factory=SNetConfig)
    discriminator: DiscriminatorConfig = Field(default_factory=DiscriminatorConfig)
    adversarial: AdversarialConfig = Field(default_factory=AdversarialConfig)
    epochs: EpochConfig = Field(default_factory=EpochConfig)

    @model_validator(mode="after")
    def validate_strategy_inputs(self):
        if self.strategy != "target_only" and self.dataset.source is None:
            raise ValueError(f"strategy '{self.strategy}' requires a source dataset")
        if self.strategy.startswith("adapt") and self.dataset.target.train_count < 1:
            raise ValueError("adversarial strategies need target training cases")
        if self.dataset.target.val_count < 1:
            raise ValueError("target val_count must be >= 1 for evaluation")
        return self

    def with_strategy(self, strategy: str, **updates) -> "ExperimentSpec":
        """Copy of this spec running another strategy (re-validated)."""
        data = self.model_dump()
        data["strategy"] = strategy
        for dotted, value in updates.items():
            set_dotted(data, dotted.replace("__", "."), value)
        return ExperimentSpec.model_validate(data)


# ══════════════════════════════════════════════════════════════════
# Loading, overrides, digests
# ══════════════════════════════════════════════════════════════════

def parse_override(text: str) -> Tuple[str, Any]:
    """
    Parse one ``dotted.key=value`` override.

    The value is decoded as JSON when possible ("3" -> 3, "[8,32,32]" -> list),
    otherwise kept as a string.
    """
    if "=" not in text:
        raise ValueError(f"override must look like dotted.key=value, got '{text}'")
    key, raw = text.split("=", 1)
    key = key.strip()
    if not key:
        raise ValueError(f"override has an empty key: '{text}'")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key, value


def set_dotted(data: Dict[str, Any], dotted: str, value: Any) -> None:
    node = data
    parts = dotted.split(".")
    for part in parts[:-1]:
        child = node.get(part)
        if child is None:
            child = {}
            node[part] = child
        if not isinstance(child, dict):
            raise ValueError(f"cannot set '{dotted}': '{part}' is not an object")
        node = child
    node[parts[-1]] = value


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    for text in overrides:
        key, value = parse_override(text)
        set_dotted(data, key, value)
    return data


def load_experiment_spec(config_path: str, overrides: Sequence[str] = ()) -> ExperimentSpec:
    """
    Load and validate an experiment spec.

    Args:
        config_path: Path to the JSON document
        overrides: ``dotted.key=value`` strings applied before validation

    Returns:
        Validated ExperimentSpec

    Raises:
        ValidationError if the spec is invalid
    """
    with open(config_path, "r", encoding="utf-8") as f:
        data = json.load(f)
    apply_overrides(data, overrides)
    return ExperimentSpec.model_validate(data)


def load_domain_presets(config_path: str) -> Dict[str, DomainSpec]:
    """Load configs/domains.json into named DomainSpecs."""
    with open(config_path, "r", encoding="utf-8") as f:
        data = json.load(f)
    return {name: DomainSpec.model_validate({"name": name, **cfg}) for name, cfg in data.items()}


def default_domains_path() -> Path:
    return Path(__file__).resolve().parent.parent / "configs" / "domains.json"


def canonical_json(model: BaseModel) -> str:
    return json.dumps(model.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))


def config_digest(model: BaseModel) -> str:
    """SHA-256 of the canonical (sorted-key) JSON dump."""
    return hashlib.sha256(canonical_json(model).encode("utf-8")).hexdigest()


def format_validation_error(err: ValidationError) -> str:
    lines = []
    for item in err.errors():
        loc = ".".join(str(p) for p in item.get("loc", ()))
        lines.append(f"{loc or '<root>'}: {item.get('msg')}")
    return "; ".join(lines)
