"""
Loading and preprocessing of domain datasets.

A domain comes either from a manifest written by ``gen-phantom`` or from
a phantom preset generated in memory. Preprocessing steps are recorded
in order so that strategies can be compared by what they did to the data.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

from utils.config_validator import DataSource, ExperimentSpec
from utils.threads import ordered_map
from utils.validation import validate_crop_fits, validate_dataset
from .data_structures import Mask, Volume
from .errors import CropError, SpecValidationError
from .phantom import gen_phantom
from .volume import read_metaimage, resample_mask_nearest, resample_trilinear, znormalize

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Case:
    case_id: str
    image: Volume
    mask: Mask

    @property
    def pair(self) -> Tuple[Volume, Mask]:
        return self.image, self.mask


@dataclass
class DomainData:
    name: str
    train: List[Case] = field(default_factory=list)
    val: List[Case] = field(default_factory=list)

    @property
    def spacing(self) -> Tuple[float, float, float]:
        first = (self.train or self.val)[0]
        return first.image.spacing

    def train_pairs(self) -> List[Tuple[Volume, Mask]]:
        return [c.pair for c in self.train]


@dataclass
class PreparedData:
    source: Optional[DomainData]
    target: DomainData
    steps: List[str] = field(default_factory=list)


# ══════════════════════════════════════════════════════════════════
# Loading
# ══════════════════════════════════════════════════════════════════

def read_manifest(path: Union[str, Path]) -> dict:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if "cases" not in manifest:
        raise SpecValidationError(f"{path}: manifest has no 'cases'")
    return manifest


def load_manifest_cases(path: Union[str, Path], workers: int = 1) -> Tuple[str, List[Case], List[Case]]:
    """Read every pair listed in a manifest; returns (domain, train, val)."""
    path = Path(path)
    manifest = read_manifest(path)
    root = path.parent
    domain = manifest.get("domain", path.parent.name)

    def load(entry):
        image = read_metaimage(root / entry["image"], as_mask=False)
        mask = read_metaimage(root / entry["mask"], as_mask=True)
        return Case(f"{domain}_{int(entry['index']):03d}", image, mask), entry.get("split", "train")

    loaded = ordered_map(load, manifest["cases"], workers)
    train = [case for case, split in loaded if split == "train"]
    val = [case for case, split in loaded if split == "val"]
    return domain, train, val


def load_domain(source: DataSource, name: str, workers: int = 1) -> DomainData:
    """
    Build a domain's train/val cases.

    Phantom domains use indices [0, train_count) for training and the next
    val_count indices for validation. Manifest domains use the manifest's
    split, truncated to the requested counts.
    """
    if source.phantom is not None:
        spec = source.phantom
        total = source.train_count + source.val_count
        pairs = ordered_map(lambda i: gen_phantom(spec, i), range(total), workers)
        cases = [Case(f"{spec.name}_{i:03d}", vol, mask) for i, (vol, mask) in enumerate(pairs)]
        data = DomainData(name, cases[:source.train_count], cases[source.train_count:])
    else:
        domain, train, val = load_manifest_cases(source.manifest, workers)
        if len(train) < source.train_count or len(val) < source.val_count:
            logger.warning(
                "%s manifest has %d train / %d val cases, requested %d / %d",
                domain, len(train), len(val), source.train_count, source.val_count,
            )
        data = DomainData(name, train[:source.train_count], val[:source.val_count])

    ok, issues = validate_dataset([c.pair for c in data.train + data.val])
    if not ok:
        raise SpecValidationError(f"{name} dataset invalid: " + "; ".join(issues[:5]))
    return data


# ══════════════════════════════════════════════════════════════════
# Preprocessing
# ══════════════════════════════════════════════════════════════════

def resample_case(case: Case, spacing: Sequence[float]) -> Case:
    """Trilinear image, nearest-neighbour mask, then renormalized intensities."""
    image = znormalize(resample_trilinear(case.image, spacing))
    mask = resample_mask_nearest(case.mask, spacing)
    return Case(case.case_id, image, mask)


def resample_domain(data: DomainData, spacing: Sequence[float], workers: int = 1) -> DomainData:
    return DomainData(
        data.name,
        ordered_map(lambda c: resample_case(c, spacing), data.train, workers),
        ordered_map(lambda c: resample_case(c, spacing), data.val, workers),
    )


def check_crop(data: DomainData, crop: Sequence[int]) -> None:
    for case in data.train:
        ok, issues = validate_crop_fits(case.image.dims, crop)
        if not ok:
            raise CropError(f"{case.case_id}: " + "; ".join(issues))


def prepare_data(spec: ExperimentSpec, resample_source: bool = False, workers: int = 1) -> PreparedData:
    """
    Load both domains and apply the preprocessing a strategy asks for.

    Every step is appended to ``PreparedData.steps``; two strategies that
    differ only in preprocessing differ only in those lines.
    """
    steps: List[str] = []
    target = load_domain(spec.dataset.target, "target", workers)
    steps.append(f"load target: {len(target.train)} train / {len(target.val)} val, spacing {target.spacing}")
    if spec.dataset.target_spacing is not None:
        spacing = tuple(spec.dataset.target_spacing)
        if any(c.image.spacing != spacing for c in target.train + target.val):
            target = resample_domain(target, spacing, workers)
            steps.append(f"resample target to {spacing}")

    source = None
    if spec.dataset.source is not None and spec.strategy != "target_only":
        source = load_domain(spec.dataset.source, "source", workers)
        steps.append(f"load source: {len(source.train)} train, spacing {source.spacing}")
        if resample_source:
            spacing = tuple(spec.dataset.target_spacing or target.spacing)
            source = resample_domain(source, spacing, workers)
            steps.append(f"resample source to {spacing}: dims {source.train[0].image.dims}")
        check_crop(source, spec.crop.dims)
    check_crop(target, spec.crop.dims)

    for line in steps:
        logger.info("preprocess | %s", line)
    return PreparedData(source, target, steps)
