"""
Synthetic two-domain phantoms.

Each sample is a randomly placed ellipsoid whose radius is perturbed by
three low-order Legendre modes around random axes. The image is the
blurred object intensity, modulated by a smooth multiplicative texture,
plus white noise, then z-normalized. Source and target presets differ in
spacing, edge blur, noise and texture, so that the source boundaries are
sharper than the target ones.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.special import eval_legendre
from tqdm import tqdm

from utils.config_validator import DomainSpec, config_digest, default_domains_path, load_domain_presets
from utils.threads import ordered_map
from .data_structures import Mask, Volume
from .errors import DegenerateMaskError
from .volume import write_metaimage, znormalize

logger = logging.getLogger(__name__)

MODE_ORDERS = (2, 3, 4)
TEXTURE_SCALE = 6.0  # texture correlation length = max(dims) / TEXTURE_SCALE voxels
MANIFEST_NAME = "manifest.json"


def preset(name: str, path: Optional[Union[str, Path]] = None) -> DomainSpec:
    """A named preset from configs/domains.json ('source' or 'target')."""
    presets = load_domain_presets(str(path or default_domains_path()))
    if name not in presets:
        raise KeyError(f"unknown domain preset '{name}', available: {sorted(presets)}")
    return presets[name]


@dataclass(frozen=True)
class ShapeDraw:
    center: np.ndarray      # (3,) voxel coordinates
    radii: np.ndarray       # (3,) voxels
    axes: np.ndarray        # (3, 3) unit mode axes
    amplitudes: np.ndarray  # (3,) in [-1, 1]


def _draw_shape(spec: DomainSpec, rng: np.random.Generator) -> ShapeDraw:
    lo, hi = spec.radius_range
    radii = rng.uniform(lo, hi, size=3)
    reach = radii * (1.0 + spec.deformation) + 1.0
    dims = np.asarray(spec.dims, dtype=np.float64)
    lower, upper = reach, dims - 1.0 - reach
    u = rng.random(3)
    center = np.where(upper > lower, lower + u * (upper - lower), (dims - 1.0) / 2.0)
    axes = rng.standard_normal((3, 3))
    axes /= np.linalg.norm(axes, axis=1, keepdims=True)
    amplitudes = rng.uniform(-1.0, 1.0, size=3)
    return ShapeDraw(center, radii, axes, amplitudes)


def deformed_ellipsoid(dims, shape: ShapeDraw, deformation: float) -> np.ndarray:
    """Boolean mask of the ellipsoid with a radial perturbation of at most ``deformation``."""
    grid = np.indices(tuple(dims), dtype=np.float64)
    u = (grid - shape.center[:, None, None, None]) / shape.radii[:, None, None, None]
    rho = np.sqrt((u ** 2).sum(axis=0))
    directions = u / np.where(rho > 0, rho, 1.0)
    perturbation = np.zeros_like(rho)
    for order, axis, amp in zip(MODE_ORDERS, shape.axes, shape.amplitudes):
        cosine = np.tensordot(axis, directions, axes=1)
        perturbation += amp * eval_legendre(order, cosine)
    perturbation /= len(MODE_ORDERS)
    return rho <= 1.0 + deformation * perturbation


def foreground_fraction_bounds(spec: DomainSpec) -> Tuple[float, float]:
    """Continuous-volume bounds on the mask's foreground fraction."""
    lo, hi = spec.radius_range
    n = float(np.prod(spec.dims))
    unit = 4.0 / 3.0 * np.pi
    return (unit * (lo * (1 - spec.deformation)) ** 3 / n,
            unit * (hi * (1 + spec.deformation)) ** 3 / n)


def _texture(dims, rng: np.random.Generator) -> np.ndarray:
    field = ndimage.gaussian_filter(rng.standard_normal(dims), sigma=max(dims) / TEXTURE_SCALE, mode="wrap")
    peak = np.abs(field).max()
    return field / peak if peak > 0 else field


def gen_phantom(spec: DomainSpec, index: int) -> Tuple[Volume, Mask]:
    """
    One (image, mask) pair, fully determined by ``(spec.seed, index)``.

    The random stream is consumed in the same order for every spec, so
    switching blur, noise or texture off leaves the shape unchanged.
    """
    rng = np.random.default_rng([spec.seed, index])
    dims = tuple(spec.dims)
    shape = _draw_shape(spec, rng)
    texture = _texture(dims, rng)
    noise = rng.standard_normal(dims)

    inside = deformed_ellipsoid(dims, shape, spec.deformation)
    if not inside.any() or inside.all():
        raise DegenerateMaskError(f"phantom {index} of '{spec.name}' is degenerate")

    ideal = np.where(inside, spec.fg_level, spec.bg_level).astype(np.float64)
    if spec.blur_sigma > 0:
        ideal = ndimage.gaussian_filter(ideal, sigma=spec.blur_sigma, mode="nearest")
    image = ideal * (1.0 + spec.texture_amplitude * texture) + spec.noise_sigma * noise

    spacing = tuple(spec.spacing)
    vol = znormalize(Volume(image.astype(np.float32), spacing))
    return vol, Mask(inside.astype(np.uint8), spacing)


# ══════════════════════════════════════════════════════════════════
# Datasets on disk
# ══════════════════════════════════════════════════════════════════

def split_counts(count: int, val_fraction: float) -> Tuple[int, int]:
    """(train, val) with val = round(count * fraction), halves rounding up."""
    if not 0.0 <= val_fraction <= 1.0:
        raise ValueError(f"val_fraction must be in [0, 1], got {val_fraction}")
    val = int(np.floor(count * val_fraction + 0.5))
    return count - val, val


def gen_dataset(spec: DomainSpec, count: int, output_dir: Union[str, Path],
                val_fraction: float = 0.0, workers: int = 1, progress: bool = False) -> Dict[str, Any]:
    """
    Write ``count`` MetaImage pairs and a manifest.json describing them.

    The last ``round(count * val_fraction)`` cases form the validation
    split. Paths in the manifest are relative to ``output_dir``.

    Returns:
        The manifest dictionary
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_train, n_val = split_counts(count, val_fraction)

    pairs = ordered_map(lambda i: gen_phantom(spec, i), range(count), workers)
    cases: List[Dict[str, Any]] = []
    for i, (vol, mask) in enumerate(tqdm(pairs, desc=f"write {spec.name}", disable=not progress)):
        image_name, mask_name = f"case_{i:03d}_image.mhd", f"case_{i:03d}_mask.mhd"
        write_metaimage(vol, out / image_name)
        write_metaimage(mask, out / mask_name)
        cases.append({"index": i, "image": image_name, "mask": mask_name,
                      "split": "train" if i < n_train else "val"})

    manifest = {
        "domain": spec.name,
        "seed": spec.seed,
        "spec_digest": config_digest(spec),
        "spec": spec.model_dump(mode="json"),
        "count": count,
        "split": {"train": n_train, "val": n_val},
        "cases": cases,
    }
    with open(out / MANIFEST_NAME, "w", encoding="utf-8", newline="\n") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    logger.info("wrote %d %s phantoms (%d train / %d val) to %s", count, spec.name, n_train, n_val, out)
    return manifest
