"""
Sampling, augmentation and sliding-window inference.
"""

import itertools
import logging
from dataclasses import dataclass
from typing import Callable, List, Sequence, Tuple

import numpy as np

from utils.config_validator import CropSpec, WindowSpec
from utils.threads import ordered_map
from .data_structures import Mask, Volume, check_same_geometry
from .errors import CropError

logger = logging.getLogger(__name__)

Predictor = Callable[[np.ndarray], np.ndarray]


# ══════════════════════════════════════════════════════════════════
# Cropping
# ══════════════════════════════════════════════════════════════════

def crop_origin(dims: Sequence[int], crop: Sequence[int], rng: np.random.Generator) -> Tuple[int, int, int]:
    """Uniform origin per axis over the valid range."""
    for axis, (d, c) in enumerate(zip(dims, crop)):
        if c > d:
            raise CropError(f"crop {tuple(crop)} larger than volume {tuple(dims)} on axis {axis}")
    return tuple(int(rng.integers(0, d - c + 1)) for d, c in zip(dims, crop))  # type: ignore[return-value]


def _slices(origin: Sequence[int], crop: Sequence[int]):
    return tuple(slice(o, o + c) for o, c in zip(origin, crop))


def random_crop(vol: Volume, mask: Mask, spec: CropSpec, rng: np.random.Generator
                ) -> Tuple[Volume, Mask, Tuple[int, int, int]]:
    """Congruent random crop of an image and its label."""
    check_same_geometry(vol, mask, "image and mask")
    origin = crop_origin(vol.dims, spec.dims, rng)
    window = _slices(origin, spec.dims)
    return vol.with_values(vol.values[window]), mask.with_values(mask.values[window]), origin


# ══════════════════════════════════════════════════════════════════
# Augmentation
# ══════════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class AugmentDraw:
    """In-plane rotation by k * 90 degrees, then flips along (depth, height, width)."""
    k: int = 0
    flips: Tuple[bool, bool, bool] = (False, False, False)

    @property
    def is_identity(self) -> bool:
        return self.k % 4 == 0 and not any(self.flips)


def draw_augment(dims: Sequence[int], rng: np.random.Generator) -> AugmentDraw:
    """
    Sample a transform. Odd rotations are only drawn when height == width,
    so every draw keeps the volume shape.
    """
    if dims[1] == dims[2]:
        k = int(rng.integers(0, 4))
    else:
        k = 2 * int(rng.integers(0, 2))
    flips = tuple(bool(f) for f in rng.random(3) < 0.5)
    return AugmentDraw(k, flips)  # type: ignore[arg-type]


def apply_augment(values: np.ndarray, draw: AugmentDraw) -> np.ndarray:
    """Apply to the last three axes of ``values``."""
    out = np.rot90(values, k=draw.k, axes=(-2, -1))
    for axis, flip in zip((-3, -2, -1), draw.flips):
        if flip:
            out = np.flip(out, axis=axis)
    return np.ascontiguousarray(out)


def invert_augment(values: np.ndarray, draw: AugmentDraw) -> np.ndarray:
    out = values
    for axis, flip in zip((-3, -2, -1), draw.flips):
        if flip:
            out = np.flip(out, axis=axis)
    return np.ascontiguousarray(np.rot90(out, k=-draw.k, axes=(-2, -1)))


def _spacing_after(spacing, draw: AugmentDraw):
    if draw.k % 2:
        return (spacing[0], spacing[2], spacing[1])
    return spacing


def augment(vol: Volume, mask: Mask, rng: np.random.Generator) -> Tuple[Volume, Mask]:
    """Random right-angle rotation and flips, identical for image and mask."""
    check_same_geometry(vol, mask, "image and mask")
    draw = draw_augment(vol.dims, rng)
    spacing = _spacing_after(vol.spacing, draw)
    return (Volume(apply_augment(vol.values, draw), spacing),
            Mask(apply_augment(mask.values, draw), spacing))


# ══════════════════════════════════════════════════════════════════
# Batches
# ══════════════════════════════════════════════════════════════════

@dataclass
class Batch:
    images: np.ndarray   # (N, 1, D, H, W) float32
    labels: np.ndarray   # (N, 1, D, H, W) float32 in {0, 1}
    spacings: List[Tuple[float, float, float]]
    cases: List[int]


def sample_batch(cases: Sequence[Tuple[Volume, Mask]], crop: CropSpec, batch_size: int,
                 rng: np.random.Generator, augmentation: bool = True) -> Batch:
    """
    Draw ``batch_size`` random augmented crops. Case choice, crop origin
    and augmentation all come from ``rng`` in sample order.
    """
    if not cases:
        raise CropError("cannot sample a batch from an empty dataset")
    images, labels, spacings, picked = [], [], [], []
    for _ in range(batch_size):
        idx = int(rng.integers(0, len(cases)))
        vol, mask = cases[idx]
        sub_vol, sub_mask, _ = random_crop(vol, mask, crop, rng)
        if augmentation:
            sub_vol, sub_mask = augment(sub_vol, sub_mask, rng)
        images.append(sub_vol.values)
        labels.append(sub_mask.values)
        spacings.append(sub_vol.spacing)
        picked.append(idx)
    return Batch(
        images=np.stack(images)[:, None].astype(np.float32),
        labels=np.stack(labels)[:, None].astype(np.float32),
        spacings=spacings,
        cases=picked,
    )


# ══════════════════════════════════════════════════════════════════
# Sliding-window inference
# ══════════════════════════════════════════════════════════════════

def window_positions(size: int, window: int, stride: int) -> List[int]:
    """Start offsets at stride intervals; the last window is clamped to the end."""
    if window > size:
        raise CropError(f"window {window} larger than axis {size}")
    starts = list(range(0, size - window + 1, stride))
    if starts[-1] != size - window:
        starts.append(size - window)
    return starts


def _axis_counts(size: int, window: int, stride: int) -> np.ndarray:
    counts = np.zeros(size, dtype=np.int64)
    for start in window_positions(size, window, stride):
        counts[start:start + window] += 1
    return counts


def coverage_map(dims: Sequence[int], spec: WindowSpec) -> np.ndarray:
    """Number of windows covering each voxel (the windows form a grid)."""
    cd, ch, cw = (_axis_counts(d, w, s) for d, w, s in zip(dims, spec.dims, spec.stride))
    return cd[:, None, None] * ch[None, :, None] * cw[None, None, :]


def _pad_widths(dims: Sequence[int], window: Sequence[int]):
    widths = []
    for d, w in zip(dims, window):
        extra = max(0, w - d)
        widths.append((extra // 2, extra - extra // 2))
    return widths


def sliding_window_infer(predict: Predictor, vol: Volume, spec: WindowSpec, workers: int = 1) -> Volume:
    """
    Average overlapping window predictions over the whole volume.

    Volumes smaller than the window are edge-padded symmetrically and
    cropped back afterwards. Predictions may run on ``workers`` threads;
    they are summed in window order and divided by precomputed counts.
    """
    pad = _pad_widths(vol.dims, spec.dims)
    values = np.pad(vol.values, pad, mode="edge") if any(p != (0, 0) for p in pad) else vol.values
    dims = values.shape

    starts = [window_positions(d, w, s) for d, w, s in zip(dims, spec.dims, spec.stride)]
    origins = list(itertools.product(*starts))
    windows = [_slices(o, spec.dims) for o in origins]

    predictions = ordered_map(lambda sl: predict(values[sl]), windows, workers)

    total = np.zeros(dims, dtype=np.float64)
    for sl, pred in zip(windows, predictions):
        pred = np.asarray(pred)
        if pred.shape != tuple(spec.dims):
            raise CropError(f"predictor returned {pred.shape} for window {tuple(spec.dims)}")
        total[sl] += pred
    out = total / coverage_map(dims, spec)

    crop = tuple(slice(b, b + d) for (b, _), d in zip(pad, vol.dims))
    logger.debug("sliding window: %d windows over %s", len(windows), dims)
    return Volume(out[crop].astype(np.float32), vol.spacing)
