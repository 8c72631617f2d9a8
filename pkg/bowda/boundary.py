"""
Boundary extraction, weight maps, distance maps and boundary-gradient
statistics.

The canonical boundary is the 6-connected morphological one; the Sobel
contour only feeds the weight maps. Sobel and Gaussian work per axial
slice, the distance transform is fully 3D in millimeters.
"""

import logging
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .data_structures import BoundaryHistogram, BoundaryPointSet, Mask, Volume, check_same_geometry
from .errors import DegenerateMaskError

logger = logging.getLogger(__name__)

WEIGHT_SIGMA2 = 0.64

_SIX_NEIGHBOURS = ndimage.generate_binary_structure(3, 1)


def boundary_array(values: np.ndarray) -> np.ndarray:
    """
    Boolean boundary of a binary array: foreground voxels with a
    background face-neighbour or lying on the volume border.
    """
    fg = np.asarray(values).astype(bool)
    if not fg.any():
        return fg
    interior = ndimage.binary_erosion(fg, structure=_SIX_NEIGHBOURS, border_value=0)
    return fg & ~interior


def morphological_boundary(mask: Mask) -> BoundaryPointSet:
    """Boundary voxels of ``mask`` (empty mask gives an empty set)."""
    indices = np.argwhere(boundary_array(mask.values)).astype(np.int64)
    return BoundaryPointSet(indices.reshape(-1, 3), mask.dims)


def sobel_contour(mask: Mask) -> Volume:
    """
    Per-slice Sobel gradient magnitude of the mask, scaled to max 1.

    Slices are edge-replicated at the border, so constant masks and
    complemented masks behave alike.
    """
    values = mask.values.astype(np.float64)
    out = np.zeros_like(values)
    for z in range(values.shape[0]):
        gy = ndimage.sobel(values[z], axis=0, mode="nearest")
        gx = ndimage.sobel(values[z], axis=1, mode="nearest")
        out[z] = np.hypot(gy, gx)
    peak = out.max()
    if peak > 0:
        out /= peak
    return Volume(out.astype(np.float32), mask.spacing)


def _unit_radius(sigma: float) -> float:
    # gaussian_filter radius = int(truncate * sigma + 0.5); this pins it to 1 (3x3)
    return 1.0 / sigma


def gaussian_kernel_3x3(sigma2: float = WEIGHT_SIGMA2) -> np.ndarray:
    """The normalized in-plane smoothing kernel exp(-r^2 / (2 sigma^2))."""
    delta = np.zeros((3, 3))
    delta[1, 1] = 1.0
    sigma = float(np.sqrt(sigma2))
    return ndimage.gaussian_filter(delta, sigma=sigma, truncate=_unit_radius(sigma), mode="constant")


def boundary_weight_map(mask: Mask) -> Volume:
    """Sobel contour smoothed per axial slice by the 3x3 Gaussian (sigma^2 = 0.64)."""
    contour = sobel_contour(mask).values.astype(np.float64)
    sigma = float(np.sqrt(WEIGHT_SIGMA2))
    smoothed = ndimage.gaussian_filter(
        contour, sigma=(0.0, sigma, sigma), truncate=_unit_radius(sigma), mode="constant"
    )
    return Volume(np.maximum(smoothed, 0.0).astype(np.float32), mask.spacing)


def distance_array(values: np.ndarray, spacing: Sequence[float]) -> np.ndarray:
    """
    Double-precision Euclidean distance (mm) from every voxel to the nearest
    boundary voxel of the binary array ``values``.
    """
    edge = boundary_array(values)
    if not edge.any():
        raise DegenerateMaskError("mask has no boundary voxels")
    return ndimage.distance_transform_edt(~edge, sampling=tuple(float(s) for s in spacing))


def distance_map(mask: Mask) -> Volume:
    """Exact Euclidean distance map to the morphological boundary."""
    if mask.is_degenerate():
        state = "empty" if mask.count == 0 else "full"
        raise DegenerateMaskError(f"distance map undefined for an {state} mask {mask.dims}")
    return Volume(distance_array(mask.values, mask.spacing).astype(np.float32), mask.spacing)


# ══════════════════════════════════════════════════════════════════
# Boundary gradient statistics
# ══════════════════════════════════════════════════════════════════

def boundary_gradient_magnitudes(vol: Volume, mask: Mask) -> np.ndarray:
    """Central-difference gradient magnitude (voxel units) at boundary voxels."""
    check_same_geometry(vol, mask, "image and mask")
    if mask.is_degenerate():
        raise DegenerateMaskError("boundary statistics need a non-degenerate mask")
    values = vol.values.astype(np.float64)
    squared = np.zeros_like(values)
    for axis in range(3):
        if values.shape[axis] > 1:
            squared += np.gradient(values, axis=axis) ** 2
    magnitude = np.sqrt(squared)
    return magnitude[boundary_array(mask.values)]


def _histogram(magnitudes: np.ndarray, bins: int, upper: float) -> BoundaryHistogram:
    if upper <= 0:
        upper = 1.0
    counts, edges = np.histogram(magnitudes, bins=bins, range=(0.0, upper))
    mean = float(magnitudes.mean()) if magnitudes.size else 0.0
    return BoundaryHistogram(edges=edges, counts=counts, mean_magnitude=mean, n_points=int(magnitudes.size))


def boundary_gradient_histogram(vol: Volume, mask: Mask, bins: int = 50,
                                value_range: Optional[float] = None) -> BoundaryHistogram:
    """
    Histogram of gradient magnitude at boundary voxels.

    Bins cover [0, max] unless ``value_range`` fixes the upper edge.
    """
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    mags = boundary_gradient_magnitudes(vol, mask)
    upper = float(mags.max()) if value_range is None else float(value_range)
    return _histogram(mags, bins, upper)


def compare_domain_boundaries(
    images_a: List[Volume],
    masks_a: List[Mask],
    images_b: List[Volume],
    masks_b: List[Mask],
    bins: int = 50,
) -> Tuple[BoundaryHistogram, BoundaryHistogram]:
    """Pooled boundary histograms of two domains on a shared bin range."""
    if len(images_a) != len(masks_a) or len(images_b) != len(masks_b):
        raise ValueError("each domain needs one mask per image")
    if not images_a or not images_b:
        raise ValueError("both domains need at least one case")
    mags_a = np.concatenate([boundary_gradient_magnitudes(v, m) for v, m in zip(images_a, masks_a)])
    mags_b = np.concatenate([boundary_gradient_magnitudes(v, m) for v, m in zip(images_b, masks_b)])
    upper = float(max(mags_a.max(), mags_b.max()))
    hist_a = _histogram(mags_a, bins, upper)
    hist_b = _histogram(mags_b, bins, upper)
    logger.info("boundary gradient mean: %.4f vs %.4f", hist_a.mean_magnitude, hist_b.mean_magnitude)
    return hist_a, hist_b
