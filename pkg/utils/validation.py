"""
Data validation utilities for volumes, masks and datasets.

Each check returns ``(is_valid, issues)`` so callers can decide whether
to raise, warn or skip.
"""

from typing import List, Sequence, Tuple

import numpy as np


def validate_volume_array(values: np.ndarray, spacing: Sequence[float]) -> Tuple[bool, List[str]]:
    """
    Validate a raw volume before it is wrapped.

    Checks:
    - 3 dimensions, each >= 1
    - 3 positive spacing components
    - no NaN or infinite values

    Returns:
        Tuple of (is_valid, list_of_issues)
    """
    issues = []
    arr = np.asarray(values)
    if arr.ndim != 3:
        issues.append(f"Expected 3 dimensions, got {arr.ndim}")
    elif min(arr.shape) < 1:
        issues.append(f"Empty dimension in shape {arr.shape}")

    spacing = list(spacing)
    if len(spacing) != 3:
        issues.append(f"Spacing needs 3 components, got {len(spacing)}")
    elif any(s <= 0 for s in spacing):
        issues.append(f"Non-positive spacing: {spacing}")

    if arr.size and np.issubdtype(arr.dtype, np.floating):
        bad = int((~np.isfinite(arr)).sum())
        if bad:
            issues.append(f"Non-finite values: {bad} voxels")

    return len(issues) == 0, issues


def validate_mask_array(values: np.ndarray) -> Tuple[bool, List[str]]:
    """Check that a label array is binary and not degenerate."""
    issues = []
    arr = np.asarray(values)
    uniq = np.unique(arr)
    extra = [v for v in uniq.tolist() if v not in (0, 1)]
    if extra:
        issues.append(f"Non-binary label values: {extra[:5]}")
    fg = int((arr == 1).sum())
    if fg == 0:
        issues.append("Mask has no foreground")
    elif fg == arr.size:
        issues.append("Mask has no background")
    return len(issues) == 0, issues


def validate_pair_geometry(image, mask) -> Tuple[bool, List[str]]:
    """Check that an image and its label share dims and spacing."""
    issues = []
    if image.dims != mask.dims:
        issues.append(f"Dims differ: image {image.dims} vs mask {mask.dims}")
    if not np.allclose(image.spacing, mask.spacing, rtol=0, atol=1e-6):
        issues.append(f"Spacing differs: image {image.spacing} vs mask {mask.spacing}")
    return len(issues) == 0, issues


def validate_crop_fits(dims: Sequence[int], crop: Sequence[int]) -> Tuple[bool, List[str]]:
    issues = []
    for axis, (d, c) in enumerate(zip(dims, crop)):
        if c > d:
            issues.append(f"Crop {list(crop)} exceeds volume {list(dims)} on axis {axis}")
    return len(issues) == 0, issues


def validate_dataset(cases) -> Tuple[bool, List[str]]:
    """
    Validate a list of (image, mask) pairs.

    Returns:
        Tuple of (is_valid, list_of_issues); issues are prefixed with the case index
    """
    issues = []
    if not cases:
        return False, ["Dataset is empty"]
    for i, (image, mask) in enumerate(cases):
        ok, case_issues = validate_pair_geometry(image, mask)
        if ok:
            ok, case_issues = validate_mask_array(mask.values)
        issues.extend(f"case {i}: {msg}" for msg in case_issues)
    return len(issues) == 0, issues
