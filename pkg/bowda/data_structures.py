"""
Core data structures for the segmentation toolkit.

Defines Volume, Mask, LossValue, BoundaryHistogram and TrainState.
"""

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from .errors import ShapeMismatchError

Spacing = Tuple[float, float, float]


def _as_spacing(spacing) -> Spacing:
    values = tuple(float(s) for s in spacing)
    if len(values) != 3:
        raise ValueError(f"spacing must have 3 components (depth, height, width), got {values}")
    if any(s <= 0 for s in values):
        raise ValueError(f"spacing components must be > 0, got {values}")
    return values  # type: ignore[return-value]


@dataclass(frozen=True)
class Volume:
    """
    A 3D scalar field with per-axis physical spacing.

    Axis order is (depth, height, width) everywhere; depth is the slice
    axis and is stored slowest. Values are single precision and read-only
    once constructed, so a Volume can be shared between threads.
    """
    values: np.ndarray
    spacing: Spacing = (1.0, 1.0, 1.0)

    def __post_init__(self):
        values = np.array(self.values, dtype=self._dtype(), copy=True, order="C")
        if values.ndim != 3:
            raise ShapeMismatchError(f"Volume values must be 3D, got shape {values.shape}")
        if min(values.shape) < 1:
            raise ShapeMismatchError(f"Volume dims must be >= 1, got {values.shape}")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @staticmethod
    def _dtype():
        return np.float32

    @property
    def dims(self) -> Tuple[int, int, int]:
        return tuple(int(d) for d in self.values.shape)  # type: ignore[return-value]

    @property
    def voxel_volume(self) -> float:
        """Physical volume of one voxel in mm³."""
        return float(np.prod(self.spacing))

    @property
    def extent(self) -> Tuple[float, float, float]:
        """Physical size per axis in mm."""
        return tuple(d * s for d, s in zip(self.dims, self.spacing))  # type: ignore[return-value]

    def with_values(self, values: np.ndarray) -> "Volume":
        """New Volume with the same spacing and new values."""
        return Volume(values, self.spacing)

    def same_geometry(self, other: "Volume") -> bool:
        return self.dims == other.dims and np.allclose(self.spacing, other.spacing, rtol=0, atol=1e-9)

    def to_dict(self) -> Dict[str, Any]:
        """Short summary for logs and manifests."""
        return {
            "dims": list(self.dims),
            "spacing": [round(s, 6) for s in self.spacing],
            "min": float(self.values.min()),
            "max": float(self.values.max()),
        }


@dataclass(frozen=True)
class Mask(Volume):
    """
    A binary Volume: ground truths and thresholded predictions.

    Values are stored as uint8 and restricted to {0, 1}.
    """

    def __post_init__(self):
        raw = np.asarray(self.values)
        if raw.dtype == bool:
            raw = raw.astype(np.uint8)
        if raw.size and not np.isin(raw, (0, 1)).all():
            bad = np.unique(raw[~np.isin(raw, (0, 1))])[:5]
            raise ValueError(f"Mask values must be 0 or 1, found {bad.tolist()}")
        object.__setattr__(self, "values", raw)
        super().__post_init__()

    @staticmethod
    def _dtype():
        return np.uint8

    @classmethod
    def from_probabilities(cls, prob: Volume, threshold: float = 0.5) -> "Mask":
        return cls((prob.values >= threshold).astype(np.uint8), prob.spacing)

    @property
    def foreground(self) -> np.ndarray:
        return self.values.astype(bool)

    @property
    def count(self) -> int:
        return int(self.values.sum(dtype=np.int64))

    def with_values(self, values: np.ndarray) -> "Mask":
        return Mask(values, self.spacing)

    def is_degenerate(self) -> bool:
        """True when the mask is all-foreground or all-background."""
        n = self.count
        return n == 0 or n == self.values.size


def check_same_geometry(a: Volume, b: Volume, what: str = "volumes") -> None:
    if a.dims != b.dims:
        raise ShapeMismatchError(f"{what} dims differ: {a.dims} vs {b.dims}")
    if not np.allclose(a.spacing, b.spacing, rtol=0, atol=1e-9):
        raise ShapeMismatchError(f"{what} spacing differ: {a.spacing} vs {b.spacing}")


@dataclass(frozen=True)
class BoundaryPointSet:
    """Boundary voxels of a mask as an (N, 3) array of (d, h, w) indices in C order."""
    indices: np.ndarray
    dims: Tuple[int, int, int]

    def __len__(self) -> int:
        return int(self.indices.shape[0])

    def __contains__(self, index) -> bool:
        if len(self) == 0:
            return False
        return bool((self.indices == np.asarray(index)).all(axis=1).any())

    def as_array(self) -> np.ndarray:
        """Boolean volume that is True exactly on the boundary voxels."""
        out = np.zeros(self.dims, dtype=bool)
        if len(self):
            out[tuple(self.indices.T)] = True
        return out

    def physical(self, spacing: Spacing) -> np.ndarray:
        """Voxel-center coordinates in mm."""
        return self.indices.astype(np.float64) * np.asarray(spacing, dtype=np.float64)


@dataclass
class LossValue:
    """
    Scalar loss plus gradients with respect to each differentiable input.

    `grads` is keyed by input name ("pred", "d_src", "d_tgt", ...); each
    gradient has the shape of that input. `components` keeps the named
    partial values for logging.
    """
    value: float
    grads: Dict[str, np.ndarray] = field(default_factory=dict)
    components: Dict[str, float] = field(default_factory=dict)

    def __add__(self, other: "LossValue") -> "LossValue":
        grads = {k: v.copy() for k, v in self.grads.items()}
        for key, grad in other.grads.items():
            if key in grads:
                if grads[key].shape != grad.shape:
                    raise ShapeMismatchError(
                        f"gradient '{key}' shapes differ: {grads[key].shape} vs {grad.shape}"
                    )
                grads[key] = grads[key] + grad
            else:
                grads[key] = grad.copy()
        components = dict(self.components)
        for key, val in other.components.items():
            components[key] = components.get(key, 0.0) + val
        return LossValue(self.value + other.value, grads, components)

    def scaled(self, factor: float, prefix: Optional[str] = None) -> "LossValue":
        components = {
            (f"{prefix}{k}" if prefix else k): v * factor for k, v in self.components.items()
        }
        return LossValue(
            self.value * factor,
            {k: v * factor for k, v in self.grads.items()},
            components,
        )


@dataclass
class BoundaryHistogram:
    """Histogram of gradient magnitude sampled at boundary voxels."""
    edges: np.ndarray
    counts: np.ndarray
    mean_magnitude: float
    n_points: int

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({
            "bin_lower": self.edges[:-1],
            "bin_upper": self.edges[1:],
            "count": self.counts.astype(np.int64),
        })

    def to_csv(self, path) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.6f")


@dataclass
class TrainState:
    """
    Resumable optimizer state.

    Random streams are derived from (seed, phase, epoch, step), so the
    counters plus the master seed fully determine every future draw.
    """
    seed: int
    epoch: int = 0
    step: int = 0
    global_step: int = 0
    best_dsc: float = -1.0
    best_epoch: int = -1
    momentum: Dict[str, np.ndarray] = field(default_factory=dict)
    history: List[Dict[str, Any]] = field(default_factory=list)

    def meta(self) -> Dict[str, Any]:
        """JSON-serialisable counters (buffers are stored as blobs)."""
        return {
            "seed": self.seed,
            "epoch": self.epoch,
            "step": self.step,
            "global_step": self.global_step,
            "best_dsc": self.best_dsc,
            "best_epoch": self.best_epoch,
            "history": self.history,
        }

    @classmethod
    def from_meta(cls, meta: Dict[str, Any], momentum: Dict[str, np.ndarray]) -> "TrainState":
        return cls(
            seed=int(meta["seed"]),
            epoch=int(meta["epoch"]),
            step=int(meta["step"]),
            global_step=int(meta["global_step"]),
            best_dsc=float(meta["best_dsc"]),
            best_epoch=int(meta["best_epoch"]),
            momentum=momentum,
            history=list(meta.get("history", [])),
        )
