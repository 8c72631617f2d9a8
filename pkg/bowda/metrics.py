"""
Segmentation metrics.

DSC and RVD are overlap/volume measures in percent; ABD and HD are
surface distances in mm between boundary-voxel centers. Every metric can
be restricted to the apex or base third of the reference's axial extent.

SegmentationAnalyzer collects per-case rows and produces the CSV report
and paired comparisons, the same way PerformanceAnalyzer summarises a run.
"""

import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy import ndimage, stats

from utils.threads import ordered_map
from .boundary import boundary_array
from .data_structures import Mask, check_same_geometry
from .errors import DegenerateMaskError, DegenerateVarianceError, ShapeMismatchError

logger = logging.getLogger(__name__)

METRICS = ("dsc", "rvd", "abd", "hd")
REGIONS = ("whole", "apex", "base")
SIGNIFICANCE = 0.05


# ══════════════════════════════════════════════════════════════════
# Overlap and volume
# ══════════════════════════════════════════════════════════════════

def dsc(a: Mask, b: Mask) -> float:
    """Dice coefficient in percent; 100 when both masks are empty."""
    check_same_geometry(a, b, "masks")
    fa, fb = a.foreground, b.foreground
    total = int(fa.sum()) + int(fb.sum())
    if total == 0:
        return 100.0
    return 100.0 * 2.0 * int(np.logical_and(fa, fb).sum()) / total


def rvd(seg: Mask, ref: Mask) -> float:
    """Signed relative volume difference of ``seg`` against ``ref`` in percent."""
    check_same_geometry(seg, ref, "masks")
    v_ref = ref.count * ref.voxel_volume
    if v_ref == 0:
        raise DegenerateMaskError("relative volume difference needs a non-empty reference")
    v_seg = seg.count * seg.voxel_volume
    return 100.0 * (v_seg - v_ref) / v_ref


# ══════════════════════════════════════════════════════════════════
# Surface distances
# ══════════════════════════════════════════════════════════════════

def surface_distances(a: Mask, b: Mask) -> Tuple[np.ndarray, np.ndarray]:
    """
    Directed shortest distances (mm): from each boundary voxel of ``a`` to
    the boundary of ``b``, and the reverse.
    """
    check_same_geometry(a, b, "masks")
    edge_a = boundary_array(a.values)
    edge_b = boundary_array(b.values)
    if not edge_a.any() or not edge_b.any():
        raise DegenerateMaskError("surface distances need two non-empty masks")
    sampling = tuple(float(s) for s in a.spacing)
    to_b = ndimage.distance_transform_edt(~edge_b, sampling=sampling)
    to_a = ndimage.distance_transform_edt(~edge_a, sampling=sampling)
    return to_b[edge_a], to_a[edge_b]


def abd(a: Mask, b: Mask) -> float:
    """Symmetric average boundary distance in mm."""
    d_ab, d_ba = surface_distances(a, b)
    return float((d_ab.sum() + d_ba.sum()) / (d_ab.size + d_ba.size))


def hd(a: Mask, b: Mask) -> float:
    """Exact Hausdorff distance in mm."""
    d_ab, d_ba = surface_distances(a, b)
    return float(max(d_ab.max(), d_ba.max()))


# ══════════════════════════════════════════════════════════════════
# Apex / base regions
# ══════════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class RegionSplit:
    """Half-open axial slice ranges."""
    apex: Tuple[int, int]
    mid: Tuple[int, int]
    base: Tuple[int, int]

    def range(self, region: str) -> Tuple[int, int]:
        return getattr(self, region)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def region_split(ref: Mask) -> RegionSplit:
    """
    Split the reference's foreground slice extent into thirds along
    increasing slice index: apex first, base last.
    """
    occupied = np.flatnonzero(ref.foreground.any(axis=(1, 2)))
    if occupied.size < 3:
        raise DegenerateMaskError(
            f"apex/base split needs >= 3 foreground slices, reference has {occupied.size}"
        )
    first, last = int(occupied[0]), int(occupied[-1])
    n = last - first + 1
    apex_end = first + _round_half_up(n / 3)
    base_start = first + _round_half_up(2 * n / 3)
    return RegionSplit((first, apex_end), (apex_end, base_start), (base_start, last + 1))


def restrict(mask: Mask, slices: Tuple[int, int]) -> Mask:
    """Same geometry, foreground kept only inside the slice range."""
    values = np.zeros(mask.dims, dtype=np.uint8)
    lo, hi = slices
    values[lo:hi] = mask.values[lo:hi]
    return mask.with_values(values)


# ══════════════════════════════════════════════════════════════════
# Per-case evaluation
# ══════════════════════════════════════════════════════════════════

def _region_row(seg: Mask, ref: Mask) -> Dict[str, float]:
    row = {"dsc": dsc(seg, ref), "rvd": rvd(seg, ref)}
    if seg.count == 0 or ref.count == 0:
        row["abd"] = row["hd"] = float("nan")
    else:
        d_ab, d_ba = surface_distances(seg, ref)
        row["abd"] = float((d_ab.sum() + d_ba.sum()) / (d_ab.size + d_ba.size))
        row["hd"] = float(max(d_ab.max(), d_ba.max()))
    return row


def evaluate_case(seg: Mask, ref: Mask, case: str = "") -> List[Dict[str, Any]]:
    """
    Metric rows for one case: ``whole`` always, ``apex`` and ``base`` when
    the reference spans at least three slices. Surface metrics on an empty
    segmentation (or an empty restricted region) are NaN.
    """
    check_same_geometry(seg, ref, "segmentation and reference")
    if ref.count == 0:
        raise DegenerateMaskError(f"case '{case}': reference mask is empty")
    if seg.count == 0:
        logger.warning("case '%s': empty segmentation, surface metrics are NaN", case)

    rows = [{"case": case, "region": "whole", **_region_row(seg, ref)}]
    try:
        split = region_split(ref)
    except DegenerateMaskError:
        logger.info("case '%s': fewer than 3 foreground slices, no apex/base rows", case)
        return rows
    for region in ("apex", "base"):
        span = split.range(region)
        rows.append({"case": case, "region": region,
                     **_region_row(restrict(seg, span), restrict(ref, span))})
    return rows


# ══════════════════════════════════════════════════════════════════
# Statistics
# ══════════════════════════════════════════════════════════════════

@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    significant: bool
    n: int
    mean_difference: float

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def paired_ttest(sample_a: Sequence[float], sample_b: Sequence[float],
                 alpha: float = SIGNIFICANCE) -> TTestResult:
    """
    Two-sided paired t-test.

    Raises:
        ShapeMismatchError: lengths differ or fewer than two pairs
        DegenerateVarianceError: all pairwise differences are equal
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeMismatchError(f"paired samples must be equal-length 1D, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise ShapeMismatchError(f"paired t-test needs at least 2 pairs, got {a.size}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise ValueError("paired t-test samples must be finite")
    diff = a - b
    if np.ptp(diff) == 0:
        raise DegenerateVarianceError("paired differences have zero variance")
    result = stats.ttest_rel(a, b)
    t, p = float(result.statistic), float(result.pvalue)
    return TTestResult(t=t, p=p, significant=bool(p < alpha), n=int(a.size),
                       mean_difference=float(diff.mean()))


def five_number_summary(values: Sequence[float]) -> Dict[str, float]:
    """min, q1, median, q3, max (the data behind a box plot)."""
    arr = np.asarray(values, dtype=np.float64)
    arr = arr[~np.isnan(arr)]
    if arr.size == 0:
        return {k: float("nan") for k in ("min", "q1", "median", "q3", "max")}
    q = np.percentile(arr, [0, 25, 50, 75, 100])
    return dict(zip(("min", "q1", "median", "q3", "max"), (float(x) for x in q)))


# ══════════════════════════════════════════════════════════════════
# Reports
# ══════════════════════════════════════════════════════════════════

class SegmentationAnalyzer:
    """
    Per-case metric table with aggregation and paired comparison.

    Rows have columns case, region, dsc, rvd, abd, hd. Cases keep the
    order in which they were evaluated.
    """

    def __init__(self, rows: Union[pd.DataFrame, List[Dict[str, Any]]], name: str = ""):
        frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(rows)
        if frame.empty:
            frame = pd.DataFrame(columns=["case", "region", *METRICS])
        missing = {"case", "region", *METRICS} - set(frame.columns)
        if missing:
            raise ValueError(f"metric table missing columns: {sorted(missing)}")
        self.frame = frame[["case", "region", *METRICS]].reset_index(drop=True)
        self.name = name

    @classmethod
    def from_cases(cls, pairs: Sequence[Tuple[str, Mask, Mask]], workers: int = 1,
                   name: str = "") -> "SegmentationAnalyzer":
        """Evaluate (case, seg, ref) triples; rows are merged in input order."""
        results = ordered_map(lambda item: evaluate_case(item[1], item[2], item[0]), pairs, workers)
        return cls([row for rows in results for row in rows], name=name)

    @classmethod
    def from_csv(cls, path: Union[str, Path], name: str = "") -> "SegmentationAnalyzer":
        """Read a metrics.csv written by ``to_csv``; aggregate rows are dropped."""
        frame = pd.read_csv(path, dtype={"case": str})
        frame = frame[frame["case"] != "mean±std"].copy()
        for metric in METRICS:
            frame[metric] = frame[metric].astype(float)
        return cls(frame, name=name or Path(path).parent.name)

    def region(self, region: str) -> pd.DataFrame:
        return self.frame[self.frame["region"] == region]

    def values(self, metric: str = "dsc", region: str = "whole") -> np.ndarray:
        return self.region(region)[metric].to_numpy(dtype=np.float64)

    def analyze(self) -> Dict[str, Dict[str, Dict[str, float]]]:
        """
        Returns:
            {region: {metric: {"mean", "std", "n"}}}; NaN entries are skipped
        """
        out: Dict[str, Dict[str, Dict[str, float]]] = {}
        for region in REGIONS:
            sub = self.region(region)
            if sub.empty:
                continue
            out[region] = {}
            for metric in METRICS:
                col = sub[metric].astype(float).dropna()
                out[region][metric] = {
                    "mean": float(col.mean()) if len(col) else float("nan"),
                    "std": float(col.std(ddof=1)) if len(col) > 1 else 0.0,
                    "n": int(len(col)),
                }
        return out

    def aggregate_frame(self) -> pd.DataFrame:
        """One 'mean±std' row per region."""
        rows = []
        for region, metrics in self.analyze().items():
            row = {"case": "mean±std", "region": region}
            for metric in METRICS:
                m = metrics[metric]
                row[metric] = f"{m['mean']:.4f}±{m['std']:.4f}"
            rows.append(row)
        return pd.DataFrame(rows, columns=["case", "region", *METRICS])

    def to_csv(self, path: Union[str, Path]) -> None:
        cases = self.frame.copy()
        for metric in METRICS:
            cases[metric] = cases[metric].map(lambda v: f"{float(v):.6f}")
        pd.concat([cases, self.aggregate_frame()], ignore_index=True).to_csv(path, index=False)
        logger.info("metrics written to %s", path)

    def compare(self, other: "SegmentationAnalyzer", metric: str = "dsc",
                region: str = "whole") -> TTestResult:
        """Paired t-test of this result set against ``other`` on shared cases."""
        mine = self.region(region).set_index("case")[metric]
        theirs = other.region(region).set_index("case")[metric]
        shared = [c for c in mine.index if c in theirs.index]
        if len(shared) != len(mine) or len(shared) != len(theirs):
            logger.warning("comparing on %d shared cases (%d vs %d)", len(shared), len(mine), len(theirs))
        return paired_ttest(mine.loc[shared].astype(float), theirs.loc[shared].astype(float))

    def print_report(self) -> None:
        title = f" {self.name}" if self.name else ""
        print(f"\nSegmentation metrics{title} ({self.region('whole').shape[0]} cases)")
        print("-" * 60)
        for region, metrics in self.analyze().items():
            cells = [f"{metric.upper()} {m['mean']:.2f}±{m['std']:.2f}" for metric, m in metrics.items()]
            print(f"{region:<6} " + "  ".join(cells))


def write_ttest_csv(path: Union[str, Path], results: Dict[str, TTestResult]) -> None:
    """One row per compared result set."""
    frame = pd.DataFrame([{"name": name, **res.to_dict()} for name, res in results.items()],
                         columns=["name", "t", "p", "significant", "n", "mean_difference"])
    frame.to_csv(path, index=False)
