"""
Volume I/O, resampling and intensity normalization.

MetaImage support covers the uncompressed subset: a text header
(``.mhd``) pointing at a little-endian raw payload, or a ``.mha`` file
with ``ElementDataFile = LOCAL``. MetaImage lists sizes fastest axis
first (x y z = width height depth); internally everything is
(depth, height, width).
"""

import logging
import math
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .data_structures import Mask, Volume
from .errors import DegenerateVarianceError, MetaImageError

logger = logging.getLogger(__name__)

ELEMENT_TYPES: Dict[str, np.dtype] = {
    "MET_UCHAR": np.dtype("<u1"),
    "MET_SHORT": np.dtype("<i2"),
    "MET_USHORT": np.dtype("<u2"),
    "MET_FLOAT": np.dtype("<f4"),
}

_TRUE = {"true", "1", "yes"}


# ══════════════════════════════════════════════════════════════════
# MetaImage
# ══════════════════════════════════════════════════════════════════

def _parse_header(path: Path) -> Tuple[Dict[str, str], int]:
    """Return header fields and the byte offset right after ElementDataFile."""
    fields: Dict[str, str] = {}
    with open(path, "rb") as f:
        offset = 0
        for raw in f:
            offset += len(raw)
            line = raw.decode("latin-1").strip()
            if not line:
                continue
            if "=" not in line:
                raise MetaImageError(f"{path}: malformed header line '{line}'", key=line.split()[0])
            key, value = (s.strip() for s in line.split("=", 1))
            fields[key] = value
            if key == "ElementDataFile":
                return fields, offset
    raise MetaImageError(f"{path}: header has no ElementDataFile entry", key="ElementDataFile")


def _ints(fields: Dict[str, str], key: str, count: int):
    try:
        values = [int(v) for v in fields[key].split()]
    except KeyError:
        raise MetaImageError("missing header key", key=key)
    except ValueError:
        raise MetaImageError(f"non-integer value '{fields[key]}'", key=key)
    if len(values) != count:
        raise MetaImageError(f"expected {count} values, got {len(values)}", key=key)
    return values


def _floats(fields: Dict[str, str], key: str, count: int):
    try:
        values = [float(v) for v in fields[key].split()]
    except ValueError:
        raise MetaImageError(f"non-numeric value '{fields[key]}'", key=key)
    if len(values) != count:
        raise MetaImageError(f"expected {count} values, got {len(values)}", key=key)
    if any(v <= 0 for v in values):
        raise MetaImageError(f"spacing must be positive, got {values}", key=key)
    return values


def read_metaimage(path: Union[str, Path], as_mask: Optional[bool] = None) -> Union[Volume, Mask]:
    """
    Read a MetaImage volume.

    Args:
        path: ``.mhd`` header (raw payload beside it) or ``.mha`` with LOCAL data
        as_mask: True forces a Mask, False a Volume; None returns a Mask for
            integer payloads whose values are all 0 or 1

    Raises:
        FileNotFoundError: header or payload missing
        MetaImageError: malformed header, unsupported type or payload size mismatch
    """
    path = Path(path)
    fields, data_offset = _parse_header(path)

    ndims = _ints(fields, "NDims", 1)[0]
    if ndims != 3:
        raise MetaImageError(f"only 3D images are supported, got NDims = {ndims}", key="NDims")
    size_xyz = _ints(fields, "DimSize", 3)
    if any(s < 1 for s in size_xyz):
        raise MetaImageError(f"dimensions must be >= 1, got {size_xyz}", key="DimSize")
    spacing_xyz = _floats(fields, "ElementSpacing", 3) if "ElementSpacing" in fields else [1.0, 1.0, 1.0]

    element_type = fields.get("ElementType")
    if element_type is None:
        raise MetaImageError("missing header key", key="ElementType")
    if element_type not in ELEMENT_TYPES:
        raise MetaImageError(f"unsupported element type '{element_type}'", key="ElementType")
    if fields.get("CompressedData", "False").lower() in _TRUE:
        raise MetaImageError("compressed payloads are not supported", key="CompressedData")
    for order_key in ("BinaryDataByteOrderMSB", "ElementByteOrderMSB"):
        if fields.get(order_key, "False").lower() in _TRUE:
            raise MetaImageError("big-endian payloads are not supported", key=order_key)
    channels = fields.get("ElementNumberOfChannels", "1")
    if channels != "1":
        raise MetaImageError(f"only single-channel images are supported, got {channels}",
                             key="ElementNumberOfChannels")

    dtype = ELEMENT_TYPES[element_type]
    data_file = fields["ElementDataFile"]
    if data_file == "LOCAL":
        with open(path, "rb") as f:
            f.seek(data_offset)
            payload = f.read()
    else:
        with open(path.parent / data_file, "rb") as f:
            payload = f.read()

    expected = int(np.prod(size_xyz)) * dtype.itemsize
    if len(payload) != expected:
        raise MetaImageError(
            f"payload has {len(payload)} bytes, DimSize {size_xyz} x {element_type} needs {expected}",
            key="ElementDataFile",
        )

    width, height, depth = size_xyz
    values = np.frombuffer(payload, dtype=dtype).reshape(depth, height, width)
    spacing = tuple(reversed(spacing_xyz))

    is_binary = np.issubdtype(dtype, np.integer) and bool(np.isin(values, (0, 1)).all())
    if as_mask is None:
        as_mask = is_binary
    if as_mask:
        return Mask(values, spacing)
    return Volume(values.astype(np.float32), spacing)


def write_metaimage(vol: Volume, path: Union[str, Path]) -> None:
    """
    Write a ``.mhd`` header plus ``.raw`` payload.

    Masks are stored as MET_UCHAR, other volumes as MET_FLOAT, so the
    round trip is value-exact.
    """
    path = Path(path)
    if path.suffix.lower() != ".mhd":
        path = path.with_suffix(".mhd")
    raw_path = path.with_suffix(".raw")

    element_type = "MET_UCHAR" if isinstance(vol, Mask) else "MET_FLOAT"
    payload = np.ascontiguousarray(vol.values, dtype=ELEMENT_TYPES[element_type])

    depth, height, width = vol.dims
    sd, sh, sw = vol.spacing
    header = "\n".join([
        "ObjectType = Image",
        "NDims = 3",
        "BinaryData = True",
        "BinaryDataByteOrderMSB = False",
        "CompressedData = False",
        f"ElementSpacing = {sw!r} {sh!r} {sd!r}",
        f"DimSize = {width} {height} {depth}",
        f"ElementType = {element_type}",
        f"ElementDataFile = {raw_path.name}",
    ]) + "\n"

    with open(raw_path, "wb") as f:
        f.write(payload.tobytes(order="C"))
    with open(path, "w", encoding="ascii", newline="\n") as f:
        f.write(header)
    logger.debug("wrote %s (%s, dims %s)", path, element_type, vol.dims)


# ══════════════════════════════════════════════════════════════════
# Resampling
# ══════════════════════════════════════════════════════════════════

def resampled_dims(dims: Sequence[int], spacing: Sequence[float],
                   target_spacing: Sequence[float]) -> Tuple[int, int, int]:
    """round(extent / target spacing) per axis (halves round up), at least 1."""
    out = []
    for d, s, t in zip(dims, spacing, target_spacing):
        out.append(max(1, int(math.floor(d * s / t + 0.5))))
    return tuple(out)  # type: ignore[return-value]


def _check_target(target_spacing: Sequence[float]) -> Tuple[float, float, float]:
    target = tuple(float(t) for t in target_spacing)
    if len(target) != 3 or any(t <= 0 for t in target):
        raise ValueError(f"target spacing must have 3 positive components, got {target_spacing}")
    return target  # type: ignore[return-value]


def sample_coordinates(n_in: int, s_in: float, n_out: int, s_out: float) -> np.ndarray:
    """
    Input-index coordinate of every output voxel center along one axis,
    clamped to [0, n_in - 1].
    """
    i = np.arange(n_out, dtype=np.float64)
    c = (i + 0.5) * s_out / s_in - 0.5
    return np.clip(c, 0.0, n_in - 1.0)


def resample_trilinear(vol: Volume, target_spacing: Sequence[float]) -> Volume:
    """Trilinear resampling at output voxel centers with clamp-to-edge."""
    target = _check_target(target_spacing)
    out_dims = resampled_dims(vol.dims, vol.spacing, target)
    axes = [
        sample_coordinates(n_in, s_in, n_out, s_out)
        for n_in, s_in, n_out, s_out in zip(vol.dims, vol.spacing, out_dims, target)
    ]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"))
    values = ndimage.map_coordinates(
        vol.values.astype(np.float64), grid, order=1, mode="nearest", prefilter=False
    )
    logger.debug("resample_trilinear %s @ %s -> %s @ %s", vol.dims, vol.spacing, out_dims, target)
    return Volume(values.astype(np.float32), target)


def nearest_indices(n_in: int, s_in: float, n_out: int, s_out: float) -> np.ndarray:
    """Nearest input index per output voxel; exact ties go to the lower index."""
    c = sample_coordinates(n_in, s_in, n_out, s_out)
    idx = np.ceil(c - 0.5).astype(np.int64)
    return np.clip(idx, 0, n_in - 1)


def resample_mask_nearest(mask: Mask, target_spacing: Sequence[float]) -> Mask:
    """Nearest-neighbour resampling; the output stays binary."""
    target = _check_target(target_spacing)
    out_dims = resampled_dims(mask.dims, mask.spacing, target)
    idx = [
        nearest_indices(n_in, s_in, n_out, s_out)
        for n_in, s_in, n_out, s_out in zip(mask.dims, mask.spacing, out_dims, target)
    ]
    values = mask.values[np.ix_(*idx)]
    return Mask(values, target)


# ══════════════════════════════════════════════════════════════════
# Normalization
# ══════════════════════════════════════════════════════════════════

def znormalize(vol: Volume) -> Volume:
    """
    Zero mean, unit population standard deviation.

    Reductions run in double precision over the C-ordered values.
    """
    if vol.values.size < 2:
        raise DegenerateVarianceError(f"znormalize needs at least 2 voxels, got {vol.values.size}")
    values = vol.values.astype(np.float64)
    mean = values.mean()
    std = values.std()
    if std < 1e-12:
        raise DegenerateVarianceError(f"volume has (near) zero variance: std = {std:.3e}")
    return vol.with_values(((values - mean) / std).astype(np.float32))
