#!/usr/bin/env python3
"""
Volume I/O, resampling and normalization tests.

Covers:
1. MetaImage round trips for images and masks (.mhd/.raw and .mha LOCAL)
2. Header errors reported with the offending key
3. Trilinear and nearest-neighbour resampling geometry
4. z-normalization statistics
"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from bowda.data_structures import Mask, Volume, check_same_geometry
from bowda.errors import DegenerateVarianceError, MetaImageError, ShapeMismatchError
from bowda.volume import (
    read_metaimage,
    resample_mask_nearest,
    resample_trilinear,
    resampled_dims,
    write_metaimage,
    znormalize,
)


def _write_header(path: Path, lines, payload: bytes = None):
    text = "\n".join(lines) + "\n"
    path.write_bytes(text.encode("ascii") + (payload or b""))


# ── Data structures ──

def test_volume_is_read_only_float32():
    vol = Volume(np.arange(24).reshape(2, 3, 4), (2.0, 1.0, 0.5))
    assert vol.values.dtype == np.float32
    assert vol.dims == (2, 3, 4)
    assert vol.voxel_volume == pytest.approx(1.0)
    assert vol.extent == pytest.approx((4.0, 3.0, 2.0))
    with pytest.raises(ValueError):
        vol.values[0, 0, 0] = 1.0


def test_volume_rejects_bad_shapes_and_spacing():
    with pytest.raises(ShapeMismatchError):
        Volume(np.zeros((4, 4)))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))


def test_mask_values_must_be_binary():
    with pytest.raises(ValueError):
        Mask(np.full((2, 2, 2), 2))
    mask = Mask(np.ones((2, 2, 2), dtype=bool))
    assert mask.values.dtype == np.uint8
    assert mask.count == 8
    assert mask.is_degenerate(), "all-foreground mask is degenerate"


def test_check_same_geometry():
    a = Volume(np.zeros((2, 2, 2)), (1.0, 1.0, 1.0))
    check_same_geometry(a, Volume(np.ones((2, 2, 2)), (1.0, 1.0, 1.0)))
    with pytest.raises(ShapeMismatchError):
        check_same_geometry(a, Volume(np.zeros((2, 2, 3))))
    with pytest.raises(ShapeMismatchError):
        check_same_geometry(a, Volume(np.zeros((2, 2, 2)), (2.0, 1.0, 1.0)))


# ── MetaImage ──

def test_image_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    vol = Volume(rng.standard_normal((3, 4, 5)), (2.5, 0.7, 0.7))
    write_metaimage(vol, tmp_path / "img.mhd")
    assert (tmp_path / "img.raw").exists()

    back = read_metaimage(tmp_path / "img.mhd")
    assert isinstance(back, Volume) and not isinstance(back, Mask)
    assert back.dims == vol.dims
    assert back.spacing == vol.spacing
    assert np.array_equal(back.values, vol.values), "float payload must round-trip exactly"


def test_mask_round_trip(tmp_path):
    values = np.zeros((3, 4, 5), dtype=np.uint8)
    values[1, 1:3, 2:4] = 1
    mask = Mask(values, (1.0, 2.0, 3.0))
    write_metaimage(mask, tmp_path / "seg")

    header = (tmp_path / "seg.mhd").read_text()
    assert "MET_UCHAR" in header
    assert "DimSize = 5 4 3" in header, "MetaImage sizes are listed fastest axis first"

    back = read_metaimage(tmp_path / "seg.mhd")
    assert isinstance(back, Mask)
    assert back.spacing == (1.0, 2.0, 3.0)
    assert np.array_equal(back.values, values)


def test_read_mha_local(tmp_path):
    payload = np.array([0, 1, 1, 0, 1, 0, 0, 1], dtype="<u1").tobytes()
    _write_header(tmp_path / "local.mha", [
        "ObjectType = Image",
        "NDims = 3",
        "DimSize = 2 2 2",
        "ElementSpacing = 1 1 3",
        "ElementType = MET_UCHAR",
        "ElementDataFile = LOCAL",
    ], payload)
    mask = read_metaimage(tmp_path / "local.mha")
    assert isinstance(mask, Mask)
    assert mask.spacing == (3.0, 1.0, 1.0)
    assert mask.values.reshape(-1).tolist() == [0, 1, 1, 0, 1, 0, 0, 1]


def test_sixteen_bit_payload_widens_to_float(tmp_path):
    (tmp_path / "ct.raw").write_bytes(np.array([0, 1000], dtype="<i2").tobytes())
    _write_header(tmp_path / "ct.mhd", [
        "NDims = 3",
        "DimSize = 2 1 1",
        "ElementType = MET_SHORT",
        "ElementDataFile = ct.raw",
    ])
    vol = read_metaimage(tmp_path / "ct.mhd")
    assert not isinstance(vol, Mask), "non-binary integers load as an image"
    assert vol.values.dtype == np.float32
    assert vol.values.reshape(-1).tolist() == [0.0, 1000.0]
    assert vol.spacing == (1.0, 1.0, 1.0), "missing ElementSpacing defaults to 1 mm"


def test_payload_size_mismatch(tmp_path):
    (tmp_path / "short.raw").write_bytes(bytes(7))
    _write_header(tmp_path / "short.mhd", [
        "NDims = 3",
        "DimSize = 2 2 2",
        "ElementType = MET_UCHAR",
        "ElementDataFile = short.raw",
    ])
    with pytest.raises(MetaImageError) as info:
        read_metaimage(tmp_path / "short.mhd")
    assert info.value.key == "ElementDataFile"


@pytest.mark.parametrize("line,key", [
    ("ElementType = MET_DOUBLE", "ElementType"),
    ("CompressedData = True", "CompressedData"),
    ("BinaryDataByteOrderMSB = True", "BinaryDataByteOrderMSB"),
])
def test_unsupported_headers_name_their_key(tmp_path, line, key):
    (tmp_path / "x.raw").write_bytes(bytes(8))
    lines = ["NDims = 3", "DimSize = 2 2 2", "ElementType = MET_UCHAR", line, "ElementDataFile = x.raw"]
    if line.startswith("ElementType"):
        lines.pop(2)
    _write_header(tmp_path / "x.mhd", lines)
    with pytest.raises(MetaImageError) as info:
        read_metaimage(tmp_path / "x.mhd")
    assert info.value.key == key


def test_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_metaimage(tmp_path / "absent.mhd")
    _write_header(tmp_path / "orphan.mhd", [
        "NDims = 3", "DimSize = 1 1 1", "ElementType = MET_UCHAR", "ElementDataFile = orphan.raw",
    ])
    with pytest.raises(FileNotFoundError):
        read_metaimage(tmp_path / "orphan.mhd")
    with pytest.raises(FileNotFoundError):
        write_metaimage(Volume(np.zeros((1, 1, 1))), tmp_path / "no_such_dir" / "v.mhd")


# ── Resampling ──

def test_resampled_dims_round_half_up():
    assert resampled_dims((10, 7, 4), (1.0, 1.0, 1.0), (1.0, 2.0, 8.0)) == (10, 4, 1)
    assert resampled_dims((4, 4, 4), (1.0, 1.0, 1.0), (0.75, 1.0, 1.0)) == (5, 4, 4)


def test_resample_identity_spacing():
    rng = np.random.default_rng(1)
    vol = Volume(rng.standard_normal((3, 5, 4)), (1.5, 1.0, 0.5))
    same = resample_trilinear(vol, vol.spacing)
    assert same.dims == vol.dims
    assert np.allclose(same.values, vol.values, atol=1e-6)


def test_resample_constant_stays_constant():
    vol = Volume(np.full((4, 6, 6), 7.25), (1.0, 1.0, 1.0))
    out = resample_trilinear(vol, (0.7, 1.3, 2.0))
    assert np.allclose(out.values, 7.25, atol=1e-6)


def test_resample_ramp_samples_voxel_centers():
    vol = Volume(np.arange(4, dtype=np.float32).reshape(1, 1, 4), (1.0, 1.0, 1.0))
    out = resample_trilinear(vol, (1.0, 1.0, 2.0))
    assert out.dims == (1, 1, 2)
    assert out.spacing == (1.0, 1.0, 2.0)
    assert np.allclose(out.values.reshape(-1), [0.5, 2.5], atol=1e-6)


def test_resample_stays_within_input_range():
    rng = np.random.default_rng(2)
    vol = Volume(rng.uniform(-3, 5, (5, 6, 7)), (2.0, 0.8, 0.8))
    out = resample_trilinear(vol, (1.0, 1.1, 0.6))
    assert out.values.min() >= vol.values.min() - 1e-6
    assert out.values.max() <= vol.values.max() + 1e-6


def _brute_nearest(n_in, s_in, n_out, s_out):
    centers_in = (np.arange(n_in) + 0.5) * s_in
    return np.array([int(np.argmin(np.abs(centers_in - (i + 0.5) * s_out))) for i in range(n_out)])


def test_mask_nearest_matches_brute_force():
    values = (np.indices((4, 4, 4)).sum(axis=0) % 2).astype(np.uint8)
    mask = Mask(values, (1.0, 1.0, 1.0))
    target = (2.0, 0.75, 1.0)
    out = resample_mask_nearest(mask, target)
    assert out.dims == resampled_dims(mask.dims, mask.spacing, target)
    assert set(np.unique(out.values)) <= {0, 1}

    idx = [_brute_nearest(n, s, m, t) for n, s, m, t in zip(mask.dims, mask.spacing, out.dims, target)]
    expected = values[np.ix_(*idx)]
    assert np.array_equal(out.values, expected)


def test_resample_rejects_bad_spacing():
    vol = Volume(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        resample_trilinear(vol, (1.0, -1.0, 1.0))


# ── Normalization ──

def test_znormalize_small_example():
    out = znormalize(Volume(np.array([1.0, 2.0, 3.0]).reshape(1, 1, 3)))
    assert np.allclose(out.values.reshape(-1), [-1.2247, 0.0, 1.2247], atol=1e-4)


def test_znormalize_statistics_and_idempotence():
    rng = np.random.default_rng(3)
    vol = Volume(rng.standard_normal((4, 5, 6)) * 12 + 40, (1.0, 1.0, 1.0))
    once = znormalize(vol)
    values = once.values.astype(np.float64)
    assert abs(values.mean()) < 1e-6
    assert abs(values.std() - 1.0) < 1e-6
    twice = znormalize(once)
    assert np.allclose(twice.values, once.values, atol=2e-6)


def test_znormalize_affine_invariance():
    rng = np.random.default_rng(4)
    raw = rng.standard_normal((3, 4, 5))
    base = znormalize(Volume(raw))
    shifted = znormalize(Volume(3.5 * raw - 2.0))
    assert np.allclose(base.values, shifted.values, atol=1e-5)


def test_znormalize_degenerate():
    with pytest.raises(DegenerateVarianceError):
        znormalize(Volume(np.full((2, 2, 2), 4.0)))
    with pytest.raises(DegenerateVarianceError):
        znormalize(Volume(np.ones((1, 1, 1))))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
