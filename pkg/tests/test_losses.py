#!/usr/bin/env python3
"""
Segmentation and adversarial loss tests: reference values, limiting cases
and analytic gradients against central differences.
"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from bowda import losses
from bowda.boundary import distance_map
from bowda.data_structures import LossValue, Mask
from bowda.errors import ShapeMismatchError
from utils.config_validator import LossConfig

LN2 = float(np.log(2.0))


def _numeric_grad(fn, x: np.ndarray, coords, eps: float = 1e-6) -> np.ndarray:
    flat = x.reshape(-1)
    out = []
    for c in coords:
        orig = flat[c]
        flat[c] = orig + eps
        plus = fn(x).value
        flat[c] = orig - eps
        minus = fn(x).value
        flat[c] = orig
        out.append((plus - minus) / (2 * eps))
    return np.array(out)


def _cube_target(shape=(10, 10, 10), lo=2, hi=6, shift=0):
    values = np.zeros(shape)
    values[lo:hi, lo:hi, lo + shift:hi + shift] = 1.0
    return values


# ── Cross entropy ──

def test_ce_uniform_prediction_is_ln2():
    rng = np.random.default_rng(0)
    target = (rng.random((3, 4, 5)) < 0.3).astype(float)
    loss = losses.cross_entropy(np.full(target.shape, 0.5), target)
    assert loss.value == pytest.approx(LN2, abs=1e-12)
    assert loss.components == {"ce": loss.value}


def test_ce_reference_values():
    assert losses.cross_entropy(np.full((1, 1, 1), 0.25), np.ones((1, 1, 1))).value == pytest.approx(1.3863, abs=1e-4)
    target = _cube_target()
    eps = LossConfig().eps
    assert losses.cross_entropy(target.copy(), target).value <= -np.log(1 - eps) + 1e-12


def test_ce_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    pred = rng.uniform(0.1, 0.9, (3, 4, 4))
    target = (rng.random(pred.shape) < 0.5).astype(float)
    loss = losses.cross_entropy(pred, target)
    coords = rng.choice(pred.size, 10, replace=False)
    numeric = _numeric_grad(lambda p: losses.cross_entropy(p, target), pred, coords)
    assert np.allclose(loss.grads["pred"].reshape(-1)[coords], numeric, rtol=1e-5, atol=1e-9)


def test_ce_gradient_zero_where_clamped():
    pred = np.array([0.0, 0.5, 1.0]).reshape(1, 1, 3)
    grad = losses.cross_entropy(pred, np.array([1.0, 1.0, 0.0]).reshape(1, 1, 3)).grads["pred"]
    assert grad.reshape(-1)[0] == 0.0 and grad.reshape(-1)[2] == 0.0
    assert grad.reshape(-1)[1] != 0.0


def test_shape_mismatch():
    with pytest.raises(ShapeMismatchError):
        losses.cross_entropy(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


# ── Distance loss and BWSL ──

def test_dist_loss_zero_when_boundaries_coincide():
    target = _cube_target()
    dmap = distance_map(Mask(target)).values
    assert losses.dist_loss(target.copy(), dmap).value == 0.0
    assert losses.dist_loss(np.zeros_like(target), dmap).value == 0.0, "empty prediction has no boundary"


def test_dist_loss_of_shifted_cube():
    cfg = LossConfig(beta=0.1, dist_reduction="sum")
    target = _cube_target()
    pred = _cube_target(shift=1)
    dmap = distance_map(Mask(target)).values.astype(np.float64)

    # the predicted cube spans [2, 6) x [2, 6) x [3, 7); its shell is every voxel on a face
    idx = np.argwhere(pred.astype(bool))
    on_face = np.isin(idx[:, 0], (2, 5)) | np.isin(idx[:, 1], (2, 5)) | np.isin(idx[:, 2], (3, 6))
    shell = idx[on_face]
    assert len(shell) == 56
    expected = 0.1 * sum(dmap[tuple(p)] for p in shell)

    loss = losses.dist_loss(pred, dmap, cfg)
    assert loss.value == pytest.approx(expected, rel=1e-9)
    assert loss.value > 0
    grad = loss.grads["pred"]
    assert np.allclose(grad[tuple(shell.T)], 0.1 * dmap[tuple(shell.T)])
    assert np.count_nonzero(grad) <= len(shell)


def test_dist_reduction_mean_divides_by_voxels():
    target = _cube_target()
    pred = _cube_target(shift=1) * 0.9
    dmap = distance_map(Mask(target)).values
    total = losses.dist_loss(pred, dmap, LossConfig(dist_reduction="sum")).value
    mean = losses.dist_loss(pred, dmap, LossConfig(dist_reduction="mean")).value
    assert mean == pytest.approx(total / target.size)


def test_bwsl_is_dist_plus_ce():
    rng = np.random.default_rng(2)
    target = _cube_target()
    pred = np.clip(target * 0.8 + rng.uniform(0, 0.3, target.shape), 0.01, 0.99)
    cfg = LossConfig()
    dmap = losses.target_distance_maps(target)
    combined = losses.bwsl(pred, target, cfg, dmap=dmap)
    parts = losses.dist_loss(pred, dmap, cfg).value + losses.cross_entropy(pred, target, cfg).value
    assert combined.value == pytest.approx(parts, rel=1e-12)
    assert set(combined.components) == {"dist", "ce"}


def test_bwsl_with_zero_beta_equals_ce():
    rng = np.random.default_rng(3)
    target = _cube_target()
    pred = rng.uniform(0.05, 0.95, target.shape)
    cfg = LossConfig(beta=0.0)
    assert losses.bwsl(pred, target, cfg).value == losses.cross_entropy(pred, target, cfg).value


def test_segmentation_loss_by_name():
    rng = np.random.default_rng(5)
    target = _cube_target()
    pred = rng.uniform(0.05, 0.95, target.shape)
    cfg = LossConfig()
    assert losses.segmentation_loss("ce", pred, target, cfg).value == losses.cross_entropy(pred, target, cfg).value
    dmap = 2.0 * losses.target_distance_maps(target)
    assert (losses.segmentation_loss("bwsl", pred, target, cfg, dmap=dmap).value
            == losses.bwsl(pred, target, cfg, dmap=dmap).value)
    with pytest.raises(ValueError):
        losses.segmentation_loss("dice", pred, target, cfg)


def test_target_distance_maps_zero_for_degenerate_samples():
    batch = np.stack([np.zeros((4, 4, 4)), _cube_target((4, 4, 4), 1, 3), np.ones((4, 4, 4))])
    dmaps = losses.target_distance_maps(batch)
    assert not dmaps[0].any() and not dmaps[2].any()
    assert dmaps[1].max() > 0


def test_bwsl_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    target = _cube_target((6, 6, 6), 1, 4)
    pred = rng.uniform(0.05, 0.95, target.shape)
    # keep every voxel away from the threshold so the predicted boundary is stable
    pred[np.abs(pred - 0.5) < 0.05] += 0.1
    dmap = losses.target_distance_maps(target)
    fn = lambda p: losses.bwsl(p, target, dmap=dmap)
    coords = rng.choice(pred.size, 12, replace=False)
    numeric = _numeric_grad(fn, pred, coords)
    assert np.allclose(fn(pred).grads["pred"].reshape(-1)[coords], numeric, rtol=1e-5, atol=1e-9)


# ── Adversarial losses ──

def test_bwtl_perfect_discriminator_is_near_zero():
    shape = (2, 3, 3)
    loss = losses.bwtl_discriminator(np.ones(shape), np.zeros(shape), np.zeros(shape), np.zeros(shape))
    assert 0.0 <= loss.value < 1e-6


def test_bwtl_uniform_discriminator_is_two_ln2():
    rng = np.random.default_rng(5)
    shape = (2, 3, 3)
    loss = losses.bwtl_discriminator(np.full(shape, 0.5), np.full(shape, 0.5))
    assert loss.value == pytest.approx(2 * LN2)
    weighted = losses.bwtl_discriminator(np.full(shape, 0.5), np.full(shape, 0.5),
                                         rng.random(shape), rng.random(shape), LossConfig(alpha=0.0))
    assert weighted.value == pytest.approx(2 * LN2), "alpha = 0 ignores the weight maps"


def test_bwtl_unit_weights_double_the_source_term():
    rng = np.random.default_rng(6)
    shape = (2, 3, 3)
    d_src, d_tgt = rng.uniform(0.1, 0.9, shape), rng.uniform(0.1, 0.9, shape)
    plain = losses.bwtl_discriminator(d_src, d_tgt, np.zeros(shape), np.zeros(shape))
    doubled = losses.bwtl_discriminator(d_src, d_tgt, np.ones(shape), np.zeros(shape))
    assert doubled.components["disc_src"] == pytest.approx(2 * plain.components["disc_src"])
    assert doubled.components["disc_tgt"] == pytest.approx(plain.components["disc_tgt"])
    unweighted = losses.bwtl_discriminator(d_src, d_tgt)
    assert unweighted.value == pytest.approx(plain.value)


def test_bwtl_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    shape = (3, 3, 3)
    d_src, d_tgt = rng.uniform(0.05, 0.95, shape), rng.uniform(0.05, 0.95, shape)
    w_src, w_tgt = rng.random(shape), rng.random(shape)
    coords = rng.choice(d_src.size, 8, replace=False)
    loss = losses.bwtl_discriminator(d_src, d_tgt, w_src, w_tgt)
    num_src = _numeric_grad(lambda d: losses.bwtl_discriminator(d, d_tgt, w_src, w_tgt), d_src, coords)
    num_tgt = _numeric_grad(lambda d: losses.bwtl_discriminator(d_src, d, w_src, w_tgt), d_tgt, coords)
    assert np.allclose(loss.grads["d_src"].reshape(-1)[coords], num_src, rtol=1e-5)
    assert np.allclose(loss.grads["d_tgt"].reshape(-1)[coords], num_tgt, rtol=1e-5)


def test_generator_loss():
    shape = (2, 2, 2)
    assert losses.adversarial_generator_loss(np.ones(shape)).value < 1e-6
    half = losses.adversarial_generator_loss(np.full(shape, 0.5))
    assert half.value == pytest.approx(LN2)
    assert (half.grads["d_tgt"] < 0).all(), "raising D(t) lowers the fooling loss"

    rng = np.random.default_rng(8)
    d_tgt, w_tgt = rng.uniform(0.05, 0.95, shape), rng.random(shape)
    coords = np.arange(d_tgt.size)
    numeric = _numeric_grad(lambda d: losses.adversarial_generator_loss(d, w_tgt), d_tgt, coords)
    analytic = losses.adversarial_generator_loss(d_tgt, w_tgt).grads["d_tgt"].reshape(-1)
    assert np.allclose(analytic, numeric, rtol=1e-5)


def test_total_loss():
    seg = LossValue(0.7, {"pred": np.ones(3)}, {"ce": 0.7})
    adv = LossValue(0.2, {"d_tgt": np.full(2, 2.0)}, {"adv": 0.2})
    total = losses.total_loss(seg, adv, adv_weight=0.5)
    assert total.value == pytest.approx(0.8)
    assert np.allclose(total.grads["d_tgt"], 1.0)
    assert total.components == pytest.approx({"ce": 0.7, "adv": 0.1})
    assert losses.total_loss(seg, adv, adv_weight=0.0).value == pytest.approx(seg.value)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
