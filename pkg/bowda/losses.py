"""
Segmentation and adversarial losses with analytic gradients.

Every loss takes probabilities (a Volume or a numpy array, optionally
batched as (N, ..., D, H, W)) and returns a LossValue whose gradients are
keyed by input name. Expectations are means over voxels and batch;
logs are natural and probabilities are clamped to [eps, 1 - eps], with
zero gradient where the clamp is active.
"""

from typing import Optional, Union

import numpy as np

from utils.config_validator import LossConfig
from .boundary import boundary_array, distance_array
from .data_structures import LossValue, Volume
from .errors import ShapeMismatchError

ArrayLike = Union[Volume, np.ndarray]


def _values(x: ArrayLike) -> np.ndarray:
    if isinstance(x, Volume):
        return x.values.astype(np.float64)
    return np.asarray(x, dtype=np.float64)


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"{what}: shapes differ {a.shape} vs {b.shape}")


def _clamp(p: np.ndarray, eps: float):
    clamped = np.clip(p, eps, 1.0 - eps)
    active = (p > eps) & (p < 1.0 - eps)
    return clamped, active


def _as_samples(a: np.ndarray) -> np.ndarray:
    """View an (..., D, H, W) array as (samples, D, H, W)."""
    if a.ndim < 3:
        raise ShapeMismatchError(f"expected at least 3 spatial dims, got shape {a.shape}")
    return a.reshape((-1,) + a.shape[-3:])


def _spacing_of(x: ArrayLike, spacing) -> tuple:
    if spacing is not None:
        return tuple(spacing)
    if isinstance(x, Volume):
        return x.spacing
    return (1.0, 1.0, 1.0)


# ══════════════════════════════════════════════════════════════════
# Segmentation losses
# ══════════════════════════════════════════════════════════════════

def cross_entropy(pred: ArrayLike, target: ArrayLike, cfg: Optional[LossConfig] = None) -> LossValue:
    """Voxel-mean binary cross entropy."""
    cfg = cfg or LossConfig()
    p = _values(pred)
    y = _values(target)
    _same_shape(p, y, "cross_entropy")

    q, active = _clamp(p, cfg.eps)
    n = p.size
    value = float(-(y * np.log(q) + (1.0 - y) * np.log(1.0 - q)).sum() / n)
    grad = np.where(active, (q - y) / (q * (1.0 - q)) / n, 0.0)
    return LossValue(value, {"pred": grad}, {"ce": value})


def dist_loss(pred: ArrayLike, dmap: ArrayLike, cfg: Optional[LossConfig] = None,
              threshold: Optional[float] = None) -> LossValue:
    """
    beta * sum over predicted-boundary voxels of pred * distance.

    The predicted boundary comes from ``pred >= threshold`` and is held
    fixed for differentiation. Batched inputs give a per-sample term
    averaged over samples; ``dist_reduction = "mean"`` also divides by
    the voxels per sample.
    """
    cfg = cfg or LossConfig()
    threshold = cfg.threshold if threshold is None else threshold
    p = _values(pred)
    m = _values(dmap)
    _same_shape(p, m, "dist_loss")

    samples_p = _as_samples(p)
    samples_m = _as_samples(m)
    n_samples, voxels = samples_p.shape[0], int(np.prod(samples_p.shape[1:]))
    scale = cfg.beta / n_samples
    if cfg.dist_reduction == "mean":
        scale /= voxels

    grad = np.zeros_like(samples_p)
    value = 0.0
    for i in range(n_samples):
        edge = boundary_array(samples_p[i] >= threshold)
        if not edge.any():
            continue
        value += float((samples_p[i][edge] * samples_m[i][edge]).sum())
        grad[i][edge] = samples_m[i][edge]
    value *= scale
    grad *= scale
    return LossValue(value, {"pred": grad.reshape(p.shape)}, {"dist": value})


def target_distance_maps(target: ArrayLike, spacing=None) -> np.ndarray:
    """
    Distance maps of every sample of ``target``; samples without a
    boundary (all background or all foreground) get an all-zero map.
    """
    y = _values(target)
    spacing = _spacing_of(target, spacing)
    samples = _as_samples(y)
    out = np.zeros_like(samples)
    for i in range(samples.shape[0]):
        fg = samples[i] > 0.5
        if fg.any() and not fg.all():
            out[i] = distance_array(fg, spacing)
    return out.reshape(y.shape)


def bwsl(pred: ArrayLike, target: ArrayLike, cfg: Optional[LossConfig] = None,
         dmap: Optional[ArrayLike] = None, spacing=None) -> LossValue:
    """
    Boundary-weighted segmentation loss: dist_loss + cross_entropy.

    ``dmap`` defaults to the distance maps of ``target`` (in mm, using
    ``spacing`` or the target Volume's spacing).
    """
    cfg = cfg or LossConfig()
    if dmap is None:
        dmap = target_distance_maps(target, spacing)
    return dist_loss(pred, dmap, cfg) + cross_entropy(pred, target, cfg)


def segmentation_loss(kind: str, pred: ArrayLike, target: ArrayLike, cfg: LossConfig,
                      dmap: Optional[ArrayLike] = None, spacing=None) -> LossValue:
    if kind == "ce":
        return cross_entropy(pred, target, cfg)
    if kind == "bwsl":
        return bwsl(pred, target, cfg, dmap=dmap, spacing=spacing)
    raise ValueError(f"unknown segmentation loss '{kind}'")


# ══════════════════════════════════════════════════════════════════
# Adversarial losses
# ══════════════════════════════════════════════════════════════════

def _weights(w: Optional[ArrayLike], like: np.ndarray, alpha: float) -> np.ndarray:
    if w is None:
        return np.ones_like(like)
    w = _values(w)
    _same_shape(w, like, "weight map")
    return 1.0 + alpha * w


def bwtl_discriminator(d_src: ArrayLike, d_tgt: ArrayLike,
                       w_src: Optional[ArrayLike] = None, w_tgt: Optional[ArrayLike] = None,
                       cfg: Optional[LossConfig] = None) -> LossValue:
    """
    Boundary-weighted transfer loss for the discriminator:
    -mean[(1 + alpha W_s) ln D(s)] - mean[(1 + alpha W_t) ln(1 - D(t))].

    Omitted weight maps mean W = 0, the unweighted adversarial loss.
    """
    cfg = cfg or LossConfig()
    ds = _values(d_src)
    dt = _values(d_tgt)
    ws = _weights(w_src, ds, cfg.alpha)
    wt = _weights(w_tgt, dt, cfg.alpha)

    qs, active_s = _clamp(ds, cfg.eps)
    qt, active_t = _clamp(dt, cfg.eps)
    term_src = float(-(ws * np.log(qs)).sum() / ds.size)
    term_tgt = float(-(wt * np.log(1.0 - qt)).sum() / dt.size)
    grad_src = np.where(active_s, -ws / qs / ds.size, 0.0)
    grad_tgt = np.where(active_t, wt / (1.0 - qt) / dt.size, 0.0)
    return LossValue(
        term_src + term_tgt,
        {"d_src": grad_src, "d_tgt": grad_tgt},
        {"disc_src": term_src, "disc_tgt": term_tgt},
    )


def adversarial_generator_loss(d_tgt: ArrayLike, w_tgt: Optional[ArrayLike] = None,
                               cfg: Optional[LossConfig] = None) -> LossValue:
    """Non-saturating fooling term -mean[(1 + alpha W_t) ln D(t)]."""
    cfg = cfg or LossConfig()
    dt = _values(d_tgt)
    wt = _weights(w_tgt, dt, cfg.alpha)
    qt, active = _clamp(dt, cfg.eps)
    value = float(-(wt * np.log(qt)).sum() / dt.size)
    grad = np.where(active, -wt / qt / dt.size, 0.0)
    return LossValue(value, {"d_tgt": grad}, {"adv": value})


def total_loss(seg: LossValue, adv: LossValue, adv_weight: float = 1.0) -> LossValue:
    """Segmentation loss plus the weighted adversarial term."""
    return seg + adv.scaled(adv_weight)
