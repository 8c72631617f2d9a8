"""
Finite-difference gradient checks.

Networks and primitives are checked on the scalar objective
``sum(out * R)`` with a fixed random projection R; losses are checked on
their own value. Central differences run in double precision over up to
``max_coords`` randomly chosen coordinates per parameter group.
Relative error is ``|a - n| / max(|a|, |n|, floor)``.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Union

import numpy as np
import pandas as pd
from tqdm import tqdm

from utils.config_validator import DiscriminatorConfig, DRBConfig, LossConfig, SNetConfig
from .. import losses
from ..data_structures import LossValue
from . import ops
from .blocks import DenseResidualBlock
from .discriminator import Discriminator
from .snet import SNet
from .tensor import Tape, Tensor

logger = logging.getLogger(__name__)

NET_EPS = 1e-6
LOSS_EPS = 1e-4
DEFAULT_FLOOR = 1e-4


@dataclass
class GroupResult:
    name: str
    max_rel_error: float
    coords: int


@dataclass
class GradcheckReport:
    op: str
    tol: float
    groups: List[GroupResult] = field(default_factory=list)

    @property
    def max_error(self) -> float:
        return max((g.max_rel_error for g in self.groups), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([
            {"op": self.op, "group": g.name, "max_rel_error": g.max_rel_error,
             "coords": g.coords, "passed": g.max_rel_error < self.tol}
            for g in self.groups
        ])


def relative_error(a: float, n: float, floor: float = DEFAULT_FLOOR) -> float:
    return abs(a - n) / max(abs(a), abs(n), floor)


def _as_list(out) -> List[Tensor]:
    if isinstance(out, Tensor):
        return [out]
    flat: List[Tensor] = []
    for item in out:
        flat.extend(_as_list(item))
    return flat


def gradcheck(fn: Callable[[], Union[Tensor, Sequence]], tensors: Dict[str, Tensor], op: str = "op",
              eps: float = NET_EPS, tol: float = 1e-4, max_coords: int = 20,
              floor: float = DEFAULT_FLOOR, seed: int = 0) -> GradcheckReport:
    """
    Compare tape gradients of ``fn`` against central differences.

    ``fn`` takes no arguments and must be a deterministic function of the
    float64 ``tensors`` (reset any dropout generator inside it).
    """
    rng = np.random.default_rng(seed)
    for t in tensors.values():
        t.data = np.ascontiguousarray(t.data, dtype=np.float64)
        t.requires_grad = True
        t.zero_grad()

    projections = [rng.standard_normal(o.shape) for o in _as_list(fn())]

    def objective() -> float:
        return float(sum((o.data * r).sum() for o, r in zip(_as_list(fn()), projections)))

    with Tape() as tape:
        outs = _as_list(fn())
    tape.backward({o: r for o, r in zip(outs, projections)})

    report = GradcheckReport(op=op, tol=tol)
    for name, t in tensors.items():
        analytic = (t.grad if t.grad is not None else np.zeros_like(t.data)).reshape(-1)
        flat = t.data.reshape(-1)
        k = min(max_coords, flat.size)
        coords = np.sort(rng.choice(flat.size, size=k, replace=False))
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            f_plus = objective()
            flat[c] = orig - eps
            f_minus = objective()
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            worst = max(worst, relative_error(float(analytic[c]), numeric, floor))
        report.groups.append(GroupResult(name, worst, int(k)))
    logger.debug("gradcheck %s: max rel error %.3e", op, report.max_error)
    return report


def gradcheck_loss(fn: Callable[[Dict[str, np.ndarray]], LossValue], arrays: Dict[str, np.ndarray],
                   op: str = "loss", eps: float = LOSS_EPS, tol: float = 1e-4, max_coords: int = 20,
                   floor: float = DEFAULT_FLOOR, seed: int = 0) -> GradcheckReport:
    """Check the analytic gradients a loss returns for each key of ``arrays``."""
    rng = np.random.default_rng(seed)
    arrays = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
    analytic = fn(arrays).grads
    report = GradcheckReport(op=op, tol=tol)
    for name, arr in arrays.items():
        if name not in analytic:
            continue
        flat = arr.reshape(-1)
        grad = analytic[name].reshape(-1)
        k = min(max_coords, flat.size)
        coords = np.sort(rng.choice(flat.size, size=k, replace=False))
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + eps
            f_plus = fn(arrays).value
            flat[c] = orig - eps
            f_minus = fn(arrays).value
            flat[c] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            worst = max(worst, relative_error(float(grad[c]), numeric, floor))
        report.groups.append(GroupResult(name, worst, int(k)))
    return report


# ══════════════════════════════════════════════════════════════════
# Standard suite
# ══════════════════════════════════════════════════════════════════

def _away_from_zero(rng, shape, margin=0.05):
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(margin, 1.0, size=shape)


def _probabilities(rng, shape, avoid=(0.45, 0.55)):
    p = rng.uniform(0.05, 0.95, size=shape)
    lo, hi = avoid
    mid = (p > lo) & (p < hi)
    p[mid] = np.where(p[mid] < 0.5, lo - 0.05, hi + 0.05)
    return p


def _param_tensors(net, prefix: str = "") -> Dict[str, Tensor]:
    return {f"{prefix}{name}": p for name, p in net.named_parameters()}


def check_primitives(seed: int, tol: float, max_coords: int) -> List[GradcheckReport]:
    rng = np.random.default_rng(seed)
    reports = []

    def t(data):
        return Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)

    x = t(rng.standard_normal((1, 2, 4, 4, 4)))
    w = t(rng.standard_normal((3, 2, 3, 3, 3)) * 0.3)
    b = t(rng.standard_normal(3))
    reports.append(gradcheck(lambda: ops.conv3d(x, w, b, padding="same"),
                             {"input": x, "kernel": w, "bias": b}, "conv3d", tol=tol,
                             max_coords=max_coords, seed=seed))
    reports.append(gradcheck(lambda: ops.conv3d(x, w, b, stride=2, padding=1),
                             {"input": x, "kernel": w, "bias": b}, "conv3d_stride2", tol=tol,
                             max_coords=max_coords, seed=seed))

    y = t(rng.standard_normal((1, 3, 3, 3, 3)))
    wt = t(rng.standard_normal((3, 2, 2, 2, 2)) * 0.3)
    bt = t(rng.standard_normal(2))
    reports.append(gradcheck(lambda: ops.transposed_conv3d(y, wt, bt, stride=2),
                             {"input": y, "kernel": wt, "bias": bt}, "transposed_conv3d", tol=tol,
                             max_coords=max_coords, seed=seed))

    xp = t(rng.standard_normal((1, 2, 4, 4, 4)))
    reports.append(gradcheck(lambda: ops.avgpool3d(xp, 2), {"input": xp}, "avgpool3d", tol=tol,
                             max_coords=max_coords, seed=seed))

    xa = t(_away_from_zero(rng, (1, 2, 3, 3, 3)))
    reports.append(gradcheck(lambda: ops.relu(xa), {"input": xa}, "relu", tol=tol,
                             max_coords=max_coords, seed=seed))
    reports.append(gradcheck(lambda: ops.leaky_relu(xa, 0.2), {"input": xa}, "leaky_relu", tol=tol,
                             max_coords=max_coords, seed=seed))
    reports.append(gradcheck(lambda: ops.sigmoid(xa), {"input": xa}, "sigmoid", tol=tol,
                             max_coords=max_coords, seed=seed))

    xb = t(rng.standard_normal((2, 3, 2, 3, 3)) * 2 + 0.5)
    scale = t(rng.uniform(0.5, 1.5, 3))
    shift = t(rng.standard_normal(3))
    rm, rv = np.zeros(3), np.ones(3)
    reports.append(gradcheck(lambda: ops.batchnorm(xb, scale, shift, rm.copy(), rv.copy(), training=True),
                             {"input": xb, "scale": scale, "shift": shift}, "batchnorm_train", tol=tol,
                             max_coords=max_coords, seed=seed))
    run_mean, run_var = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)
    reports.append(gradcheck(lambda: ops.batchnorm(xb, scale, shift, run_mean, run_var, training=False),
                             {"input": xb, "scale": scale, "shift": shift}, "batchnorm_eval", tol=tol,
                             max_coords=max_coords, seed=seed))

    xd = t(rng.standard_normal((1, 2, 3, 3, 3)))
    mask = ops.dropout_mask(xd.shape, 0.3, rng, np.float64)
    reports.append(gradcheck(lambda: ops.dropout(xd, 0.3, None, True, mask=mask), {"input": xd},
                             "dropout", tol=tol, max_coords=max_coords, seed=seed))

    xs = t(rng.standard_normal((3, 2, 2, 2, 2)))
    reports.append(gradcheck(lambda: ops.split(ops.sigmoid(xs), [1, 2]), {"input": xs}, "split", tol=tol,
                             max_coords=max_coords, seed=seed))
    return reports


def check_drb(seed: int, tol: float, max_coords: int) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    cfg = DRBConfig(in_channels=3, layers=2, growth=2, dropout=0.3)
    block = DenseResidualBlock(cfg, rng).astype(np.float64).train()
    x = Tensor(rng.standard_normal((2, 3, 4, 4, 4)), requires_grad=True)

    def fn():
        block.set_rng(np.random.default_rng(seed + 1))
        return block(x)

    return gradcheck(fn, {"input": x, **_param_tensors(block)}, "drb", tol=tol,
                     max_coords=max_coords, seed=seed)


def mini_snet_config() -> SNetConfig:
    return SNetConfig(base_width=2, down_layers=[1, 1, 1], up_layers=[1, 1, 1], growth=2, dropout=0.0)


def check_snet(seed: int, tol: float, max_coords: int) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    net = SNet(mini_snet_config(), rng=rng).astype(np.float64).train()
    x = Tensor(rng.standard_normal((1, 1, 8, 16, 16)), requires_grad=True)
    return gradcheck(lambda: net(x), {"input": x, **_param_tensors(net)}, "snet", tol=tol,
                     max_coords=max_coords, seed=seed)


def check_discriminator(seed: int, tol: float, max_coords: int) -> GradcheckReport:
    rng = np.random.default_rng(seed)
    disc = Discriminator(DiscriminatorConfig(widths=[2, 2, 2]), feature_channels=3, rng=rng)
    disc.astype(np.float64).train()
    feats = [Tensor(rng.standard_normal((1, 3) + s), requires_grad=True)
             for s in ((2, 4, 4), (4, 8, 8), (8, 16, 16))]
    tensors = {f"feature{i}": f for i, f in enumerate(feats)}
    tensors.update(_param_tensors(disc))
    return gradcheck(lambda: disc(feats), tensors, "discriminator", tol=tol,
                     max_coords=max_coords, seed=seed)


def check_losses(seed: int, tol: float, max_coords: int) -> List[GradcheckReport]:
    rng = np.random.default_rng(seed)
    cfg = LossConfig()
    shape = (4, 4, 4)
    target = np.zeros(shape)
    target[1:3, 1:4, 0:3] = 1.0
    dmap = losses.target_distance_maps(target)
    pred = _probabilities(rng, shape)
    d_src = rng.uniform(0.05, 0.95, shape)
    d_tgt = rng.uniform(0.05, 0.95, shape)
    w_src = rng.uniform(0, 1, shape)
    w_tgt = rng.uniform(0, 1, shape)
    kw = dict(tol=tol, max_coords=max_coords, seed=seed)
    return [
        gradcheck_loss(lambda a: losses.cross_entropy(a["pred"], target, cfg), {"pred": pred},
                       "cross_entropy", **kw),
        gradcheck_loss(lambda a: losses.dist_loss(a["pred"], dmap, cfg), {"pred": pred}, "dist_loss", **kw),
        gradcheck_loss(lambda a: losses.bwsl(a["pred"], target, cfg, dmap=dmap), {"pred": pred}, "bwsl", **kw),
        gradcheck_loss(lambda a: losses.bwtl_discriminator(a["d_src"], a["d_tgt"], w_src, w_tgt, cfg),
                       {"d_src": d_src, "d_tgt": d_tgt}, "bwtl_discriminator", **kw),
        gradcheck_loss(lambda a: losses.adversarial_generator_loss(a["d_tgt"], w_tgt, cfg),
                       {"d_tgt": d_tgt}, "adversarial_generator_loss", **kw),
    ]


def run_suite(seeds: Sequence[int], tol: float = 1e-4, max_coords: int = 3,
              progress: bool = False, full: bool = True) -> pd.DataFrame:
    """
    Every primitive over ``seeds``; with ``full`` also the DRB, the
    miniature SNet and discriminator and all five losses. Returns one row
    per op with the worst error across seeds and groups.
    """
    frames = []
    for seed in tqdm(list(seeds), desc="gradcheck", disable=not progress):
        reports = check_primitives(seed, tol, max_coords)
        if full:
            reports.append(check_drb(seed, tol, max_coords))
            reports.append(check_snet(seed, tol, max_coords))
            reports.append(check_discriminator(seed, tol, max_coords))
            reports.extend(check_losses(seed, tol, max_coords))
        frames.extend(r.to_frame().assign(seed=seed) for r in reports)
    table = pd.concat(frames, ignore_index=True)
    summary = (table.groupby("op", sort=False)
               .agg(max_rel_error=("max_rel_error", "max"), groups=("group", "nunique"),
                    seeds=("seed", "nunique"))
               .reset_index())
    summary["passed"] = summary["max_rel_error"] < tol
    return summary
