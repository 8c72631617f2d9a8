"""
SGD with momentum and per-epoch learning-rate decay.

    lr_e = lr0 / (1 + decay * epoch)
    v <- momentum * v - lr_e * g
    w <- w + v

"Decay" acts on the learning rate only; there is no L2 penalty.
"""

from collections import OrderedDict
from typing import Dict, Iterable, Tuple

import numpy as np

from utils.config_validator import SGDConfig
from .errors import NonFiniteError, ShapeMismatchError
from .tensornet.module import Parameter


def learning_rate(cfg: SGDConfig, epoch: int) -> float:
    return cfg.lr / (1.0 + cfg.decay * epoch)


def sgd_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray],
             velocity: Dict[str, np.ndarray], cfg: SGDConfig, epoch: int) -> None:
    """
    One in-place update of ``params`` and ``velocity`` (both keyed by name).

    Raises:
        NonFiniteError naming the first parameter with a NaN/inf gradient
    """
    lr = learning_rate(cfg, epoch)
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter '{name}'", name=name)
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != w.shape:
            raise ShapeMismatchError(f"{name}: gradient {g.shape} vs parameter {w.shape}")
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(w)
            velocity[name] = v
        v *= cfg.momentum
        v -= w.dtype.type(lr) * g.astype(w.dtype, copy=False)
        w += v


class SGD:
    """Optimizer over a module's named parameters (fixed order)."""

    def __init__(self, named_params: Iterable[Tuple[str, Parameter]], cfg: SGDConfig):
        self.cfg = cfg
        self.params: "OrderedDict[str, Parameter]" = OrderedDict(named_params)
        self.velocity: "OrderedDict[str, np.ndarray]" = OrderedDict(
            (name, np.zeros_like(p.data)) for name, p in self.params.items()
        )

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self, epoch: int) -> float:
        """Apply accumulated gradients; returns the learning rate used."""
        grads = {name: p.grad for name, p in self.params.items() if p.grad is not None}
        sgd_step({name: p.data for name, p in self.params.items()}, grads, self.velocity, self.cfg, epoch)
        return learning_rate(self.cfg, epoch)

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.copy()) for k, v in self.velocity.items())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        for name, v in self.velocity.items():
            if name not in state:
                raise ShapeMismatchError(f"optimizer state missing '{name}'")
            if state[name].shape != v.shape:
                raise ShapeMismatchError(f"optimizer state '{name}': {state[name].shape} vs {v.shape}")
            self.velocity[name] = np.asarray(state[name], dtype=v.dtype).copy()
