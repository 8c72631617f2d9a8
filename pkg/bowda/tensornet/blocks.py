"""
Network building blocks: convolutional blocks, dense layers and the
densely-connected residual block (DRB).
"""

from typing import List

import numpy as np

from utils.config_validator import DRBConfig
from . import ops
from .module import BatchNorm3d, Conv3d, Dropout, Module, ModuleList
from .tensor import Tensor

BOTTLENECK_FACTOR = 4


class ConvBlock(Module):
    """Conv(3x3x3)-BN-activation."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator,
                 activation: str = "relu", slope: float = 0.2, normalization: bool = True):
        super().__init__()
        self.activation = activation
        self.slope = slope
        self.conv = Conv3d(in_channels, out_channels, 3, rng, bias=not normalization)
        self.bn = BatchNorm3d(out_channels) if normalization else None

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv(x)
        if self.bn is not None:
            h = self.bn(h)
        return ops.activation(self.activation, h, self.slope)


class NormActConv(Module):
    """BN-ReLU-Conv, the pre-activation unit used inside DRBs."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng: np.random.Generator,
                 normalization: bool = True, bias: bool = True):
        super().__init__()
        self.bn = BatchNorm3d(in_channels) if normalization else None
        self.conv = Conv3d(in_channels, out_channels, kernel, rng, bias=bias)

    def forward(self, x: Tensor) -> Tensor:
        h = self.bn(x) if self.bn is not None else x
        return self.conv(ops.relu(h))


class DenseLayer(Module):
    """BN-ReLU-Conv(1x1x1) bottleneck to 4g, BN-ReLU-Conv(3x3x3) to g, dropout."""

    def __init__(self, in_channels: int, growth: int, dropout: float, rng: np.random.Generator,
                 normalization: bool = True):
        super().__init__()
        width = BOTTLENECK_FACTOR * growth
        # outputs feed batch norms downstream, which absorb any bias
        self.bottleneck = NormActConv(in_channels, width, 1, rng, normalization, bias=not normalization)
        self.conv = NormActConv(width, growth, 3, rng, normalization, bias=not normalization)
        self.dropout = Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        return self.dropout(self.conv(self.bottleneck(x)))


class DenseResidualBlock(Module):
    """
    x_l = H_l([x_0, ..., x_{l-1}]), out = x_0 + H_t([x_0, ..., x_l]).

    With ``dense`` off each layer only sees its predecessor and the
    transition only the last layer; with ``residual`` off the transition
    output is returned as is.
    """

    def __init__(self, cfg: DRBConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        c, g = cfg.in_channels, cfg.growth
        layers = []
        for i in range(cfg.layers):
            if cfg.dense:
                in_ch = c + i * g
            else:
                in_ch = c if i == 0 else g
            layers.append(DenseLayer(in_ch, g, cfg.dropout, rng, cfg.normalization))
        self.layers = ModuleList(layers)
        self.transition = NormActConv(cfg.transition_in, c, 1, rng, cfg.normalization)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cfg.in_channels:
            raise ValueError(f"DRB expects {self.cfg.in_channels} channels, got {x.shape[1]}")
        features: List[Tensor] = [x]
        current = x
        for layer in self.layers:
            inp = ops.concat(features) if self.cfg.dense else current
            current = layer(inp)
            features.append(current)
        trans_in = ops.concat(features) if self.cfg.dense else current
        h = self.transition(trans_in)
        return ops.add(x, h) if self.cfg.residual else h
