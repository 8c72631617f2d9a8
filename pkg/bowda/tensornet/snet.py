"""
SNet: the encoder-decoder segmentation network.

Down path: ConvBlock, then three (DRB, 2x average pool) stages.
Up path: three (2x transposed conv, optional long-connection concat,
DRB) stages. Head: 1x1x1 conv and sigmoid. The three up-path DRB
outputs (1/4, 1/2 and full resolution) are returned as features for the
discriminator.
"""

from typing import List, Optional, Tuple

import numpy as np

from utils.config_validator import SNetConfig
from . import ops
from .blocks import ConvBlock, DenseResidualBlock
from .module import Conv3d, Module, ModuleList, TransposedConv3d
from .tensor import Tensor

DEPTH = 3


def check_divisible(spatial, factor: int = 2 ** DEPTH) -> None:
    if any(s % factor for s in spatial):
        raise ValueError(f"spatial dims {tuple(spatial)} must be divisible by {factor}")


class SNet(Module):
    def __init__(self, cfg: SNetConfig, seed: int = 0, in_channels: int = 1,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(seed)
        base = cfg.base_width

        self.stem = ConvBlock(in_channels, base, rng, normalization=cfg.normalization)
        self.down = ModuleList(DenseResidualBlock(block, rng) for block in cfg.down_blocks())

        up_convs = []
        width = base
        for _ in range(DEPTH):
            up_convs.append(TransposedConv3d(width, base, rng))
            width = cfg.feature_channels
        self.up_convs = ModuleList(up_convs)
        self.up = ModuleList(DenseResidualBlock(block, rng) for block in cfg.up_blocks())
        self.head = Conv3d(cfg.feature_channels, 1, 1, rng)

    def forward(self, x: Tensor) -> Tuple[Tensor, List[Tensor]]:
        """Returns (probability map, [feature at 1/4, 1/2, 1/1])."""
        check_divisible(x.shape[2:])
        h = self.stem(x)
        skips = []
        for block in self.down:
            h = block(h)
            skips.append(h)
            h = ops.avgpool3d(h, 2)

        features = []
        for i, (up_conv, block) in enumerate(zip(self.up_convs, self.up)):
            h = up_conv(h)
            if self.cfg.long_connections:
                h = ops.concat([h, skips[DEPTH - 1 - i]])
            h = block(h)
            features.append(h)

        prob = ops.sigmoid(self.head(h))
        return prob, features
