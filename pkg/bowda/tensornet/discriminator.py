"""
Discriminator D: per-voxel domain probability from three up-path features.

Each feature passes a stride-1 ConvBlock; the coarser result is upsampled
by a transposed convolution and concatenated with the next finer level;
a 1x1x1 conv and sigmoid give the output at image resolution.
"""

from typing import Optional, Sequence, Tuple

import numpy as np

from utils.config_validator import DiscriminatorConfig
from . import ops
from .blocks import ConvBlock
from .module import Conv3d, Module, TransposedConv3d
from .tensor import Tensor


class Discriminator(Module):
    def __init__(self, cfg: DiscriminatorConfig, feature_channels: int, seed: int = 0,
                 rng: Optional[np.random.Generator] = None):
        super().__init__()
        self.cfg = cfg
        rng = rng if rng is not None else np.random.default_rng(seed)
        w0, w1, w2 = cfg.widths

        def block(out_channels):
            return ConvBlock(feature_channels, out_channels, rng, activation="leaky_relu",
                             slope=cfg.leaky_slope, normalization=cfg.normalization)

        self.block0 = block(w0)
        self.up0 = TransposedConv3d(w0, w0, rng)
        self.block1 = block(w1)
        self.up1 = TransposedConv3d(w0 + w1, w1, rng)
        self.block2 = block(w2)
        self.out = Conv3d(w1 + w2, 1, 1, rng)

    def forward(self, features: Sequence[Tensor]) -> Tensor:
        if len(features) != 3:
            raise ValueError(f"discriminator takes 3 features, got {len(features)}")
        f0, f1, f2 = features
        for coarse, fine in ((f0, f1), (f1, f2)):
            if tuple(2 * s for s in coarse.shape[2:]) != tuple(fine.shape[2:]):
                raise ValueError(
                    f"feature resolutions must double per level, got {coarse.shape[2:]} -> {fine.shape[2:]}"
                )
        u0 = self.up0(self.block0(f0))
        u1 = self.up1(ops.concat([u0, self.block1(f1)]))
        fused = ops.concat([u1, self.block2(f2)])
        return ops.sigmoid(self.out(fused))

    def forward_domains(self, feats_s: Sequence[Tensor], feats_t: Sequence[Tensor]) -> Tuple[Tensor, Tensor]:
        """
        Score both domains in one pass over the batch-concatenated
        features, so batch norm sees joint statistics and a per-channel
        affine shift between domains survives normalization.

        Returns (d_s, d_t), split back along the batch axis.
        """
        if len(feats_s) != len(feats_t):
            raise ValueError(f"feature levels differ: {len(feats_s)} vs {len(feats_t)}")
        joint = [ops.concat([fs, ft], axis=0) for fs, ft in zip(feats_s, feats_t)]
        d_s, d_t = ops.split(self(joint), [feats_s[0].shape[0], feats_t[0].shape[0]], axis=0)
        return d_s, d_t
