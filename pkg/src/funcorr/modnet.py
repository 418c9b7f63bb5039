"""Gated modular feature extractor: layers of conv/batchnorm/ReLU modules.

Within a layer every module consumes a simplex-weighted mix of the previous
layer's module outputs; first-layer modules all consume the trunk features.
The final representation is the last module's output, so spatial extents are
preserved end to end (all strides are 1).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .gating import GatingWeights

PAPER_CONV_SPECS = ((128, 7, 1, 3), (128, 3, 1, 1), (128, 3, 1, 1), (128, 1, 1, 0))
DESK_CONV_SPECS = ((32, 7, 1, 3), (32, 3, 1, 1), (32, 3, 1, 1), (32, 1, 1, 0))


@dataclass
class ModularNetConfig:
    layout: tuple = (6, 6, 6, 1)
    conv_specs: tuple = PAPER_CONV_SPECS  # per layer: (filters, kernel, stride, padding)

    @classmethod
    def desk(cls) -> "ModularNetConfig":
        """32-filter preset sized for CPU training."""
        return cls(layout=(6, 6, 6, 1), conv_specs=DESK_CONV_SPECS)

    def validate(self):
        if len(self.layout) != len(self.conv_specs):
            raise ConfigError(
                f"layout has {len(self.layout)} layers but {len(self.conv_specs)} conv specs"
            )
        if any(m <= 0 for m in self.layout):
            raise ConfigError(f"module counts must be positive: {self.layout}")
        if any(spec[2] != 1 for spec in self.conv_specs):
            raise ConfigError("module convolutions must keep stride 1")

    @property
    def out_channels(self) -> int:
        return self.conv_specs[-1][0]


@dataclass
class ModuleBlock:
    conv_w: T.Tensor
    conv_b: T.Tensor
    bn_gamma: T.Tensor
    bn_beta: T.Tensor
    bn_state: T.BatchNormState
    kernel: int
    padding: int


@dataclass
class ModNet:
    config: ModularNetConfig
    in_channels: int
    blocks: list = field(default_factory=list)  # blocks[layer][module]

    def all_blocks(self):
        for i, layer in enumerate(self.blocks):
            for j, blk in enumerate(layer):
                yield i, j, blk


def modnet_init(config: ModularNetConfig, trunk_channels: int, seed: int = 0) -> ModNet:
    """One conv/bn/relu block per (layer, module); deterministic given seed."""
    config.validate()
    net = ModNet(config=config, in_channels=trunk_channels)
    cin = trunk_channels
    for i, (m_count, (filters, kernel, _, padding)) in enumerate(
        zip(config.layout, config.conv_specs)
    ):
        layer = []
        for j in range(m_count):
            rng = T.make_rng(seed, 0x40D, i, j)
            layer.append(
                ModuleBlock(
                    conv_w=T.Tensor(
                        T.kaiming_normal(rng, (filters, cin, kernel, kernel), fan_in=cin * kernel * kernel)
                    ),
                    conv_b=T.Tensor(np.zeros(filters, dtype=np.float32)),
                    bn_gamma=T.Tensor(np.ones(filters, dtype=np.float32)),
                    bn_beta=T.Tensor(np.zeros(filters, dtype=np.float32)),
                    bn_state=T.BatchNormState(filters),
                    kernel=kernel,
                    padding=padding,
                )
            )
        net.blocks.append(layer)
        cin = filters
    return net


def _block_forward(blk: ModuleBlock, x: T.Tensor, mode: str) -> T.Tensor:
    y = T.conv2d(x, blk.conv_w, stride=1, padding=blk.padding)
    y = T.add(y, T.reshape(blk.conv_b, (1, -1, 1, 1)))
    y = T.batchnorm2d(y, blk.bn_gamma, blk.bn_beta, blk.bn_state, mode=mode)
    return T.relu(y)


def modnet_forward(r: T.Tensor, gating: GatingWeights, net: ModNet, mode: str = "eval") -> T.Tensor:
    """(B,C,H,W) trunk features + gating -> (B,F,H,W) task-conditioned features."""
    if r.data.ndim != 4:
        raise ShapeError(f"modnet expects batched (B,C,H,W) input, got {r.shape}")
    if r.shape[1] != net.in_channels:
        raise ShapeError(
            f"layer 1 expects {net.in_channels} input channels, got {r.shape[1]}"
        )
    layout = net.config.layout
    if tuple(gating.layout) != tuple(layout):
        raise ConfigError(f"gating layout {gating.layout} != net layout {layout}")
    bsz, _, h, w = r.shape

    outs = [_block_forward(blk, r, mode) for blk in net.blocks[0]]
    for i in range(1, len(layout)):
        prev_c = outs[0].shape[1]
        for j, o in enumerate(outs):
            if o.shape != (bsz, prev_c, h, w):
                raise ShapeError(f"layer {i} module {j} drifted to {o.shape}")
        stacked = T.stack(outs)
        flat = T.reshape(stacked, (len(outs), bsz * prev_c * h * w))
        mixed = T.matmul(gating.matrices[i - 1], flat)
        outs = [
            _block_forward(
                net.blocks[i][j], T.reshape(T.take_row(mixed, j), (bsz, prev_c, h, w)), mode
            )
            for j in range(layout[i])
        ]
    return outs[0]
