"""ResNet-style volumetric backbone built from basic two-convolution blocks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .nn import BatchNorm, Conv3d, Module
from .tensor import ShapeError, Tensor

RESNET34_BLOCKS = (3, 4, 6, 3)
RESNET18_BLOCKS = (2, 2, 2, 2)
STAGE_MULTIPLIERS = (1, 2, 4, 8)

STEM = dict(kernel=7, stride=2, padding=3)
MAXPOOL = dict(kernel=3, stride=2, padding=1)


@dataclass(frozen=True)
class BackboneConfig:
    base_channels: int = 64
    blocks_per_stage: tuple[int, ...] = field(default=RESNET34_BLOCKS)
    in_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in self.blocks_per_stage))
        if len(self.blocks_per_stage) != 4:
            raise ValueError(f"need 4 stages, got {self.blocks_per_stage}")
        if min(self.blocks_per_stage) < 1:
            raise ValueError(f"every stage needs >= 1 block, got {self.blocks_per_stage}")
        if self.base_channels < 1 or self.in_channels < 1:
            raise ValueError("base_channels and in_channels must be positive")

    @property
    def stage_channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in STAGE_MULTIPLIERS)

    @property
    def out_channels(self) -> int:
        return self.stage_channels[-1]


def stage_extents(config: BackboneConfig, spatial: tuple[int, int, int]) -> list[tuple[int, int, int]]:
    """Spatial extents after the stem, the max-pool, and each of the four stages."""
    ext = tuple(spatial)
    out = []

    def step(e, k, s, p):
        return tuple(F.conv_output_extent(n, k, s, p) for n in e)

    ext = step(ext, STEM["kernel"], STEM["stride"], STEM["padding"])
    out.append(ext)
    ext = step(ext, MAXPOOL["kernel"], MAXPOOL["stride"], MAXPOOL["padding"])
    out.append(ext)
    for i in range(4):
        if i > 0:
            ext = step(ext, 3, 2, 1)
        out.append(ext)
    return out


def output_shape(config: BackboneConfig, input_shape) -> tuple[int, int, int, int]:
    """(C, l, w, h) of the final feature maps for an input of shape (Cin, D, H, W)."""
    if len(input_shape) != 4:
        raise ValueError(f"input_shape must be (C, D, H, W), got {input_shape}")
    if input_shape[0] != config.in_channels:
        raise ShapeError(f"input has {input_shape[0]} channels, backbone expects {config.in_channels}")
    extents = stage_extents(config, tuple(input_shape[1:]))
    for name, ext in zip(("stem", "maxpool", "stage1", "stage2", "stage3", "stage4"), extents):
        if min(ext) < 1:
            axis = int(np.argmin(ext))
            raise ShapeError(
                f"input extent {input_shape[1 + axis]} (axis {axis}) too small: reduces to {ext} after {name}"
            )
    return (config.out_channels,) + extents[-1]


class BasicBlock(Module):
    """conv-bn-relu-conv-bn, skip path added before the final ReLU."""

    def __init__(self, cin: int, cout: int, stride: int, rng: np.random.Generator, dtype=np.float32):
        self.conv1 = Conv3d(cin, cout, 3, stride, 1, bias=False, rng=rng, dtype=dtype)
        self.bn1 = BatchNorm(cout, dtype=dtype)
        self.conv2 = Conv3d(cout, cout, 3, 1, 1, bias=False, rng=rng, dtype=dtype)
        self.bn2 = BatchNorm(cout, dtype=dtype)
        if stride != 1 or cin != cout:
            self.down_conv = Conv3d(cin, cout, 1, stride, 0, bias=False, rng=rng, dtype=dtype)
            self.down_bn = BatchNorm(cout, dtype=dtype)
        else:
            self.down_conv = None
            self.down_bn = None

    def __call__(self, x: Tensor) -> Tensor:
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.down_conv is None else self.down_bn(self.down_conv(x))
        return F.relu(out + skip)


class Backbone3D(Module):
    def __init__(self, config: BackboneConfig, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.config = config
        c0 = config.base_channels
        self.stem_conv = Conv3d(config.in_channels, c0, STEM["kernel"], STEM["stride"], STEM["padding"],
                                bias=False, rng=rng, dtype=dtype)
        self.stem_bn = BatchNorm(c0, dtype=dtype)
        self.stages: list[Stage] = []
        cin = c0
        for i, (n_blocks, cout) in enumerate(zip(config.blocks_per_stage, config.stage_channels)):
            stride = 1 if i == 0 else 2
            blocks = [BasicBlock(cin if j == 0 else cout, cout, stride if j == 0 else 1, rng, dtype)
                      for j in range(n_blocks)]
            self.stages.append(Stage(blocks))
            cin = cout

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward_stages(x)[-1]

    def forward_stages(self, x: Tensor) -> list[Tensor]:
        """Activations after each of the four residual stages."""
        if x.ndim != 5:
            raise ShapeError(f"backbone expects [B, C, D, H, W], got {x.shape}")
        output_shape(self.config, x.shape[1:])
        h = F.relu(self.stem_bn(self.stem_conv(x)))
        h = F.pool3d(h, "max", MAXPOOL["kernel"], MAXPOOL["stride"], MAXPOOL["padding"])
        outs = []
        for stage in self.stages:
            h = stage(h)
            outs.append(h)
        return outs


class Stage(Module):
    def __init__(self, blocks: list[BasicBlock]):
        self.blocks = blocks

    def __call__(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


def build_backbone(config: BackboneConfig, seed: int = 0, dtype=np.float32) -> Backbone3D:
    return Backbone3D(config, seed, dtype)
