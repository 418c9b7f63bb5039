"""Frozen task-agnostic trunk: seeded conv stack with 16x spatial downsampling.

The trunk stands in for a pretrained backbone: parameters are drawn once from
a seeded PRNG and never trained. Feature maps for real data can instead be
ingested from FKT tensor files produced by an external extractor.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, FormatError, ShapeError, TruncationError

FKT_MAGIC = b"FKT1"
FKT_VERSION = 1


@dataclass
class TrunkConfig:
    in_channels: int = 3
    widths: tuple = (16, 32, 64, 64)
    downsample: int = 16
    seed: int = 0

    def validate(self):
        if self.in_channels <= 0 or any(w <= 0 for w in self.widths):
            raise ConfigError(f"trunk channel counts must be positive, got {self}")
        if 2 ** len(self.widths) != self.downsample:
            raise ConfigError(
                f"{len(self.widths)} stride-2 blocks give {2 ** len(self.widths)}x "
                f"downsampling, config says {self.downsample}x"
            )


@dataclass
class FeatureMap:
    """C x H' x W' spatial feature grid with a pixel stride back to the image."""

    values: T.Tensor
    stride: int
    image_size: tuple  # (H, W) of the source image before any padding

    def __post_init__(self):
        if self.values.data.ndim != 3:
            raise ShapeError(f"feature map must be (C,H',W'), got {self.values.shape}")
        h, w = self.image_size
        eh, ew = math.ceil(h / self.stride), math.ceil(w / self.stride)
        if self.values.shape[1:] != (eh, ew):
            raise ShapeError(
                f"grid {self.values.shape[1:]} inconsistent with image {h}x{w} "
                f"at stride {self.stride} (expected {eh}x{ew})"
            )

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def grid(self) -> tuple:
        return self.values.shape[1], self.values.shape[2]


class Trunk:
    """Frozen parameter set plus the config that produced it."""

    def __init__(self, config: TrunkConfig, weights, biases):
        self.config = config
        self.weights = weights  # list of (Cout,Cin,3,3) float32 arrays
        self.biases = biases  # list of (Cout,) float32 arrays

    @property
    def out_channels(self) -> int:
        return self.config.widths[-1]


def trunk_init(config: TrunkConfig) -> Trunk:
    """Deterministic frozen parameters: one k3/s2/p1 conv + ReLU per block."""
    config.validate()
    rng = T.make_rng(config.seed, 0x7272)  # trunk-local stream
    weights, biases = [], []
    cin = config.in_channels
    for cout in config.widths:
        weights.append(T.kaiming_normal(rng, (cout, cin, 3, 3), fan_in=cin * 9))
        biases.append(rng.uniform(-0.1, 0.1, size=cout).astype(np.float32))
        cin = cout
    return Trunk(config, weights, biases)


def trunk_forward(image, trunk: Trunk) -> FeatureMap:
    """image (3,H,W) in [0,1] -> frozen FeatureMap at stride `downsample`.

    Irregular sizes are zero-padded on the right/bottom to a multiple of the
    downsample factor; keypoint coordinates stay in original image pixels.
    """
    data = image.data if isinstance(image, T.Tensor) else np.asarray(image, dtype=np.float32)
    if data.ndim != 3 or data.shape[0] != trunk.config.in_channels:
        raise ShapeError(
            f"trunk expects ({trunk.config.in_channels},H,W), got {data.shape}"
        )
    h, w = data.shape[1], data.shape[2]
    ds = trunk.config.downsample
    ph = (ds - h % ds) % ds
    pw = (ds - w % ds) % ds
    if ph or pw:
        data = np.pad(data, ((0, 0), (0, ph), (0, pw)))
    x = T.Tensor(data[None] * 2.0 - 1.0)  # map [0,1] -> [-1,1]; no tape attachment
    for wgt, b in zip(trunk.weights, trunk.biases):
        x = T.conv2d(x, T.Tensor(wgt), stride=2, padding=1)
        x = T.add(x, T.Tensor(b.reshape(1, -1, 1, 1)))
        x = T.relu(x)
    return FeatureMap(values=T.Tensor(x.data[0]), stride=ds, image_size=(h, w))


# ---------------------------------------------------------------------------
# FKT tensor file: externally computed feature maps
# ---------------------------------------------------------------------------


def save_external_features(fm: FeatureMap, path) -> None:
    c, hp, wp = fm.values.shape
    with open(path, "wb") as fh:
        fh.write(FKT_MAGIC)
        fh.write(struct.pack("<5I", FKT_VERSION, c, hp, wp, fm.stride))
        fh.write(np.ascontiguousarray(fm.values.data, dtype="<f4").tobytes())


def load_external_features(path) -> FeatureMap:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FKT_MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}, expected {FKT_MAGIC!r}")
    if len(blob) < 24:
        raise TruncationError(f"{path}: header truncated ({len(blob)} bytes)")
    version, c, hp, wp, stride = struct.unpack("<5I", blob[4:24])
    if version != FKT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    payload = blob[24:]
    expected = c * hp * wp * 4
    if len(payload) != expected:
        raise TruncationError(
            f"{path}: payload {len(payload)} bytes, header declares {expected}"
        )
    values = np.frombuffer(payload, dtype="<f4").reshape(c, hp, wp).astype(np.float32)
    return FeatureMap(values=T.Tensor(values), stride=stride, image_size=(hp * stride, wp * stride))
