"""Frozen trunk: determinism, downsampling geometry, FKT file round-trips."""

import math

import numpy as np
import pytest

from funcorr import tensor as T
from funcorr import trunk as TR
from funcorr.errors import ConfigError, FormatError, ShapeError, TruncationError


def test_same_seed_bit_identical_params():
    a = TR.trunk_init(TR.TrunkConfig(seed=5))
    b = TR.trunk_init(TR.TrunkConfig(seed=5))
    for wa, wb in zip(a.weights, b.weights):
        assert np.array_equal(wa, wb)
    for ba, bb in zip(a.biases, b.biases):
        assert np.array_equal(ba, bb)


def test_different_seeds_differ():
    a = TR.trunk_init(TR.TrunkConfig(seed=1))
    b = TR.trunk_init(TR.TrunkConfig(seed=2))
    assert not np.array_equal(a.weights[0], b.weights[0])


def test_default_config_block_structure_and_16x_probe():
    trunk = TR.trunk_init(TR.TrunkConfig(seed=0))
    assert len(trunk.weights) == 4
    for w in trunk.weights:
        assert w.shape[2:] == (3, 3)
    img = T.make_rng(3).random((3, 64, 64)).astype(np.float32)
    fm = TR.trunk_forward(img, trunk)
    assert fm.values.shape == (64, 4, 4)
    assert fm.stride == 16


def test_zero_channels_config_error():
    with pytest.raises(ConfigError):
        TR.trunk_init(TR.TrunkConfig(widths=(16, 0, 64, 64)))
    with pytest.raises(ConfigError):
        TR.trunk_init(TR.TrunkConfig(widths=(16, 32, 64), downsample=16))


def test_forward_pure_function():
    trunk = TR.trunk_init(TR.TrunkConfig(seed=9))
    img = T.make_rng(4).random((3, 64, 64)).astype(np.float32)
    a = TR.trunk_forward(img, trunk)
    b = TR.trunk_forward(img, trunk)
    assert np.array_equal(a.values.data, b.values.data)


def test_zero_input_deterministic_constant():
    trunk = TR.trunk_init(TR.TrunkConfig(seed=9))
    z = np.zeros((3, 64, 64), dtype=np.float32)
    a = TR.trunk_forward(z, trunk)
    b = TR.trunk_forward(z, trunk)
    assert np.array_equal(a.values.data, b.values.data)


def test_forward_creates_no_tape_nodes():
    trunk = TR.trunk_init(TR.TrunkConfig(seed=0))
    img = T.make_rng(0).random((3, 32, 32)).astype(np.float32)
    with T.Tape() as tape:
        TR.trunk_forward(img, trunk)
        assert len(tape) == 0


@pytest.mark.parametrize("h,w", [(16, 16), (17, 31), (64, 48), (100, 100), (512, 16)])
def test_output_extents_ceil_rule(h, w):
    trunk = TR.trunk_init(TR.TrunkConfig(seed=1))
    img = T.make_rng(h * 1000 + w).random((3, h, w)).astype(np.float32)
    fm = TR.trunk_forward(img, trunk)
    assert fm.grid == (math.ceil(h / 16), math.ceil(w / 16))
    assert fm.image_size == (h, w)


def test_wrong_channel_count_raises():
    trunk = TR.trunk_init(TR.TrunkConfig(seed=0))
    with pytest.raises(ShapeError):
        TR.trunk_forward(np.zeros((1, 64, 64), dtype=np.float32), trunk)


class TestFktFile:
    def _fm(self, c=8, h=2, w=2, stride=16, seed=0):
        vals = T.make_rng(seed).standard_normal((c, h, w)).astype(np.float32)
        return TR.FeatureMap(values=T.Tensor(vals), stride=stride, image_size=(h * stride, w * stride))

    def test_round_trip_bit_identical(self, tmp_path):
        fm = self._fm()
        p = tmp_path / "f.fkt"
        TR.save_external_features(fm, p)
        back = TR.load_external_features(p)
        assert np.array_equal(back.values.data, fm.values.data)
        assert back.stride == fm.stride

    def test_truncated_payload(self, tmp_path):
        fm = self._fm()
        p = tmp_path / "f.fkt"
        TR.save_external_features(fm, p)
        blob = p.read_bytes()
        p.write_bytes(blob[:-4])  # drop one float: 31 of 32 remain
        with pytest.raises(TruncationError):
            TR.load_external_features(p)

    def test_bad_magic_and_version(self, tmp_path):
        fm = self._fm()
        p = tmp_path / "f.fkt"
        TR.save_external_features(fm, p)
        blob = bytearray(p.read_bytes())
        bad = tmp_path / "bad.fkt"
        bad.write_bytes(b"XKT1" + bytes(blob[4:]))
        with pytest.raises(FormatError, match="magic"):
            TR.load_external_features(bad)
        blob[4] = 9
        bad.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="version"):
            TR.load_external_features(bad)

    def test_stride_implies_source_size(self, tmp_path):
        fm = self._fm(c=8, h=4, w=4, stride=16)
        p = tmp_path / "f.fkt"
        TR.save_external_features(fm, p)
        back = TR.load_external_features(p)
        assert back.image_size == (64, 64)
