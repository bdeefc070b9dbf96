"""Tests for the UNet backbone, its configuration and the pad/crop helpers."""

import numpy as np
import pytest

from src.models.backbone import (
    DOWNSAMPLE_FACTOR, STAGE_NAMES, MARMamba, NetConfig, crop_back, pad_to_multiple,
)
from src.tensor.tensor import Tensor, no_grad
from src.utils.errors import ConfigurationError, ShapeError


class TestPadding:

    def test_pads_to_next_multiple(self):
        padded, record = pad_to_multiple(np.zeros((100, 100)))
        assert padded.shape == (104, 104)
        assert (record.height, record.width) == (100, 100)

    def test_already_aligned_input_is_unchanged(self, rng):
        x = rng.random((16, 24))
        padded, _ = pad_to_multiple(x)
        np.testing.assert_array_equal(padded, x)

    def test_crop_inverts_pad(self):
        rng = np.random.default_rng(11)
        for _ in range(25):
            h, w = rng.integers(1, 65, size=2)
            x = rng.random((int(h), int(w)))
            padded, record = pad_to_multiple(x)
            assert padded.shape[0] % DOWNSAMPLE_FACTOR == 0 and padded.shape[1] % DOWNSAMPLE_FACTOR == 0
            np.testing.assert_array_equal(crop_back(padded, record), x)


class TestNetConfig:

    def test_channel_ladder(self):
        assert NetConfig(base_channels=3).channel_ladder() == [3, 6, 12, 24, 12, 6, 3, 3]

    def test_dict_round_trip(self):
        config = NetConfig(base_channels=4, stage_blocks=(1, 0, 1, 1, 0, 1, 1, 0), skip_fusion="add")
        assert NetConfig.from_dict(config.to_dict()) == config

    @pytest.mark.parametrize("kwargs", [
        {"stage_blocks": (1, 1, 1)},
        {"stage_blocks": (1, 1, 1, -1, 1, 1, 1, 1)},
        {"base_channels": 0},
        {"skip_fusion": "gate"},
        {"upsampler": "bilinear"},
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            NetConfig(**kwargs)


class TestMARMamba:

    def test_zero_head_starts_as_identity(self, micro_net, rng):
        x = rng.random((1, 1, 16, 16))
        with no_grad():
            np.testing.assert_array_equal(micro_net(Tensor(x)).data, x)

    def test_output_shape_matches_input(self, micro_config, rng):
        micro_config.head_zero_init = False
        net = MARMamba(micro_config, seed=0)
        with no_grad():
            out = net(Tensor(rng.random((2, 1, 16, 24))))
        assert out.shape == (2, 1, 16, 24)

    def test_nearest_upsampler_with_additive_skips(self, rng):
        net = MARMamba(NetConfig(base_channels=4, stage_blocks=(1,) * 8, upsampler="nearest",
                                 skip_fusion="add", head_zero_init=False), seed=0)
        with no_grad():
            assert net(Tensor(rng.random((1, 1, 8, 8)))).shape == (1, 1, 8, 8)

    def test_indivisible_size(self, micro_net):
        with pytest.raises(ShapeError):
            micro_net(Tensor(np.zeros((1, 1, 12, 16))))

    def test_wrong_channel_count(self, micro_net):
        with pytest.raises(ShapeError):
            micro_net(Tensor(np.zeros((1, 2, 16, 16))))

    def test_block_names(self, micro_net):
        assert [name for name, _ in micro_net.named_blocks()] == [f"{s}.0" for s in STAGE_NAMES]
        with pytest.raises(ConfigurationError):
            micro_net.block("enc9.0")

    def test_empty_stages_are_skipped(self):
        net = MARMamba(NetConfig(base_channels=4, stage_blocks=(0, 2, 0, 0, 0, 0, 0, 1)), seed=0)
        assert [name for name, _ in net.named_blocks()] == ["enc2.0", "enc2.1", "refine.0"]

    def test_taps_hold_block_inputs(self, micro_net, rng):
        taps = {}
        with no_grad():
            micro_net.features(Tensor(rng.random((1, 1, 16, 16))), taps)
        assert set(taps) == {f"{s}.0" for s in STAGE_NAMES}
        assert taps["enc1.0"].shape == (1, 4, 16, 16)
        assert taps["enc2.0"].shape == (1, 8, 8, 8)
        assert taps["bottleneck.0"].shape == (1, 32, 2, 2)

    def test_same_seed_same_weights(self, micro_config):
        a = MARMamba(micro_config, seed=3).state_dict()
        b = MARMamba(micro_config, seed=3).state_dict()
        c = MARMamba(micro_config, seed=4).state_dict()
        assert all(np.array_equal(a[k], b[k]) for k in a)
        assert any(not np.array_equal(a[k], c[k]) for k in a)
