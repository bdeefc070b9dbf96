"""Tests for checkpoint directories and last-N retention."""

import json

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from src.core.checkpoints import CheckpointStore, load_checkpoint, save_checkpoint
from src.core.optim import Adam
from src.models.backbone import MARMamba, NetConfig
from src.models.msmamba import BlockOptions
from src.tensor.tensor import Tensor, no_grad
from src.utils.errors import CheckpointError


def _meta(iteration: int = 0, seed: int = 0) -> dict:
    return {"iteration": iteration, "phase": 0, "phase_iter": iteration, "seed": seed, "adam_step": 0}


class TestSaveLoad:

    def test_round_trip(self, micro_net, tmp_path):
        for p in micro_net.parameters():
            p.data = p.data + 0.125
        path = save_checkpoint(tmp_path / "ckpt", micro_net, _meta(7, seed=3))
        loaded = load_checkpoint(path)
        assert loaded.iteration == 7 and loaded.seed == 3
        assert loaded.meta["dtype"] == "float64"
        expected = micro_net.state_dict()
        for name, value in loaded.net.state_dict().items():
            assert_array_equal(value, expected[name])
        assert loaded.net.config.to_dict() == micro_net.config.to_dict()

    def test_config_variants_survive(self, tmp_path):
        config = NetConfig(base_channels=4, stage_blocks=(1, 0, 0, 1, 0, 0, 0, 1),
                           block=BlockOptions(branches=("normal", "vertical"), pools=("average",)))
        net = MARMamba(config, seed=1)
        loaded = load_checkpoint(save_checkpoint(tmp_path / "ckpt", net, _meta()))
        assert loaded.net.config.to_dict() == config.to_dict()
        assert [n for n, _ in loaded.net.named_blocks()] == [n for n, _ in net.named_blocks()]

    def test_optimizer_state(self, micro_net, tmp_path, rng):
        optimizer = Adam(list(micro_net.named_parameters()))
        for p in micro_net.parameters():
            p.grad = rng.standard_normal(p.data.shape)
        optimizer.step(1e-3)
        loaded = load_checkpoint(save_checkpoint(tmp_path / "ckpt", micro_net, _meta(1),
                                                 optimizer.state_arrays()))
        assert set(loaded.optimizer) == set(optimizer.state_arrays())
        key = next(iter(loaded.optimizer))
        assert_array_equal(loaded.optimizer[key], optimizer.state_arrays()[key])

    def test_overwrite_replaces(self, micro_net, tmp_path):
        path = save_checkpoint(tmp_path / "ckpt", micro_net, _meta(1))
        save_checkpoint(path, micro_net, _meta(2))
        assert load_checkpoint(path).iteration == 2
        assert not (tmp_path / "ckpt.tmp").exists()

    def test_corrupted_tensor_is_detected(self, micro_net, tmp_path):
        path = save_checkpoint(tmp_path / "ckpt", micro_net, _meta())
        victim = next((path / "params").iterdir())
        blob = bytearray(victim.read_bytes())
        blob[-1] ^= 0xFF
        victim.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
        # digest checks can be skipped
        assert load_checkpoint(path, verify=False).iteration == 0

    def test_not_a_checkpoint(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path)

    def test_invalid_metadata(self, micro_net, tmp_path):
        path = save_checkpoint(tmp_path / "ckpt", micro_net, _meta())
        meta = json.loads((path / "meta.json").read_text())
        meta["iteration"] = -4
        (path / "meta.json").write_text(json.dumps(meta))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_unknown_config_field(self, micro_net, tmp_path):
        path = save_checkpoint(tmp_path / "ckpt", micro_net, _meta())
        config = json.loads((path / "config.json").read_text())
        config["mystery"] = 1
        (path / "config.json").write_text(json.dumps(config))
        with pytest.raises(CheckpointError):
            load_checkpoint(path)


class TestStore:

    def test_keeps_last_three(self, micro_net, tmp_path):
        store = CheckpointStore(tmp_path / "checkpoints", keep_last=3)
        for iteration in (100, 200, 300, 400, 500):
            store.save(micro_net, _meta(iteration))
        assert [p.name for p in store.list()] == ["iter_0000300", "iter_0000400", "iter_0000500"]
        assert store.latest().name == "iter_0000500"
        assert store.load().iteration == 500

    def test_empty_store(self, tmp_path):
        store = CheckpointStore(tmp_path / "nothing")
        assert store.list() == [] and store.latest() is None
        with pytest.raises(CheckpointError):
            store.load()

    def test_keep_last_must_be_positive(self, tmp_path):
        with pytest.raises(CheckpointError):
            CheckpointStore(tmp_path, keep_last=0)

    def test_loaded_network_predicts_identically(self, micro_net, tmp_path, rng):
        for p in micro_net.parameters():
            p.data = p.data + 0.01 * rng.standard_normal(p.data.shape)
        store = CheckpointStore(tmp_path)
        loaded = store.load(store.save(micro_net, _meta(5)))
        x = rng.random((1, 1, 16, 16))
        with no_grad():
            assert_array_equal(loaded.net(Tensor(x)).numpy(), micro_net(Tensor(x)).numpy())
        assert np.isfinite(loaded.net(Tensor(x)).numpy()).all()
