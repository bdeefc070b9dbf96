"""Tests for progressive training, batch sampling and resume."""

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_array_equal

from src.core.checkpoints import load_checkpoint
from src.core.optim import ScheduleConfig
from src.core.trainer import (LOSS_LOG_COLUMNS, ProgressivePhase, Trainer, parse_phases,
                              sample_batch)
from src.metrics.losses import LossConfig
from src.models.backbone import MARMamba
from src.synth.dataset import SamplePair, generate_sample
from src.synth.tomography import SinogramConfig
from src.utils.errors import ConfigurationError, DatasetError, NumericError

PHASES = [ProgressivePhase(16, 2, 3), ProgressivePhase(24, 1, 2)]


@pytest.fixture(scope="module")
def pairs():
    sinogram = SinogramConfig(n_angles=30)
    return [generate_sample(i, 0, 32, group, sinogram) for i, group in enumerate(("large", "medium", "small"))]


def _trainer(config, pairs, run_dir=None, phases=PHASES, **kwargs):
    return Trainer(MARMamba(config, seed=0), pairs, LossConfig(), ScheduleConfig(t_max=10), phases,
                   seed=4, run_dir=run_dir, **kwargs)


# =============================================================================
# Phases and batches
# =============================================================================

class TestPhases:

    def test_parse(self):
        assert parse_phases("32x4x300, 48x2x300") == [ProgressivePhase(32, 4, 300), ProgressivePhase(48, 2, 300)]
        assert parse_phases("16X1X0") == [ProgressivePhase(16, 1, 0)]

    @pytest.mark.parametrize("text", ["", "32x4", "32x4xten", "20x1x5", "32x0x5"])
    def test_invalid(self, text):
        with pytest.raises(ConfigurationError):
            parse_phases(text)


class TestBatches:

    def test_shapes(self, pairs, rng):
        inputs, targets = sample_batch(pairs, 16, 4, rng)
        assert inputs.shape == targets.shape == (4, 1, 16, 16)

    def test_crops_are_aligned(self, rng):
        image = np.arange(64.0).reshape(8, 8)
        pair = SamplePair(0, image, image + 100.0, np.zeros((8, 8)))
        inputs, targets = sample_batch([pair], 4, 3, rng)
        assert_array_equal(targets, inputs + 100.0)

    def test_small_images_are_upscaled(self, rng):
        pair = SamplePair(0, np.ones((8, 8)), np.ones((8, 8)), np.zeros((8, 8)))
        inputs, _ = sample_batch([pair], 16, 1, rng)
        assert inputs.shape == (1, 1, 16, 16)
        assert np.allclose(inputs, 1.0)

    def test_same_generator_same_batch(self, pairs):
        a = sample_batch(pairs, 16, 2, np.random.default_rng([4, 0, 7]))
        b = sample_batch(pairs, 16, 2, np.random.default_rng([4, 0, 7]))
        assert_array_equal(a[0], b[0])

    def test_empty_dataset(self, rng):
        with pytest.raises(DatasetError):
            sample_batch([], 16, 1, rng)


# =============================================================================
# Training
# =============================================================================

class TestTrainer:

    def test_runs_all_phases(self, micro_config, pairs, tmp_path):
        trainer = _trainer(micro_config, pairs, tmp_path, checkpoint_every=100)
        seen = []
        trainer.on_iteration = lambda iteration, phase, loss: seen.append((iteration, phase))
        result = trainer.train()
        assert trainer.state.iteration == 5 and trainer.state.phase == 2
        assert seen == [(1, 0), (2, 0), (3, 0), (4, 1), (5, 1)]
        assert [i for i, _ in result.history] == [0, 1, 2, 3, 4]

        log = pd.read_csv(result.loss_log)
        assert list(log.columns) == LOSS_LOG_COLUMNS
        assert log["phase"].tolist() == [0, 0, 0, 1, 1]
        # the schedule restarts with every phase
        assert log["lr"].iloc[0] == log["lr"].iloc[3] == pytest.approx(2e-4, rel=1e-12)
        assert np.isfinite(log["loss_total"]).all()

    def test_checkpoints_at_phase_ends(self, micro_config, pairs, tmp_path):
        result = _trainer(micro_config, pairs, tmp_path, checkpoint_every=100).train()
        names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
        assert names == ["iter_0000003", "iter_0000005"]
        assert result.checkpoint.name == "iter_0000005"
        assert load_checkpoint(result.checkpoint).meta["phase"] == 2

    def test_parameters_change(self, micro_config, pairs):
        trainer = _trainer(micro_config, pairs)
        before = trainer.net.state_dict()
        trainer.train()
        after = trainer.net.state_dict()
        assert any(not np.array_equal(before[k], after[k]) for k in before)

    def test_deterministic(self, micro_config, pairs):
        a = _trainer(micro_config, pairs).train()
        b = _trainer(micro_config, pairs).train()
        assert a.history == b.history
        sa, sb = a.net.state_dict(), b.net.state_dict()
        assert all(np.array_equal(sa[k], sb[k]) for k in sa)

    def test_resume_matches_uninterrupted(self, micro_config, pairs, tmp_path):
        full = _trainer(micro_config, pairs, tmp_path / "full", checkpoint_every=2, keep_last=10).train()
        checkpoint = load_checkpoint(tmp_path / "full" / "checkpoints" / "iter_0000002")
        assert checkpoint.meta["phase"] == 0 and checkpoint.meta["phase_iter"] == 2

        resumed = _trainer(micro_config, pairs, tmp_path / "resumed", checkpoint_every=2, keep_last=10)
        resumed.resume(checkpoint)
        outcome = resumed.train()
        assert [i for i, _ in outcome.history] == [2, 3, 4]
        assert outcome.history == full.history[2:]
        final_full, final_resumed = full.net.state_dict(), outcome.net.state_dict()
        assert all(np.array_equal(final_full[k], final_resumed[k]) for k in final_full)

    def test_resume_in_place_keeps_one_log_row_per_iteration(self, micro_config, pairs, tmp_path):
        full = _trainer(micro_config, pairs, tmp_path, checkpoint_every=2, keep_last=10).train()
        original = pd.read_csv(full.loss_log)
        assert original["iter"].tolist() == [0, 1, 2, 3, 4]

        resumed = _trainer(micro_config, pairs, tmp_path, checkpoint_every=2, keep_last=10)
        resumed.resume(load_checkpoint(tmp_path / "checkpoints" / "iter_0000002"))
        outcome = resumed.train()
        log = pd.read_csv(outcome.loss_log)
        assert log["iter"].tolist() == [0, 1, 2, 3, 4]
        assert not log["iter"].duplicated().any()
        pd.testing.assert_frame_equal(log, original)

    def test_retention(self, micro_config, pairs, tmp_path):
        _trainer(micro_config, pairs, tmp_path, checkpoint_every=1, keep_last=2).train()
        assert sorted(p.name for p in (tmp_path / "checkpoints").iterdir()) == ["iter_0000004", "iter_0000005"]

    def test_non_finite_loss(self, micro_config):
        bad = SamplePair(0, np.full((16, 16), np.nan), np.zeros((16, 16)), np.zeros((16, 16)))
        trainer = _trainer(micro_config, [bad], phases=[ProgressivePhase(16, 1, 1)])
        with pytest.raises(NumericError):
            trainer.train()

    def test_invalid_cadence(self, micro_config, pairs):
        with pytest.raises(ConfigurationError):
            _trainer(micro_config, pairs, checkpoint_every=0)

    @pytest.mark.slow
    def test_loss_decreases(self, micro_config, pairs):
        trainer = Trainer(MARMamba(micro_config, seed=0), pairs[:1], LossConfig(mode="phuber"),
                          ScheduleConfig(lr_max=1e-3, t_max=200), [ProgressivePhase(16, 1, 120)], seed=1)
        history = [loss for _, loss in trainer.train().history]
        assert np.mean(history[-10:]) < np.mean(history[:10])
