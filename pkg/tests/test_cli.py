"""End-to-end tests of the command line: outputs, run directories and exit codes."""

import io
import json

import numpy as np
import pandas as pd
import pytest
from PIL import Image
from rich.console import Console

from src.config.constants import PAPER_PHASE_LIST
from src.core.checkpoints import save_checkpoint
from src.models.backbone import MARMamba, NetConfig
from src.synth.dataset import synth_dataset
from src.tensor.serialization import read_mart, write_mart
from src.ui.cli import EXIT_USAGE, MarMambaCLI, build_parser, config_overrides
from src.utils.errors import ContractError, NumericError, exit_code_for

QUIET = ["--log-level", "ERROR", "--set", "logging.console_output=false"]
MICRO_FLAGS = ["--base-channels", "4", "--stage-blocks", "1,1,1,1,1,1,1,1"]
MICRO_SET = ["--set", "net.base_channels=4", "--set", "net.stage_blocks=[1,1,1,1,1,1,1,1]"]


def run_cli(*argv):
    buffer = io.StringIO()
    code = MarMambaCLI(console=Console(file=buffer, width=200)).run([str(a) for a in argv])
    return code, buffer.getvalue()


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data") / "dataset"
    synth_dataset(3, root, seed=0, n=16, n_angles=20)
    return root


@pytest.fixture(scope="module")
def checkpoint(tmp_path_factory):
    net = MARMamba(NetConfig(base_channels=4, stage_blocks=(1,) * 8), seed=0)
    return save_checkpoint(tmp_path_factory.mktemp("ckpt") / "iter_0000000", net, {"iteration": 0, "seed": 0})


# =============================================================================
# Exit codes and parsing
# =============================================================================

class TestExitCodes:

    def test_error_classes(self):
        assert exit_code_for(ContractError("bad")) == 1
        assert exit_code_for(NumericError("nan")) == 2
        assert exit_code_for(ValueError("other")) == 1

    @pytest.mark.parametrize("argv", [
        [],
        ["frobnicate"],
        ["train"],
        ["train", "--data", "x", "--paper-schedule", "--phases", "32x1x1"],
        ["train", "--data", "x", "--phases", "32x4"],
        ["analyze", "--annulus", "0.1"],
        ["synth", "--count", "many"],
    ])
    def test_usage_errors(self, argv):
        code, output = run_cli(*argv)
        assert code == EXIT_USAGE
        assert "usage:" in output

    def test_invalid_configuration(self, tmp_path):
        code, output = run_cli("synth", "--run-dir", tmp_path / "run", "--set", "net.base_channels=0", *QUIET)
        assert code == 1
        assert "Invalid configuration" in output
        assert "net.base_channels" in output

    def test_missing_dataset(self, tmp_path):
        code, output = run_cli("eval", "--data", tmp_path / "nowhere", "--run-dir", tmp_path / "run", *QUIET)
        assert code == 1
        assert "manifest" in output

    def test_non_finite_training_data(self, tmp_path):
        root = tmp_path / "data"
        synth_dataset(1, root, seed=0, n=16, n_angles=20)
        write_mart(root / "samples" / "00000_input.mart", np.full((16, 16), np.nan), "float64")
        code, _ = run_cli("train", "--data", root, "--phases", "16x1x1", "--run-dir", tmp_path / "run",
                          *MICRO_FLAGS, *QUIET)
        assert code == 2

    def test_flags_map_to_keys(self):
        args = build_parser().parse_args(["train", "--data", "d", "--paper-schedule", "--loss", "lpips",
                                          "--fmb-branches", "nv", "--stage-blocks", "1,0,0,0,0,0,0,1"])
        overrides = config_overrides(args)
        assert overrides["phases.preset"] == "paper"
        assert overrides["schedule.lr_max"] == 2e-4 and overrides["schedule.t_max"] == 1000
        assert overrides["loss.mode"] == "lpips"
        assert overrides["net.branches"] == "nv"
        assert overrides["net.stage_blocks"] == [1, 0, 0, 0, 0, 0, 0, 1]

    def test_version(self, capsys):
        with pytest.raises(SystemExit) as info:
            build_parser().parse_args(["--version"])
        assert info.value.code == 0
        assert "marmamba" in capsys.readouterr().out


# =============================================================================
# Run directories
# =============================================================================

class TestRunDirectory:

    def test_synth_writes_run_files(self, tmp_path):
        run_dir = tmp_path / "run"
        code, _ = run_cli("synth", "--count", 2, "--size", 16, "--angles", 20, "--export-pgm",
                          "--run-dir", run_dir, "--seed", 5, *QUIET)
        assert code == 0
        meta = json.loads((run_dir / "run.json").read_text())
        assert meta["command"] == "synth" and meta["seed"] == 5
        assert "synth" in meta["argv"]
        resolved = json.loads((run_dir / "resolved_config.json").read_text())
        assert resolved["synth"]["count"] == 2 and resolved["runtime"]["seed"] == 5
        summary = json.loads((run_dir / "run_summary.json").read_text())
        assert summary["summary"]["count"] == 2
        assert (run_dir / "dataset" / "manifest.json").is_file()
        assert (run_dir / "dataset" / "previews" / "00000_input.pgm").is_file()

    def test_refuses_non_empty_directory(self, tmp_path):
        run_dir = tmp_path / "run"
        run_dir.mkdir()
        (run_dir / "keep.txt").write_text("mine")
        code, output = run_cli("synth", "--count", 1, "--size", 16, "--angles", 20, "--run-dir", run_dir, *QUIET)
        assert code == 1
        assert "--force" in output
        assert sorted(p.name for p in run_dir.iterdir()) == ["keep.txt"]

        code, _ = run_cli("synth", "--count", 1, "--size", 16, "--angles", 20, "--run-dir", run_dir,
                          "--force", *QUIET)
        assert code == 0
        assert (run_dir / "keep.txt").read_text() == "mine"

    def test_paper_schedule_is_recorded(self, tmp_path):
        run_dir = tmp_path / "run"
        # the run fails on the missing dataset after the configuration snapshot is written
        code, _ = run_cli("train", "--data", tmp_path / "missing", "--paper-schedule", "--run-dir", run_dir, *QUIET)
        assert code == 1
        resolved = json.loads((run_dir / "resolved_config.json").read_text())
        assert resolved["phases"]["preset"] == "paper"
        assert resolved["phases"]["list"] == PAPER_PHASE_LIST
        assert resolved["schedule"]["lr_max"] == 2e-4 and resolved["schedule"]["t_max"] == 1000


# =============================================================================
# Commands
# =============================================================================

class TestCommands:

    def test_train_then_eval_then_resume(self, dataset, tmp_path):
        train_dir = tmp_path / "train"
        code, _ = run_cli("train", "--data", dataset, "--phases", "16x1x2,16x2x1", "--checkpoint-every", 2,
                          "--run-dir", train_dir, *MICRO_FLAGS, *QUIET)
        assert code == 0
        log = pd.read_csv(train_dir / "loss_log.csv")
        assert log["iter"].tolist() == [0, 1, 2]
        summary = json.loads((train_dir / "run_summary.json").read_text())
        assert summary["summary"]["iterations"] == 3
        final = summary["outputs"]["checkpoint"]
        assert final.endswith("iter_0000003")

        eval_dir = tmp_path / "eval"
        code, _ = run_cli("eval", "--data", dataset, "--checkpoint", final, "--run-dir", eval_dir, *QUIET)
        assert code == 0
        aggregate = pd.read_csv(eval_dir / "eval_aggregate.csv")
        assert set(aggregate["region_mode"]) == {"non_metal", "metal_included"}
        records = pd.read_csv(eval_dir / "eval_per_image.csv")
        assert len(records) == 6

        resume_dir = tmp_path / "resume"
        code, _ = run_cli("train", "--data", dataset, "--phases", "16x1x2,16x2x1", "--checkpoint-every", 2,
                          "--resume", train_dir / "checkpoints" / "iter_0000002",
                          "--run-dir", resume_dir, *MICRO_FLAGS, *QUIET)
        assert code == 0
        assert pd.read_csv(resume_dir / "loss_log.csv")["iter"].tolist() == [2]

    def test_baseline_eval(self, dataset, tmp_path):
        run_dir = tmp_path / "eval"
        code, _ = run_cli("eval", "--data", dataset, "--limit", 2, "--dilation", 1, "--run-dir", run_dir, *QUIET)
        assert code == 0
        summary = json.loads((run_dir / "run_summary.json").read_text())
        assert summary["summary"] == {"images": 2, "baseline": True}

    def test_infer_png(self, checkpoint, tmp_path):
        source = tmp_path / "scan.png"
        gray = np.full((20, 28), 80, dtype=np.uint8)
        gray[8:11, 8:11] = 255
        Image.fromarray(gray).save(source)
        run_dir = tmp_path / "run"
        code, _ = run_cli("infer", "--checkpoint", checkpoint, "--input", source, "--real-mode",
                          "--run-dir", run_dir, *QUIET)
        assert code == 0
        restored = read_mart(run_dir / "restored.mart")
        assert restored.shape == (20, 28)
        # metal pixels are copied back unchanged
        assert np.allclose(restored[8:11, 8:11], 1.5)
        assert (run_dir / "restored_hu.png").is_file()
        summary = json.loads((run_dir / "run_summary.json").read_text())["summary"]
        assert summary["metal_px"] == 9 and summary["real_mode"] is True

    def test_infer_rejects_unknown_format(self, checkpoint, tmp_path):
        source = tmp_path / "scan.bmp"
        source.write_bytes(b"BM")
        code, _ = run_cli("infer", "--checkpoint", checkpoint, "--input", source, "--run-dir", tmp_path / "run",
                          *QUIET)
        assert code == 1

    def test_analyze(self, checkpoint, tmp_path):
        run_dir = tmp_path / "run"
        code, _ = run_cli("analyze", "--checkpoint", checkpoint, "--bins", 12, "--profile-sizes", "8,16",
                          "--run-dir", run_dir, *QUIET)
        assert code == 0
        spectra = pd.read_csv(run_dir / "directional_energy.csv")
        assert len(spectra) == 12
        for name in ("feature_energy_normal.png", "input_hu.png", "restored_hu.png", "error_map.png",
                     "profile.csv"):
            assert (run_dir / name).is_file(), name
        summary = json.loads((run_dir / "run_summary.json").read_text())["summary"]
        assert summary["block"] == "enc2.0"
        assert 0 <= summary["peak_bin_horizontal"] < 12

    def test_analyze_fresh_network(self, tmp_path):
        code, _ = run_cli("analyze", "--run-dir", tmp_path / "run", "--block", "dec2.0", *MICRO_SET, *QUIET)
        assert code == 0

    def test_unknown_fault_target(self, tmp_path):
        code, _ = run_cli("gradcheck", "--inject-fault", "NoSuchOp", "--run-dir", tmp_path / "run", *QUIET)
        assert code == 1

    def test_gradcheck_detects_injected_fault(self, tmp_path):
        run_dir = tmp_path / "run"
        code, _ = run_cli("gradcheck", "--inject-fault", "Conv2d", "--cap", 24, "--run-dir", run_dir, *QUIET)
        assert code == 0
        report = json.loads((run_dir / "gradcheck.json").read_text())
        assert report["inject_fault"] == "Conv2d"
        assert report["max_error"] >= 1e-4

    @pytest.mark.slow
    def test_gradcheck_clean(self, tmp_path):
        code, _ = run_cli("gradcheck", "--run-dir", tmp_path / "run", *QUIET)
        assert code == 0

    @pytest.mark.slow
    def test_selftest_quick(self, checkpoint, tmp_path):
        run_dir = tmp_path / "run"
        code, output = run_cli("selftest", "--quick", "--checkpoint", checkpoint, "--run-dir", run_dir, *QUIET)
        assert code == 0, output
        table = pd.read_csv(run_dir / "selftest.csv")
        assert table["passed"].all()
