"""
Run Orchestrator Module

Central coordination for every command: prepares the run directory, wires
logging and progress tracking, resolves the configuration into domain
objects and calls the synthesis, training, evaluation, inference, analysis
and verification layers.

Every run directory receives:
- run.json              command, seed, argv, version string, start time
- resolved_config.json  the fully resolved configuration
- logs/                 JSON-lines logs (when file logging is enabled)
- run_summary.json      outputs and summary values of the command

Usage:
    orchestrator = RunOrchestrator(config, run_dir="runs/exp1", force=False)
    result = orchestrator.run("train", data="runs/data/dataset")
"""

from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from ..analysis.profiling import profile_model, write_profile
from ..analysis.render import Calibration, RenderWindow, error_map, heat_overlay, normalized_gray, render_hu, save_image
from ..analysis.spectral import branch_spectra, feature_energy_maps, write_spectra_csv
from ..config.settings import RunConfig
from ..metrics.evaluation import evaluate_set
from ..models.backbone import MARMamba, pad_to_multiple
from ..synth.dataset import generate_sample, load_dataset, synth_dataset
from ..tensor.gradcheck import fault_injection
from ..tensor.serialization import write_mart
from ..tensor.tensor import set_default_dtype
from ..utils.errors import AnalysisError, ContractError, NumericError
from ..utils.files import RunDirectory, atomic_write_json
from ..utils.logger import get_logger, set_run_context, setup_logging
from ..utils.progress import ProgressTracker
from .checkpoints import load_checkpoint
from .inference import excise_reinsert, predict_image, read_image
from .selftest import run_selftest
from .trainer import Trainer
from .verification import gradcheck_model, micro_network

COMMANDS = ("synth", "train", "eval", "infer", "analyze", "gradcheck", "selftest")
GRADCHECK_TOLERANCE = 1e-4


@dataclass
class RunResult:
    """Outputs and summary values of one command."""
    command: str
    run_dir: Path
    outputs: Dict[str, str] = field(default_factory=dict)
    summary: Dict[str, Any] = field(default_factory=dict)
    tables: Dict[str, pd.DataFrame] = field(default_factory=dict)
    start_time: datetime = field(default_factory=datetime.now)
    end_time: Optional[datetime] = None

    @property
    def duration(self) -> float:
        end = self.end_time or datetime.now()
        return (end - self.start_time).total_seconds()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "command": self.command,
            "run_dir": str(self.run_dir),
            "outputs": self.outputs,
            "summary": self.summary,
            "duration_seconds": round(self.duration, 3),
        }


class RunOrchestrator:
    """
    Runs one command inside a prepared run directory.

    Args:
        config: resolved run configuration
        run_dir: output directory of this run
        force: allow writing into a non-empty run directory
        argv: original command line, recorded in run.json
    """

    def __init__(self, config: RunConfig, run_dir: Union[str, Path], force: bool = False,
                 argv: Optional[Sequence[str]] = None):
        self.config = config
        self.run_dir = Path(run_dir)
        self.force = force
        self.argv = list(argv or [])
        self.logger = get_logger(__name__)
        self.seed = int(config.runtime.seed)
        self.threads = int(config.runtime.threads)
        self.run_directory: Optional[RunDirectory] = None

    # =========================================================================
    # Run directory and dispatch
    # =========================================================================

    def prepare(self, command: str) -> RunDirectory:
        self.run_directory = RunDirectory.prepare(self.run_dir, self.force)
        logging_config = self.config.logging.to_dict()
        logging_config["logs_folder"] = str(self.run_dir / "logs")
        setup_logging(logging_config)
        set_run_context(run_id=self.run_dir.name, command=command)
        self.run_directory.write_metadata(command, self.seed, self.argv)
        self.config.snapshot(self.run_dir)
        set_default_dtype(self.config.train.precision)
        return self.run_directory

    def run_command(self, command: str, **options: Any) -> RunResult:
        if command not in COMMANDS:
            raise ContractError("unknown command", command=command, available=list(COMMANDS))
        self.prepare(command)
        result = RunResult(command=command, run_dir=self.run_dir)
        self.logger.start_operation(command)
        try:
            getattr(self, f"_run_{command}")(result, **options)
        except Exception as e:
            self.logger.end_operation(command, success=False, error=str(e))
            raise
        result.end_time = datetime.now()
        self.logger.end_operation(command, success=True)
        atomic_write_json(self.run_dir / "run_summary.json", result.to_dict())
        return result

    def _resolve(self, path: Union[str, Path]) -> Path:
        """Relative paths are taken relative to the run directory."""
        path = Path(path)
        return path if path.is_absolute() else self.run_dir / path

    def _tracker(self, command: str) -> ProgressTracker:
        return ProgressTracker(command, console_output=bool(self.config.logging.console_output),
                               use_rich=bool(self.config.logging.use_rich_console))

    def _load_net(self, checkpoint: Optional[Union[str, Path]]) -> MARMamba:
        if checkpoint is None:
            self.logger.warning("No checkpoint given; using a freshly initialized network")
            return MARMamba(self.config.net_config(), seed=self.seed)
        return load_checkpoint(checkpoint).net

    # =========================================================================
    # Commands
    # =========================================================================

    def _run_synth(self, result: RunResult, out: Optional[str] = None) -> None:
        s = self.config.synth
        out_dir = self._resolve(out or "dataset")
        with self._tracker("synth") as tracker:
            tracker.start_stage("samples", total=s.count)
            manifest = synth_dataset(
                count=s.count, out_dir=out_dir, seed=self.seed, n=s.size, size_mix=list(s.size_mix),
                n_angles=s.n_angles, corruption=self.config.corruption_config(),
                max_workers=self.threads, export_pgm=s.export_pgm,
                calibration=self.config.calibration(), metal_count=s.metal_count,
                on_sample=lambda _: tracker.advance(),
            )
        result.outputs["dataset"] = str(out_dir)
        result.summary["groups"] = {g: sum(1 for e in manifest["samples"] if e["group"] == g)
                                    for g in s.size_mix}
        result.summary["count"] = len(manifest["samples"])

    def _run_train(self, result: RunResult, data: str, resume: Optional[str] = None) -> None:
        t = self.config.train
        pairs = load_dataset(data)
        net = MARMamba(self.config.net_config(), seed=self.seed)
        phases = self.config.phases()
        trainer = Trainer(net, pairs, self.config.loss_config(), self.config.schedule_config(), phases,
                          seed=self.seed, run_dir=self.run_dir, checkpoint_every=t.checkpoint_every,
                          keep_last=t.keep_last, log_every=t.log_every,
                          adam_betas=(t.adam_beta1, t.adam_beta2), adam_eps=t.adam_eps)
        if resume:
            trainer.resume(load_checkpoint(resume))
        self.logger.info("Training started", samples=len(pairs), params=net.num_parameters(),
                         phases=[(p.image_size, p.batch_size, p.iterations) for p in phases])

        with self._tracker("train") as tracker:
            current = {"phase": None}

            def on_iteration(iteration: int, phase: int, loss: float) -> None:
                if current["phase"] != phase:
                    spec = phases[phase]
                    tracker.start_stage(f"phase {phase} ({spec.image_size}px x{spec.batch_size})",
                                        total=spec.iterations)
                    tracker.advance(trainer.state.phase_iter - 1)
                    current["phase"] = phase
                tracker.advance(value=loss)

            trainer.on_iteration = on_iteration
            outcome = trainer.train()

        result.outputs["loss_log"] = str(outcome.loss_log)
        result.outputs["checkpoint"] = str(outcome.checkpoint) if outcome.checkpoint else ""
        result.summary["iterations"] = trainer.state.iteration
        result.summary["final_loss"] = outcome.history[-1][1] if outcome.history else None

    def _run_eval(self, result: RunResult, data: str, checkpoint: Optional[str] = None) -> None:
        e = self.config.eval
        pairs = load_dataset(data, limit=e.limit or None)
        predict = None
        if checkpoint is not None:
            net = load_checkpoint(checkpoint).net
            predict = lambda image: predict_image(net, image).image  # noqa: E731
        with self._tracker("eval") as tracker:
            tracker.start_stage("images", total=len(pairs))
            evaluation = evaluate_set(pairs, predict, modes=list(e.modes), dilation=e.dilation,
                                      max_workers=self.threads, on_image=lambda _: tracker.advance())
        paths = evaluation.write(self.run_dir)
        result.outputs.update({key: str(path) for key, path in paths.items()})
        result.tables["aggregate"] = evaluation.aggregate
        result.summary["images"] = len(pairs)
        result.summary["baseline"] = checkpoint is None

    def _run_infer(self, result: RunResult, checkpoint: str, input: str, output: Optional[str] = None,
                   real_mode: Optional[bool] = None, tau: Optional[float] = None) -> None:
        net = load_checkpoint(checkpoint).net
        image = read_image(input)
        real_mode = self.config.infer.real_mode if real_mode is None else real_mode
        tau = self.config.infer.tau if tau is None else tau
        timings: List[float] = []

        def predict(x: np.ndarray) -> np.ndarray:
            prediction = predict_image(net, x)
            timings.append(prediction.seconds)
            return prediction.image

        if real_mode:
            restored, mask = excise_reinsert(image, predict, tau)
            result.summary["metal_px"] = int(mask.sum())
        else:
            restored = predict(image)
        target = self._resolve(output or "restored.mart")
        write_mart(target, restored, "float64")
        window = RenderWindow(self.config.analysis.hu_lo, self.config.analysis.hu_hi)
        preview = save_image(target.with_name(f"{target.stem}_hu.png"),
                             render_hu(restored, window, Calibration.from_metadata(self.config.calibration())))
        result.outputs.update({"restored": str(target), "preview": str(preview)})
        result.summary.update({"height": image.shape[0], "width": image.shape[1],
                               "seconds": float(sum(timings)), "real_mode": real_mode})
        self.logger.info("Inference finished", seconds=f"{sum(timings):.4f}", output=str(target))

    def _analysis_image(self, input: Optional[str]) -> Dict[str, Optional[np.ndarray]]:
        if input is None:
            sample = generate_sample(0, self.seed, 64, "large")
            return {"input": sample.input, "gt": sample.gt, "mask": sample.mask}
        return {"input": read_image(input), "gt": None, "mask": None}

    def _run_analyze(self, result: RunResult, checkpoint: Optional[str] = None, input: Optional[str] = None,
                     gt: Optional[str] = None, profile: bool = False) -> None:
        a = self.config.analysis
        net = self._load_net(checkpoint)
        images = self._analysis_image(input)
        if gt is not None:
            images["gt"] = read_image(gt)
        image, record = pad_to_multiple(images["input"])
        if image.shape[0] != image.shape[1]:
            raise AnalysisError("branch analysis needs a square image", shape=image.shape)

        spectra = branch_spectra(net, image, a.block, a.bins, tuple(a.annulus))
        result.outputs["spectra"] = str(write_spectra_csv(self.run_dir / "directional_energy.csv", spectra))
        result.tables["spectra"] = spectra.to_frame()
        for branch, energy in feature_energy_maps(net, image, a.block).items():
            path = save_image(self.run_dir / f"feature_energy_{branch}.png", normalized_gray(energy))
            result.outputs[f"feature_energy_{branch}"] = str(path)

        calibration = Calibration.from_metadata(self.config.calibration())
        window = RenderWindow(a.hu_lo, a.hu_hi)
        restored = predict_image(net, images["input"]).image
        base = render_hu(images["input"], window, calibration)
        result.outputs["input_hu"] = str(save_image(self.run_dir / "input_hu.png", base))
        result.outputs["restored_hu"] = str(save_image(self.run_dir / "restored_hu.png",
                                                        render_hu(restored, window, calibration)))
        if images["gt"] is not None:
            errors = error_map(restored, images["gt"], a.gain, images["mask"])
            result.outputs["error_map"] = str(save_image(self.run_dir / "error_map.png", heat_overlay(errors, base)))
            result.summary["mean_amplified_error"] = float(errors.mean())

        for branch in ("horizontal", "vertical"):
            ratio = spectra.logratio(branch)
            if ratio is not None:
                result.summary[f"peak_bin_{branch}"] = int(np.argmax(ratio))
        if profile:
            table = profile_model(net, list(a.profile_sizes), a.profile_repeats, self.seed)
            result.outputs["profile"] = str(write_profile(self.run_dir / "profile.csv", table))
            result.tables["profile"] = table
        result.summary["block"] = a.block

    def _run_gradcheck(self, result: RunResult, inject_fault: Optional[str] = None,
                       cap: Optional[int] = None) -> None:
        rng = np.random.default_rng(self.seed)
        x = rng.random((1, 1, 16, 16))
        target = np.clip(x + 0.05 * rng.standard_normal(x.shape), 0.0, 1.0)
        set_default_dtype("float64")
        net = micro_network(seed=self.seed)
        if inject_fault:
            with fault_injection(inject_fault):
                report = gradcheck_model(net, x, target, cap=cap, seed=self.seed)
        else:
            report = gradcheck_model(net, x, target, cap=cap, seed=self.seed)
        result.outputs["report"] = str(atomic_write_json(self.run_dir / "gradcheck.json",
                                                         {**report.to_dict(), "inject_fault": inject_fault}))
        result.summary.update({"max_error": report.max_error, "checked": report.checked, "total": report.total})
        detected = report.max_error >= GRADCHECK_TOLERANCE
        if inject_fault:
            result.summary["fault_detected"] = detected
            if not detected:
                raise ContractError("injected gradient fault was not detected", op=inject_fault)
        elif detected:
            raise NumericError("gradient check failed", max_error=report.max_error,
                               failing=report.failures(GRADCHECK_TOLERANCE)[:5])

    def _run_selftest(self, result: RunResult, checkpoint: Optional[str] = None, quick: bool = False) -> None:
        net = load_checkpoint(checkpoint).net if checkpoint else None
        set_default_dtype("float64")
        results = run_selftest(quick=quick, seed=self.seed, net=net)
        table = pd.DataFrame([{"check": r.name, "passed": r.passed, "seconds": round(r.seconds, 3),
                               "detail": r.detail} for r in results])
        table.to_csv(self.run_dir / "selftest.csv", index=False)
        result.outputs["report"] = str(self.run_dir / "selftest.csv")
        result.tables["selftest"] = table
        failed = [r.name for r in results if not r.passed]
        result.summary.update({"checks": len(results), "failed": failed})
        if failed:
            raise ContractError("self-test failed", failed=failed)

    def run(self, command: str, **options: Any) -> RunResult:
        return self.run_command(command, **options)
