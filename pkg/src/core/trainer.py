"""
Progressive Training Module

Runs the phase schedule (image size, batch size, iterations) over a list of
sample pairs: random crops, combined loss, backward, Adam with a cosine
learning rate that restarts at every phase.

Determinism: the batch of (phase p, phase iteration i) is drawn from
default_rng([seed, p, i]), so a resumed run replays the same batches as an
uninterrupted one.

Outputs (in the run directory):
    loss_log.csv      iter, phase, lr, loss_total, loss_phuber, loss_perceptual
    checkpoints/      every checkpoint_every iterations and at phase ends
"""

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from ..metrics.losses import LossConfig, loss_terms
from ..models.backbone import DOWNSAMPLE_FACTOR, MARMamba
from ..synth.dataset import SamplePair
from ..tensor.tensor import Tensor
from ..utils.errors import ConfigurationError, DatasetError, NumericError
from ..utils.logger import get_logger
from .checkpoints import CheckpointStore, ModelCheckpoint
from .optim import Adam, ScheduleConfig, cosine_lr

logger = get_logger(__name__)

LOSS_LOG_COLUMNS = ["iter", "phase", "lr", "loss_total", "loss_phuber", "loss_perceptual"]


@dataclass(frozen=True)
class ProgressivePhase:
    image_size: int
    batch_size: int
    iterations: int

    def __post_init__(self) -> None:
        if self.image_size < DOWNSAMPLE_FACTOR or self.image_size % DOWNSAMPLE_FACTOR:
            raise ConfigurationError("phase image size must be a positive multiple of 8",
                                     image_size=self.image_size)
        if self.batch_size < 1 or self.iterations < 0:
            raise ConfigurationError("phase batch size and iterations must be positive",
                                     batch_size=self.batch_size, iterations=self.iterations)


PAPER_PHASES: Tuple[ProgressivePhase, ...] = (
    ProgressivePhase(256, 8, 100_000),
    ProgressivePhase(336, 4, 200_000),
    ProgressivePhase(416, 2, 20_000),
)
DESK_PHASES: Tuple[ProgressivePhase, ...] = (
    ProgressivePhase(32, 4, 300),
    ProgressivePhase(48, 2, 300),
    ProgressivePhase(64, 1, 150),
)


def parse_phases(text: str) -> List[ProgressivePhase]:
    """"32x4x300,48x2x300" -> phases (size x batch x iterations)."""
    phases = []
    for chunk in filter(None, (c.strip() for c in text.split(","))):
        parts = chunk.lower().split("x")
        if len(parts) != 3 or not all(p.isdigit() for p in parts):
            raise ConfigurationError("phase must look like SIZExBATCHxITERS", phase=chunk)
        phases.append(ProgressivePhase(*(int(p) for p in parts)))
    if not phases:
        raise ConfigurationError("at least one phase is required", phases=text)
    return phases


@dataclass
class TrainState:
    iteration: int = 0
    phase: int = 0
    phase_iter: int = 0


@dataclass
class TrainResult:
    net: MARMamba
    history: List[Tuple[int, float]] = field(default_factory=list)
    checkpoint: Optional[Path] = None
    loss_log: Optional[Path] = None


def _random_crop(image: np.ndarray, target: np.ndarray, size: int,
                 rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    height, width = image.shape
    if height < size or width < size:
        factor = size / min(height, width)
        image = ndimage.zoom(image, factor, order=1)
        target = ndimage.zoom(target, factor, order=1)
        height, width = image.shape
    top = int(rng.integers(0, height - size + 1))
    left = int(rng.integers(0, width - size + 1))
    return image[top:top + size, left:left + size], target[top:top + size, left:left + size]


def sample_batch(pairs: Sequence[SamplePair], size: int, batch: int,
                 rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Uniform random crops; draws with replacement when the dataset is smaller than the batch."""
    if not pairs:
        raise DatasetError("cannot sample a batch from an empty dataset")
    indices = rng.choice(len(pairs), size=batch, replace=len(pairs) < batch)
    inputs, targets = [], []
    for index in indices:
        x, y = _random_crop(pairs[index].input, pairs[index].gt, size, rng)
        inputs.append(x)
        targets.append(y)
    return np.stack(inputs)[:, None], np.stack(targets)[:, None]


def _logged_rows_before(log_path: Path, iteration: int) -> List[List[str]]:
    """Rows of an existing loss log older than iteration; later rows are replayed on resume."""
    if iteration == 0 or not log_path.exists():
        return []
    with open(log_path, newline="", encoding="utf-8") as handle:
        rows = list(csv.reader(handle))[1:]
    return [row for row in rows if row and int(row[0]) < iteration]


class Trainer:
    """
    Progressive-resolution trainer.

    Args:
        net: network to train in place
        pairs: training samples
        loss_cfg: loss weights and mode
        schedule: cosine schedule (restarted at each phase)
        phases: ordered phase list
        seed: master seed for batch sampling
        run_dir: directory receiving loss_log.csv and checkpoints/
        checkpoint_every: global-iteration checkpoint cadence
        keep_last: checkpoints retained
        log_every: INFO log cadence
        adam_betas, adam_eps: Adam hyper-parameters
    """

    def __init__(self, net: MARMamba, pairs: Sequence[SamplePair], loss_cfg: LossConfig,
                 schedule: ScheduleConfig, phases: Sequence[ProgressivePhase], seed: int = 0,
                 run_dir: Optional[Path] = None, checkpoint_every: int = 500, keep_last: int = 3,
                 log_every: int = 50, adam_betas: Tuple[float, float] = (0.9, 0.999), adam_eps: float = 1e-8,
                 on_iteration: Optional[Callable[[int, int, float], None]] = None):
        if checkpoint_every < 1:
            raise ConfigurationError("checkpoint_every must be positive", checkpoint_every=checkpoint_every)
        self.net = net
        self.pairs = list(pairs)
        self.loss_cfg = loss_cfg
        self.schedule = schedule
        self.phases = list(phases)
        self.seed = seed
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.checkpoint_every = checkpoint_every
        self.log_every = max(1, log_every)
        self.on_iteration = on_iteration
        self.optimizer = Adam(list(net.named_parameters()), adam_betas[0], adam_betas[1], adam_eps)
        self.state = TrainState()
        self.store = CheckpointStore(self.run_dir / "checkpoints", keep_last) if self.run_dir else None
        self.history: List[Tuple[int, float]] = []

    @property
    def total_iterations(self) -> int:
        return sum(p.iterations for p in self.phases)

    def resume(self, checkpoint: ModelCheckpoint) -> None:
        """Continue from a checkpoint written by this trainer's configuration."""
        self.net.load_state_dict(checkpoint.net.state_dict())
        if checkpoint.optimizer:
            self.optimizer.load_state_arrays(checkpoint.optimizer, checkpoint.meta.get("adam_step", 0))
        self.state = TrainState(iteration=checkpoint.iteration,
                                phase=int(checkpoint.meta.get("phase", 0)),
                                phase_iter=int(checkpoint.meta.get("phase_iter", 0)))
        logger.info("Resuming training", iteration=self.state.iteration, phase=self.state.phase,
                    phase_iter=self.state.phase_iter)

    def step(self, phase_index: int, phase_iter: int) -> Tuple[float, float, float, float]:
        """One optimization step; returns (lr, total, phuber, perceptual)."""
        phase = self.phases[phase_index]
        rng = np.random.default_rng([self.seed, phase_index, phase_iter])
        inputs, targets = sample_batch(self.pairs, phase.image_size, phase.batch_size, rng)
        dtype = self.net.stem.weight.dtype
        prediction = self.net(Tensor(inputs.astype(dtype)))
        terms = loss_terms(Tensor(targets.astype(dtype)), prediction, self.loss_cfg)
        total, phuber, perceptual = terms.values()
        if not np.isfinite(total):
            raise NumericError("training loss is not finite", iteration=self.state.iteration)
        self.optimizer.zero_grad()
        terms.total.backward()
        lr = cosine_lr(phase_iter, self.schedule)
        self.optimizer.step(lr)
        return lr, total, phuber, perceptual

    def checkpoint(self) -> Optional[Path]:
        if self.store is None:
            return None
        meta = {"iteration": self.state.iteration, "phase": self.state.phase,
                "phase_iter": self.state.phase_iter, "seed": self.seed,
                "adam_step": self.optimizer.state.step}
        return self.store.save(self.net, meta, self.optimizer.state_arrays())

    def train(self) -> TrainResult:
        log_path = self.run_dir / "loss_log.csv" if self.run_dir else None
        writer = None
        handle = None
        if log_path is not None:
            log_path.parent.mkdir(parents=True, exist_ok=True)
            kept = _logged_rows_before(log_path, self.state.iteration)
            handle = open(log_path, "w", newline="", encoding="utf-8")
            writer = csv.writer(handle)
            writer.writerow(LOSS_LOG_COLUMNS)
            writer.writerows(kept)
        last_checkpoint = None
        try:
            while self.state.phase < len(self.phases):
                phase = self.phases[self.state.phase]
                logger.set_context(phase=self.state.phase)
                while self.state.phase_iter < phase.iterations:
                    lr, total, phuber, perceptual = self.step(self.state.phase, self.state.phase_iter)
                    if writer is not None:
                        writer.writerow([self.state.iteration, self.state.phase, repr(float(lr)),
                                         repr(float(total)), repr(float(phuber)), repr(float(perceptual))])
                    self.history.append((self.state.iteration, total))
                    if self.state.iteration % self.log_every == 0:
                        logger.info("Training step", iteration=self.state.iteration,
                                    lr=f"{lr:.3e}", loss=f"{total:.6f}")
                    self.state.iteration += 1
                    self.state.phase_iter += 1
                    if self.on_iteration is not None:
                        self.on_iteration(self.state.iteration, self.state.phase, total)
                    if self.state.iteration % self.checkpoint_every == 0 \
                            and self.state.phase_iter < phase.iterations:
                        if handle is not None:
                            handle.flush()
                        last_checkpoint = self.checkpoint() or last_checkpoint
                self.state.phase += 1
                self.state.phase_iter = 0
                if handle is not None:
                    handle.flush()
                last_checkpoint = self.checkpoint() or last_checkpoint
        finally:
            if handle is not None:
                handle.close()
        return TrainResult(net=self.net, history=self.history, checkpoint=last_checkpoint, loss_log=log_path)
