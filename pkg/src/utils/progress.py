"""
Progress Tracking Module

Progress reporting for long-running commands:
- synth: samples generated
- train: phases and iterations (with the latest loss)
- eval: images scored

Rich progress bars are used when rich is importable and console output is
enabled; otherwise updates are logged at a coarse cadence. Thread-safe so
worker pools can report completions directly.

Usage:
    with ProgressTracker("train") as tracker:
        tracker.start_stage("phase 0 (32px)", total=300)
        for i in range(300):
            tracker.advance(loss=0.12)
        tracker.complete_stage()
"""

import threading
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from enum import Enum
from typing import Any, Dict, List, Optional

try:
    from rich.console import Console
    from rich.progress import (
        BarColumn, MofNCompleteColumn, Progress, SpinnerColumn, TaskID,
        TextColumn, TimeElapsedColumn, TimeRemainingColumn
    )
    from rich.table import Table
    RICH_AVAILABLE = True
except ImportError:
    RICH_AVAILABLE = False

from .logger import get_logger


class StageStatus(Enum):
    PENDING = "pending"
    ACTIVE = "active"
    COMPLETED = "completed"
    ERROR = "error"


@dataclass
class StageState:
    """State of one tracked stage (a training phase, a synthesis run, ...)."""
    name: str
    total: int = 0
    current: int = 0
    status: StageStatus = StageStatus.PENDING
    start_time: Optional[datetime] = None
    end_time: Optional[datetime] = None
    last_value: Optional[float] = None
    error_message: str = ""
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def percentage(self) -> float:
        return 100.0 * self.current / self.total if self.total > 0 else 0.0

    @property
    def duration(self) -> Optional[timedelta]:
        if self.start_time is None:
            return None
        return (self.end_time or datetime.now()) - self.start_time

    def mark_started(self) -> None:
        self.status = StageStatus.ACTIVE
        self.start_time = datetime.now()

    def mark_completed(self) -> None:
        self.status = StageStatus.COMPLETED
        self.end_time = datetime.now()

    def mark_error(self, message: str) -> None:
        self.status = StageStatus.ERROR
        self.error_message = message
        self.end_time = datetime.now()


class ProgressTracker:
    """
    Stage-based progress tracker.

    Args:
        command: command name shown in the summary title
        console_output: draw progress bars / summary on the console
        use_rich: prefer rich rendering when available
        log_every: fallback log cadence (in items) without rich
    """

    def __init__(self, command: str, console_output: bool = True, use_rich: bool = True,
                 log_every: int = 50):
        self.logger = get_logger(__name__)
        self.command = command
        self.console_output = console_output
        self.use_rich = use_rich and RICH_AVAILABLE and console_output
        self.log_every = max(1, log_every)
        self._lock = threading.RLock()
        self.stages: List[StageState] = []
        self.current: Optional[StageState] = None
        self.errors = 0
        self.console = Console() if self.use_rich else None
        self.progress = None
        self._task: Optional["TaskID"] = None
        if self.use_rich:
            self.progress = Progress(
                SpinnerColumn(),
                TextColumn("[progress.description]{task.description}"),
                BarColumn(),
                MofNCompleteColumn(),
                TextColumn("•"),
                TimeElapsedColumn(),
                TextColumn("•"),
                TimeRemainingColumn(),
                TextColumn("{task.fields[value]}"),
                console=self.console,
                expand=True,
            )

    def start_stage(self, name: str, total: int, **metadata: Any) -> StageState:
        with self._lock:
            if self.current is not None and self.current.status == StageStatus.ACTIVE:
                self.complete_stage()
            state = StageState(name=name, total=int(total), metadata=metadata)
            state.mark_started()
            self.stages.append(state)
            self.current = state
            if self.progress is not None:
                self._task = self.progress.add_task(name, total=max(1, state.total), value="")
            self.logger.debug("Stage started", stage=name, total=total)
            return state

    def advance(self, steps: int = 1, value: Optional[float] = None) -> None:
        with self._lock:
            state = self.current
            if state is None:
                return
            state.current = min(state.total, state.current + steps) if state.total else state.current + steps
            if value is not None:
                state.last_value = float(value)
            if self.progress is not None and self._task is not None:
                shown = "" if state.last_value is None else f"{state.last_value:.5f}"
                self.progress.update(self._task, completed=state.current, value=shown)
            elif state.current % self.log_every == 0 or state.current == state.total:
                self.logger.info("Progress", stage=state.name, done=state.current, total=state.total,
                                 value=state.last_value)

    def complete_stage(self) -> None:
        with self._lock:
            if self.current is None:
                return
            self.current.mark_completed()
            if self.progress is not None and self._task is not None:
                self.progress.update(self._task, completed=self.current.total)
            self.logger.debug("Stage completed", stage=self.current.name, items=self.current.current)
            self.current = None
            self._task = None

    def report_error(self, message: str) -> None:
        with self._lock:
            self.errors += 1
            if self.current is not None:
                self.current.mark_error(message)
                self.current = None

    def display_summary(self) -> None:
        if not self.console_output or not self.stages:
            return
        if self.use_rich:
            self._display_rich_summary()
        else:
            self._display_simple_summary()

    def _display_rich_summary(self) -> None:
        table = Table(title=f"marmamba {self.command}")
        table.add_column("Stage", style="cyan")
        table.add_column("Done", justify="right")
        table.add_column("Status")
        table.add_column("Duration", justify="right")
        table.add_column("Last value", justify="right")
        for s in self.stages:
            status = {"completed": "[green]completed", "error": "[red]error"}.get(s.status.value, s.status.value)
            duration = f"{s.duration.total_seconds():.1f}s" if s.duration else "-"
            last = "-" if s.last_value is None else f"{s.last_value:.6g}"
            table.add_row(s.name, f"{s.current}/{s.total}", status, duration, last)
        self.console.print(table)

    def _display_simple_summary(self) -> None:
        print(f"marmamba {self.command}")
        for s in self.stages:
            duration = f"{s.duration.total_seconds():.1f}s" if s.duration else "-"
            print(f"  {s.name}: {s.current}/{s.total} {s.status.value} {duration}")

    def __enter__(self) -> "ProgressTracker":
        if self.progress is not None:
            self.progress.start()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb) -> None:
        if exc_type is not None:
            self.report_error(str(exc_val))
        elif self.current is not None:
            self.complete_stage()
        if self.progress is not None:
            self.progress.stop()
        self.display_summary()
