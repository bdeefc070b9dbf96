"""
Logging System Module

Structured, contextual logging for the toolkit. Every module obtains its
logger through get_logger(__name__); the CLI configures handlers once per run.

Features:
- Keyword fields on every call (logger.info("step", iteration=12, loss=0.3))
- Run context (run id, command, phase, sample id) attached to each record
- JSON-lines file output with rotation, plus a separate errors log
- Rich console output when rich is installed
- Operation timing (start_operation / end_operation, @log_execution_time)
- Thread-safe global setup

Usage:
    logger = get_logger(__name__)
    logger.set_context(command="train", phase=1)
    logger.info("Checkpoint written", iteration=500, path=str(path))

    @log_execution_time
    def synth_dataset(...):
        ...
"""

import json
import logging
import logging.handlers
import os
import sys
import threading
import time
import traceback
from dataclasses import dataclass, field
from datetime import datetime
from functools import wraps
from pathlib import Path
from typing import Any, Callable, Dict, Optional

try:
    from rich.console import Console
    from rich.logging import RichHandler
    RICH_AVAILABLE = True
except ImportError:
    RICH_AVAILABLE = False


LOG_FILE_NAME = "marmamba.log"
ERROR_LOG_FILE_NAME = "marmamba_errors.log"


@dataclass
class LogContext:
    """Run-level fields included in every structured record."""
    run_id: Optional[str] = None
    command: Optional[str] = None
    phase: Optional[int] = None
    sample_id: Optional[int] = None
    operation: Optional[str] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        context = {key: value for key, value in (
            ("run_id", self.run_id),
            ("command", self.command),
            ("phase", self.phase),
            ("sample_id", self.sample_id),
            ("operation", self.operation),
        ) if value is not None}
        context.update(self.metadata)
        return context


class ContextualLogger:
    """
    Logger wrapper that accepts keyword fields and carries a LogContext.

    Keyword fields are appended to the console message and stored as
    structured data for the JSON file handler.
    """

    def __init__(self, name: str, base_logger: logging.Logger):
        self.name = name
        self.base_logger = base_logger
        self.context = LogContext()
        self._lock = threading.RLock()
        self._operation_timers: Dict[str, Dict[str, Any]] = {}

    def set_context(self, **kwargs) -> None:
        with self._lock:
            for key, value in kwargs.items():
                if hasattr(self.context, key) and key != "metadata":
                    setattr(self.context, key, value)
                else:
                    self.context.metadata[key] = value

    def _prepare_log_data(self, message: str, **kwargs) -> Dict[str, Any]:
        log_data: Dict[str, Any] = {
            "timestamp": datetime.now().isoformat(),
            "logger": self.name,
            "message": message,
            "thread_id": threading.get_ident(),
            "process_id": os.getpid(),
        }
        context_data = self.context.to_dict()
        if context_data:
            log_data["context"] = context_data
        if kwargs:
            log_data["data"] = kwargs
        return log_data

    def _log(self, level: int, message: str, **kwargs) -> None:
        if not self.base_logger.isEnabledFor(level):
            return
        if kwargs:
            extra_info = ", ".join(f"{k}={v}" for k, v in kwargs.items() if k != "traceback")
            full_message = f"{message} ({extra_info})"
        else:
            full_message = message
        extra = {
            "structured_data": self._prepare_log_data(message, **kwargs),
            "context": self.context.to_dict(),
        }
        self.base_logger.log(level, full_message, extra=extra)

    def debug(self, message: str, **kwargs) -> None:
        self._log(logging.DEBUG, message, **kwargs)

    def info(self, message: str, **kwargs) -> None:
        self._log(logging.INFO, message, **kwargs)

    def warning(self, message: str, **kwargs) -> None:
        self._log(logging.WARNING, message, **kwargs)

    def error(self, message: str, exception: Optional[BaseException] = None, **kwargs) -> None:
        """Log an error; with exception, its type, message, details and traceback are attached."""
        if exception is not None:
            kwargs["exception_type"] = type(exception).__name__
            kwargs["exception_message"] = str(exception)
            details = getattr(exception, "details", None)
            if details:
                kwargs["details"] = details
            kwargs["traceback"] = "".join(traceback.format_exception(
                type(exception), exception, exception.__traceback__))
        self._log(logging.ERROR, message, **kwargs)

    def start_operation(self, operation_name: str, **kwargs) -> None:
        with self._lock:
            self._operation_timers[operation_name] = {
                "start_time": time.perf_counter(),
                "metadata": kwargs,
            }
        self.info(f"Started operation: {operation_name}", **kwargs)

    def end_operation(self, operation_name: str, **kwargs) -> float:
        """Log completion of a timed operation and return its duration in seconds."""
        with self._lock:
            timer_data = self._operation_timers.pop(operation_name, None)
        if timer_data is None:
            self.warning(f"No timer found for operation: {operation_name}")
            return 0.0
        duration = time.perf_counter() - timer_data["start_time"]
        self.info(f"Completed operation: {operation_name}",
                  **{**timer_data["metadata"], **kwargs, "duration_seconds": round(duration, 4)})
        return duration


class JSONFormatter(logging.Formatter):
    """One JSON object per line."""

    def format(self, record: logging.LogRecord) -> str:
        log_data: Dict[str, Any] = {
            "timestamp": datetime.fromtimestamp(record.created).isoformat(),
            "level": record.levelname,
            "logger": record.name,
            "message": record.getMessage(),
            "module": record.module,
            "function": record.funcName,
            "line": record.lineno,
        }
        if hasattr(record, "structured_data"):
            log_data.update(record.structured_data)
        if hasattr(record, "context"):
            log_data["context"] = record.context
        if record.exc_info:
            log_data["exception"] = {
                "type": record.exc_info[0].__name__,
                "message": str(record.exc_info[1]),
                "traceback": self.formatException(record.exc_info),
            }
        return json.dumps(log_data, default=str)


class MarLoggerSetup:
    """
    Handler configuration for a run.

    Config keys: level, console_output, use_rich_console, file_output,
    logs_folder, max_log_size_mb, backup_count, format.
    """

    def __init__(self, config: Optional[Dict[str, Any]] = None):
        self.config = dict(config or {})
        self.console = Console(stderr=True) if RICH_AVAILABLE else None
        self._loggers: Dict[str, ContextualLogger] = {}
        self._setup_complete = False

    def setup_logging(self) -> None:
        if self._setup_complete:
            return
        log_level = str(self.config.get("level", "INFO")).upper()
        log_format = self.config.get("format", "%(asctime)s - %(name)s - %(levelname)s - %(message)s")

        root_logger = logging.getLogger()
        root_logger.setLevel(getattr(logging, log_level, logging.INFO))
        for handler in root_logger.handlers[:]:
            if getattr(handler, "_marmamba", False):
                root_logger.removeHandler(handler)
                handler.close()

        if self.config.get("console_output", True):
            self._setup_console_handler(root_logger, log_format)
        if self.config.get("file_output", False):
            self._setup_file_handler(root_logger)
        self._configure_third_party_loggers()
        self._setup_complete = True

    def _setup_console_handler(self, logger: logging.Logger, log_format: str) -> None:
        if RICH_AVAILABLE and self.config.get("use_rich_console", True):
            handler: logging.Handler = RichHandler(
                console=self.console,
                show_time=True,
                show_path=False,
                rich_tracebacks=True,
                tracebacks_show_locals=False,
            )
        else:
            handler = logging.StreamHandler(sys.stderr)
            handler.setFormatter(logging.Formatter(log_format))
        handler._marmamba = True  # type: ignore[attr-defined]
        logger.addHandler(handler)

    def _setup_file_handler(self, logger: logging.Logger) -> None:
        logs_folder = Path(self.config.get("logs_folder", "logs"))
        logs_folder.mkdir(parents=True, exist_ok=True)
        max_bytes = int(self.config.get("max_log_size_mb", 50)) * 1024 * 1024
        backup_count = int(self.config.get("backup_count", 5))
        json_formatter = JSONFormatter()

        file_handler = logging.handlers.RotatingFileHandler(
            logs_folder / LOG_FILE_NAME, maxBytes=max_bytes, backupCount=backup_count, encoding="utf-8")
        file_handler.setFormatter(json_formatter)
        file_handler._marmamba = True  # type: ignore[attr-defined]
        logger.addHandler(file_handler)

        error_handler = logging.handlers.RotatingFileHandler(
            logs_folder / ERROR_LOG_FILE_NAME, maxBytes=max_bytes, backupCount=backup_count,
            encoding="utf-8")
        error_handler.setLevel(logging.ERROR)
        error_handler.setFormatter(json_formatter)
        error_handler._marmamba = True  # type: ignore[attr-defined]
        logger.addHandler(error_handler)

    def _configure_third_party_loggers(self) -> None:
        for logger_name in ("PIL", "matplotlib", "numexpr"):
            logging.getLogger(logger_name).setLevel(logging.WARNING)

    def get_logger(self, name: str) -> ContextualLogger:
        if name not in self._loggers:
            self._loggers[name] = ContextualLogger(name, logging.getLogger(name))
        return self._loggers[name]

    def close(self) -> None:
        root_logger = logging.getLogger()
        for handler in root_logger.handlers[:]:
            if getattr(handler, "_marmamba", False):
                root_logger.removeHandler(handler)
                handler.close()
        self._setup_complete = False


_logger_setup: Optional[MarLoggerSetup] = None
_setup_lock = threading.Lock()


def setup_logging(config: Optional[Dict[str, Any]] = None) -> None:
    """(Re)configure handlers; existing ContextualLogger instances stay valid."""
    global _logger_setup
    with _setup_lock:
        loggers = _logger_setup._loggers if _logger_setup is not None else {}
        if _logger_setup is not None:
            _logger_setup.close()
        _logger_setup = MarLoggerSetup(config)
        _logger_setup._loggers = loggers
        _logger_setup.setup_logging()


def shutdown_logging() -> None:
    """Detach and close the handlers installed by setup_logging."""
    with _setup_lock:
        if _logger_setup is not None:
            _logger_setup.close()


def get_logger(name: str) -> ContextualLogger:
    """Logger for a module; handlers are only installed by setup_logging."""
    global _logger_setup
    with _setup_lock:
        if _logger_setup is None:
            _logger_setup = MarLoggerSetup()
        return _logger_setup.get_logger(name)


def set_run_context(**kwargs) -> None:
    """Apply context fields to every logger created so far."""
    with _setup_lock:
        loggers = list(_logger_setup._loggers.values()) if _logger_setup is not None else []
    for logger in loggers:
        logger.set_context(**kwargs)


def log_execution_time(func: Callable) -> Callable:
    """Log start, end and duration of the wrapped call."""
    @wraps(func)
    def wrapper(*args, **kwargs):
        logger = get_logger(func.__module__)
        operation_name = f"{func.__module__}.{func.__name__}"
        logger.start_operation(operation_name)
        try:
            result = func(*args, **kwargs)
        except Exception as e:
            logger.end_operation(operation_name, success=False, error=str(e))
            raise
        logger.end_operation(operation_name, success=True)
        return result

    return wrapper
