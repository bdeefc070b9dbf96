"""
Error Hierarchy Module

All failures raised by the toolkit derive from MarError. The CLI maps the two
top-level families onto exit codes:

- ContractError and its subclasses: exit code 1 (bad input, bad config,
  violated pre-conditions, unreadable files)
- NumericError: exit code 2 (non-finite values in a scan, a gradient or a loss)

Usage:
    from ..utils.errors import ShapeError

    if x.ndim != 4:
        raise ShapeError("flip_spatial expects a 4-D tensor", got=x.shape)
"""

from typing import Any, Dict, List, Optional


class MarError(Exception):
    """Base class for every toolkit error. Keyword details are kept for logging."""

    exit_code = 1

    def __init__(self, message: str, **details: Any):
        super().__init__(message)
        self.message = message
        self.details: Dict[str, Any] = details

    def __str__(self) -> str:
        if not self.details:
            return self.message
        extra = ", ".join(f"{k}={v}" for k, v in self.details.items())
        return f"{self.message} ({extra})"


class ContractError(MarError):
    """A pre-condition or API contract was violated."""


class ConfigurationError(ContractError):
    """Invalid configuration, including invalid layer construction arguments."""


class ConfigurationValidationError(ConfigurationError):
    """Schema violations found while validating a configuration tree."""

    def __init__(self, message: str, errors: Optional[List[str]] = None, **details: Any):
        super().__init__(message, **details)
        self.errors = list(errors or [])

    def __str__(self) -> str:
        if not self.errors:
            return super().__str__()
        return super().__str__() + "\n  - " + "\n  - ".join(self.errors)


class ShapeError(ContractError):
    """Operand ranks or extents do not fit the operation."""


class FormatError(ContractError):
    """A MART1 file or JSON document is malformed."""


class CheckpointError(ContractError):
    """A checkpoint directory is missing, incomplete or corrupted."""


class DatasetError(ContractError):
    """Dataset generation or loading failed."""


class EvaluationError(ContractError):
    """A metric cannot be computed on the given inputs."""


class InferenceError(ContractError):
    """Inference inputs are unusable."""


class RenderError(ContractError):
    """An image cannot be rendered."""


class AnalysisError(ContractError):
    """A spectral or feature analysis cannot be computed."""


class NumericError(MarError):
    """Non-finite values were produced."""

    exit_code = 2


def exit_code_for(error: BaseException) -> int:
    """Exit code the CLI reports for an exception."""
    if isinstance(error, MarError):
        return error.exit_code
    return 1
