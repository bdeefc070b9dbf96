"""
Finite-Difference Gradient Oracle

Central differences against the analytic backward pass, for single
primitives (check_gradients) and for parameter sets of whole models (see
src.core.verification). fault_injection() corrupts one op's backward so the
harness can prove it catches errors.

Usage:
    report = check_gradients(lambda x, w: conv2d(x, w, b, pad=1), x_arr, w_arr)
    assert report.max_error < 1e-6

    with fault_injection("Sigmoid"):
        bad = check_gradients(sigmoid, x_arr)
"""

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Type, Union

import numpy as np

from ..utils.errors import ConfigurationError
from . import ops
from .tensor import Function, Tensor


@dataclass
class GradcheckReport:
    """Worst error per checked input plus the overall maximum."""
    errors: Dict[str, float] = field(default_factory=dict)
    checked: int = 0

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def failures(self, tolerance: float) -> List[str]:
        return [name for name, err in self.errors.items() if not err < tolerance]

    def to_dict(self) -> Dict[str, object]:
        return {"max_error": self.max_error, "checked": self.checked, "errors": dict(self.errors)}


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """|analytic - numeric| / max(1, |analytic|)."""
    return np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))


def check_gradients(fn: Callable[..., Tensor], *arrays: np.ndarray, eps: float = 1e-5,
                    seed: int = 0, names: Optional[Sequence[str]] = None,
                    wrt: Optional[Sequence[int]] = None) -> GradcheckReport:
    """
    Compare analytic and central-difference gradients of fn at the given inputs.

    The output of fn is reduced to a scalar with a fixed random projection so
    every output element contributes.

    Args:
        fn: callable taking Tensors and returning a Tensor
        arrays: float64 input arrays
        eps: finite-difference step
        seed: seed of the projection weights
        names: labels for the report (defaults to arg0, arg1, ...)
        wrt: indices of inputs to check (default: all)
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    names = list(names) if names else [f"arg{i}" for i in range(len(arrays))]
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)

    reference = fn(*[Tensor(a) for a in arrays])
    weights = np.random.default_rng(seed).standard_normal(reference.shape)

    def objective(values: List[np.ndarray]) -> float:
        out = fn(*[Tensor(v) for v in values])
        return float(np.sum(out.data * weights))

    leaves = [Tensor(a.copy(), requires_grad=(i in wrt)) for i, a in enumerate(arrays)]
    loss = ops.sum(ops.mul(fn(*leaves), weights))
    loss.backward()

    report = GradcheckReport()
    for i in wrt:
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(arrays[i])
        numeric = np.zeros_like(arrays[i])
        flat = arrays[i].reshape(-1)
        for j in range(flat.size):
            original = flat[j]
            flat[j] = original + eps
            plus = objective(arrays)
            flat[j] = original - eps
            minus = objective(arrays)
            flat[j] = original
            numeric.reshape(-1)[j] = (plus - minus) / (2.0 * eps)
        report.errors[names[i]] = float(np.max(relative_error(analytic, numeric))) if numeric.size else 0.0
        report.checked += numeric.size
    return report


def _resolve_function(op: Union[str, Type[Function]]) -> Type[Function]:
    if isinstance(op, type) and issubclass(op, Function):
        return op
    candidate = getattr(ops, str(op), None)
    if isinstance(candidate, type) and issubclass(candidate, Function):
        return candidate
    from ..models import ssm

    candidate = getattr(ssm, str(op), None)
    if isinstance(candidate, type) and issubclass(candidate, Function):
        return candidate
    raise ConfigurationError("unknown op for fault injection", op=str(op))


@contextmanager
def fault_injection(op: Union[str, Type[Function]], scale: float = 1.5) -> Iterator[Type[Function]]:
    """Scale every gradient returned by one op's backward while the block runs."""
    cls = _resolve_function(op)
    original = cls.__dict__.get("backward")
    inherited = cls.backward

    def corrupted(self, grad):
        return tuple(None if g is None else g * scale for g in inherited(self, grad))

    cls.backward = corrupted
    try:
        yield cls
    finally:
        if original is not None:
            cls.backward = original
        else:
            del cls.backward
