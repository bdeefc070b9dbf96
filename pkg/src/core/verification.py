"""
Model Gradient Verification Module

Central finite differences against backpropagated gradients for every
parameter tensor of a network. Networks of at most EXHAUSTIVE_LIMIT scalars
are checked exhaustively; larger ones check a seeded SAMPLE_FRACTION of
every tensor, rounded up, so each tensor contributes at least one coordinate.

The scalar objective is a fixed random projection of the network output,
plus the combined training loss against a target when one is given.
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from ..metrics.losses import LossConfig, combined_loss
from ..models.backbone import MARMamba, NetConfig
from ..models.module import Module
from ..tensor import ops
from ..tensor.tensor import Tensor, no_grad
from ..utils.logger import get_logger

logger = get_logger(__name__)

GRADIENT_FLOOR = 1e-3
EXHAUSTIVE_LIMIT = 2000
SAMPLE_FRACTION = 0.05
MICRO_CONFIG = dict(base_channels=4, stage_blocks=(1,) * 8, head_zero_init=False)


@dataclass
class ModelGradcheckReport:
    errors: Dict[str, float] = field(default_factory=dict)
    checked: int = 0
    total: int = 0

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    def failures(self, tolerance: float = 1e-4) -> List[str]:
        return sorted(name for name, err in self.errors.items() if not err < tolerance)

    def to_dict(self) -> Dict[str, object]:
        return {"max_error": self.max_error, "checked": self.checked, "total": self.total,
                "errors": dict(sorted(self.errors.items()))}


def micro_network(seed: int = 0, **overrides) -> MARMamba:
    """The small network used by gradient verification and self-tests."""
    return MARMamba(NetConfig(**{**MICRO_CONFIG, **overrides}), seed=seed)


def model_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), GRADIENT_FLOOR)
    return np.abs(analytic - numeric) / scale


def sample_size(size: int) -> int:
    """Coordinates checked in one tensor of a sampled network."""
    # round first so 0.05 * 1080 lands on 54, not above it
    return max(1, math.ceil(round(SAMPLE_FRACTION * size, 9)))


def _select_coordinates(net: Module, cap: Optional[int], rng: np.random.Generator) -> Dict[str, np.ndarray]:
    named = list(net.named_parameters())
    total = sum(p.size for _, p in named)
    chosen = {}
    for name, p in named:
        if total <= (EXHAUSTIVE_LIMIT if cap is None else cap):
            chosen[name] = np.arange(p.size)
            continue
        if cap is None:
            k = sample_size(p.size)
        else:
            k = int(round(cap * p.size / total))
        chosen[name] = np.sort(rng.choice(p.size, size=min(p.size, max(1, k)), replace=False))
    return chosen


def gradcheck_model(net: Module, x: np.ndarray, target: Optional[np.ndarray] = None,
                    cap: Optional[int] = None, eps: float = 1e-6, seed: int = 0,
                    loss_cfg: Optional[LossConfig] = None) -> ModelGradcheckReport:
    """
    Compare d(objective)/d(parameter) against central differences.

    Args:
        net: network in float64
        x: input batch B x 1 x H x W
        target: optional ground truth for the loss term
        cap: optional override; above cap scalars the sample is proportional to
            tensor size with cap coordinates in total
        eps: finite-difference step
        seed: seed for projection weights and coordinate selection
    """
    rng = np.random.default_rng(seed)
    inputs = Tensor(np.asarray(x, dtype=np.float64))
    with no_grad():
        reference = net(inputs)
    projection = rng.standard_normal(reference.shape)
    loss_cfg = loss_cfg or LossConfig()
    target_tensor = Tensor(np.asarray(target, dtype=np.float64)) if target is not None else None

    def objective() -> Tensor:
        out = net(inputs)
        value = ops.sum(ops.mul(out, projection))
        if target_tensor is not None:
            value = ops.add(value, combined_loss(target_tensor, out, loss_cfg))
        return value

    net.zero_grad()
    objective().backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for name, p in net.named_parameters()}

    report = ModelGradcheckReport(total=sum(p.size for p in net.parameters()))
    coordinates = _select_coordinates(net, cap, rng)
    with no_grad():
        for name, p in net.named_parameters():
            flat = p.data.reshape(-1)
            numeric = np.empty(coordinates[name].size)
            for k, j in enumerate(coordinates[name]):
                original = flat[j]
                flat[j] = original + eps
                plus = objective().item()
                flat[j] = original - eps
                minus = objective().item()
                flat[j] = original
                numeric[k] = (plus - minus) / (2.0 * eps)
            expected = analytic[name].reshape(-1)[coordinates[name]]
            report.errors[name] = float(np.max(model_relative_error(expected, numeric))) if numeric.size else 0.0
            report.checked += numeric.size
    net.zero_grad()
    logger.info("Model gradient check", checked=report.checked, total=report.total,
                max_error=f"{report.max_error:.3e}")
    return report
