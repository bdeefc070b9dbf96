"""
Optimizer and Learning-Rate Schedule Module

Adam with bias correction and a cosine-annealed learning rate.

Schedule modes:
- "restart": period t_max with warm restarts; lr(0) = lr_max, lr(k * t_max) = lr_min
  for k >= 1, and the step after each minimum starts the next period
- "single": one cosine stretched over `total` iterations
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..models.module import Parameter
from ..utils.errors import ConfigurationError, ContractError, NumericError


@dataclass
class ScheduleConfig:
    lr_max: float = 2e-4
    lr_min: float = 1e-8
    t_max: int = 1000
    mode: str = "restart"
    total: Optional[int] = None

    def __post_init__(self) -> None:
        if not 0 <= self.lr_min <= self.lr_max:
            raise ConfigurationError("need 0 <= lr_min <= lr_max", lr_min=self.lr_min, lr_max=self.lr_max)
        if self.t_max < 1:
            raise ConfigurationError("t_max must be at least 1", t_max=self.t_max)
        if self.mode not in ("restart", "single"):
            raise ConfigurationError("schedule mode must be restart or single", mode=self.mode)
        if self.mode == "single" and (self.total is None or self.total < 1):
            raise ConfigurationError("single-cosine mode needs a positive total", total=self.total)


def cosine_lr(t: int, cfg: ScheduleConfig) -> float:
    if t < 0:
        raise ContractError("iteration must be non-negative", t=t)
    if cfg.mode == "single":
        period, tau = cfg.total, min(t, cfg.total)
    else:
        period = cfg.t_max
        tau = 0 if t == 0 else (t - 1) % period + 1
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + np.cos(np.pi * tau / period))


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    """Adam over a named parameter list; moments are keyed by parameter name."""

    def __init__(self, named_params: Sequence, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params: List = list(named_params)
        if not 0 <= beta1 < 1 or not 0 <= beta2 < 1 or eps <= 0:
            raise ConfigurationError("invalid Adam hyper-parameters", beta1=beta1, beta2=beta2, eps=eps)
        self.state = AdamState(beta1=beta1, beta2=beta2, eps=eps)
        for name, p in self.params:
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        if lr <= 0:
            raise ContractError("learning rate must be positive", lr=lr)
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericError("non-finite gradient", parameter=name)
        s = self.state
        s.step += 1
        correction1 = 1.0 - s.beta1 ** s.step
        correction2 = 1.0 - s.beta2 ** s.step
        for name, p in self.params:
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = s.m[name] = s.beta1 * s.m[name] + (1.0 - s.beta1) * grad
            v = s.v[name] = s.beta2 * s.v[name] + (1.0 - s.beta2) * grad * grad
            p.data = p.data - lr * (m / correction1) / (np.sqrt(v / correction2) + s.eps)

    def state_arrays(self) -> Dict[str, np.ndarray]:
        arrays = {f"m/{k}": v for k, v in self.state.m.items()}
        arrays.update({f"v/{k}": v for k, v in self.state.v.items()})
        return arrays

    def load_state_arrays(self, arrays: Dict[str, np.ndarray], step: int) -> None:
        for name, p in self.params:
            for kind, store in (("m", self.state.m), ("v", self.state.v)):
                key = f"{kind}/{name}"
                if key not in arrays or arrays[key].shape != p.data.shape:
                    raise ContractError("optimizer state does not match the parameters", key=key)
                store[name] = np.array(arrays[key], dtype=p.data.dtype)
        self.state.step = int(step)


def adam_step(params: Sequence[Parameter], state: AdamState, lr: float) -> None:
    """Functional form over positional parameters; moments keyed by position."""
    optimizer = Adam.__new__(Adam)
    optimizer.params = [(str(i), p) for i, p in enumerate(params)]
    optimizer.state = state
    for name, p in optimizer.params:
        state.m.setdefault(name, np.zeros_like(p.data))
        state.v.setdefault(name, np.zeros_like(p.data))
    optimizer.step(lr)
