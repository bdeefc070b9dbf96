"""
Selective State-Space Scan Module

Recurrence, per channel d and state n:

    h_t = exp(delta_t * A[d, n]) * h_{t-1} + (delta_t * B_t[n]) * x_t
    y_t = sum_n C_t[n] * h_t + D[d] * x_t,        h_0 = 0

with A = -exp(a_log) < 0 and delta = softplus(...) > 0, so every decay factor
lies in (0, 1).

Two evaluation strategies share one autodiff Function:
- "sequential": the step-by-step oracle
- "chunked": blocks of `chunk` steps solved in closed form through cumulative
  log-decays (lower-triangular segment sums), carried across blocks sequentially

The backward pass is analytic: a reverse scan of the state gradient using the
same strategy, with the per-step states kept from the forward pass.

Usage:
    block = MambaBlock(channels=12, rng=np.random.default_rng(0))
    y = block(x)                      # x: B x L x C
"""

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from ..tensor import ops
from ..tensor.tensor import Function, Tensor, record_macs
from ..utils.errors import ConfigurationError, NumericError, ShapeError
from .module import DepthwiseConv1d, Linear, Module, Parameter


@dataclass
class SsmConfig:
    """Hyper-parameters of one Mamba branch."""
    d_state: int = 8
    expand: int = 2
    conv_kernel: int = 3
    dt_min: float = 1e-3
    dt_max: float = 1e-1
    chunk: int = 16
    method: str = "chunked"

    def __post_init__(self) -> None:
        if self.d_state < 1 or self.expand < 1 or self.chunk < 1:
            raise ConfigurationError("d_state, expand and chunk must be positive",
                                     d_state=self.d_state, expand=self.expand, chunk=self.chunk)
        if self.conv_kernel < 1:
            raise ConfigurationError("conv_kernel must be positive", conv_kernel=self.conv_kernel)
        if not 0.0 < self.dt_min <= self.dt_max:
            raise ConfigurationError("need 0 < dt_min <= dt_max", dt_min=self.dt_min, dt_max=self.dt_max)
        if self.method not in ("chunked", "sequential"):
            raise ConfigurationError("scan method must be chunked or sequential", method=self.method)

    @staticmethod
    def dt_rank(channels: int) -> int:
        return math.ceil(channels / 16)


@dataclass
class ScanState:
    """Hidden state h (B x D x N) after position t."""
    h: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, batch: int, channels: int, d_state: int, dtype=np.float64) -> "ScanState":
        return cls(h=np.zeros((batch, channels, d_state), dtype=dtype), t=0)

    def advance(self, decay: np.ndarray, drive: np.ndarray) -> "ScanState":
        return ScanState(h=decay * self.h + drive, t=self.t + 1)


def _sequential_states(log_decay: np.ndarray, drive: np.ndarray) -> np.ndarray:
    batch, length, channels, d_state = drive.shape
    states = np.empty_like(drive)
    decay = np.exp(log_decay)
    state = ScanState.zeros(batch, channels, d_state, dtype=drive.dtype)
    for t in range(length):
        state = state.advance(decay[:, t], drive[:, t])
        states[:, t] = state.h
    return states


def _chunked_states(log_decay: np.ndarray, drive: np.ndarray, chunk: int) -> np.ndarray:
    batch, length, channels, d_state = drive.shape
    k = min(chunk, length)
    blocks = -(-length // k)
    pad = blocks * k - length
    if pad:
        widths = [(0, 0), (0, pad), (0, 0), (0, 0)]
        log_decay = np.pad(log_decay, widths)
        drive = np.pad(drive, widths)
    ld = log_decay.reshape(batch, blocks, k, channels, d_state)
    u = drive.reshape(batch, blocks, k, channels, d_state)

    cum = np.cumsum(ld, axis=2)
    # segment[t, s] = sum of log-decays over (s, t]; only s <= t is used
    segment = cum[:, :, :, None] - cum[:, :, None, :]
    lower = np.tril(np.ones((k, k), dtype=bool))[None, None, :, :, None, None]
    weights = np.where(lower, np.exp(np.minimum(segment, 0.0)), 0.0)
    states = np.einsum("bmtsdn,bmsdn->bmtdn", weights, u)

    carry_decay = np.exp(cum)
    carry = np.zeros((batch, channels, d_state), dtype=drive.dtype)
    for m in range(blocks):
        states[:, m] += carry_decay[:, m] * carry[:, None]
        carry = states[:, m, -1]
    return states.reshape(batch, blocks * k, channels, d_state)[:, :length]


def _scan_states(log_decay: np.ndarray, drive: np.ndarray, method: str, chunk: int) -> np.ndarray:
    if method == "sequential":
        return _sequential_states(log_decay, drive)
    return _chunked_states(log_decay, drive, chunk)


def _first_bad_step(states: np.ndarray) -> Optional[int]:
    bad = ~np.isfinite(states)
    if not bad.any():
        return None
    per_step = bad.reshape(states.shape[0], states.shape[1], -1).any(axis=(0, 2))
    return int(np.argmax(per_step))


class SelectiveScan(Function):
    """Inputs: x, delta (B x L x D), a (D x N, negative), b, c (B x L x N), d (D)."""

    def forward(self, x, delta, a, b, c, d, chunk=16, method="chunked"):
        if x.ndim != 3 or delta.shape != x.shape:
            raise ShapeError("scan expects x and delta of shape B x L x D", x=x.shape, delta=delta.shape)
        if a.shape[0] != x.shape[2] or b.shape != c.shape or b.shape[:2] != x.shape[:2] \
                or b.shape[2] != a.shape[1] or d.shape != (x.shape[2],):
            raise ShapeError("scan parameter shapes are inconsistent",
                             x=x.shape, a=a.shape, b=b.shape, c=c.shape, d=d.shape)
        if x.shape[1] < 1:
            raise ShapeError("scan needs at least one step", length=x.shape[1])
        log_decay = delta[..., None] * a
        dx = delta * x
        drive = dx[..., None] * b[:, :, None, :]
        states = _scan_states(log_decay, drive, method, chunk)
        bad = _first_bad_step(states)
        if bad is not None:
            raise NumericError("non-finite hidden state in selective scan", step=bad)
        record_macs(3 * states.size)
        self.saved = (x, delta, a, b, c, d, log_decay, dx, states)
        self.method, self.chunk = method, chunk
        return np.einsum("bldn,bln->bld", states, c) + x * d

    def backward(self, grad):
        x, delta, a, b, c, d, log_decay, dx, states = self.saved
        gd = np.sum(grad * x, axis=(0, 1))
        gc = np.einsum("bld,bldn->bln", grad, states)
        direct = grad[..., None] * c[:, :, None, :]

        # g_t = direct_t + exp(log_decay_{t+1}) * g_{t+1}, solved as a forward scan on reversed time
        next_decay = np.concatenate([log_decay[:, 1:], np.zeros_like(log_decay[:, :1])], axis=1)
        g = _scan_states(next_decay[:, ::-1], direct[:, ::-1], self.method, self.chunk)[:, ::-1]

        previous = np.concatenate([np.zeros_like(states[:, :1]), states[:, :-1]], axis=1)
        g_log_decay = g * previous * np.exp(log_decay)
        g_dx = np.einsum("bldn,bln->bld", g, b)
        gb = np.einsum("bldn,bld->bln", g, dx)
        gx = g_dx * delta + grad * d
        gdelta = g_dx * x + np.einsum("bldn,dn->bld", g_log_decay, a)
        ga = np.einsum("bldn,bld->dn", g_log_decay, delta)
        return gx, gdelta, ga, gb, gc, gd


def selective_scan(x: Tensor, delta: Tensor, a: Tensor, b: Tensor, c: Tensor, d: Tensor,
                   chunk: int = 16, method: str = "chunked") -> Tensor:
    return SelectiveScan.apply(x, delta, a, b, c, d, chunk=chunk, method=method)


def reference_scan(x: np.ndarray, delta: np.ndarray, a: np.ndarray, b: np.ndarray,
                   c: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Plain sequential recurrence on arrays, one step at a time."""
    batch, length, channels = x.shape
    h = np.zeros((batch, channels, a.shape[1]))
    y = np.empty_like(x)
    for t in range(length):
        h = np.exp(delta[:, t, :, None] * a) * h + (delta[:, t] * x[:, t])[..., None] * b[:, t, None, :]
        y[:, t] = np.sum(h * c[:, t, None, :], axis=-1) + d * x[:, t]
    return y


def inverse_softplus(y: np.ndarray) -> np.ndarray:
    return y + np.log(-np.expm1(-y))


class MambaBlock(Module):
    """
    Single-direction Mamba mixer over a B x L x C sequence.

    in_proj -> (u, z); u -> depthwise conv (non-causal) -> SiLU -> selective
    scan -> * SiLU(z) -> out_proj.
    """

    def __init__(self, channels: int, rng: np.random.Generator, config: Optional[SsmConfig] = None):
        config = config or SsmConfig()
        self.config = config
        self.channels = channels
        inner = config.expand * channels
        rank = SsmConfig.dt_rank(channels)
        self.inner, self.rank = inner, rank

        self.in_proj = Linear(channels, 2 * inner, rng, bias=False)
        self.conv = DepthwiseConv1d(inner, config.conv_kernel, rng)
        self.x_proj = Linear(inner, rank + 2 * config.d_state, rng, bias=False)
        self.dt_proj = Linear(rank, inner, rng, bias=True)
        std = rank ** -0.5
        self.dt_proj.weight.data = rng.uniform(-std, std, size=(inner, rank))
        dt = np.exp(rng.uniform(np.log(config.dt_min), np.log(config.dt_max), size=inner))
        self.dt_proj.bias.data = inverse_softplus(np.maximum(dt, 1e-4))
        self.a_log = Parameter(np.log(np.tile(np.arange(1, config.d_state + 1, dtype=np.float64),
                                              (inner, 1))))
        self.d_skip = Parameter(np.ones(inner))
        self.out_proj = Linear(inner, channels, rng, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 3 or x.shape[2] != self.channels:
            raise ShapeError("mamba block expects B x L x C input", expected_channels=self.channels,
                             got=x.shape)
        n = self.config.d_state
        u, z = ops.split(self.in_proj(x), (self.inner, self.inner), axis=2)
        u = ops.silu(self.conv(u))
        dt_low, b, c = ops.split(self.x_proj(u), (self.rank, n, n), axis=2)
        delta = ops.softplus(self.dt_proj(dt_low))
        a = ops.neg(ops.exp(self.a_log))
        y = selective_scan(u, delta, a, b, c, self.d_skip,
                           chunk=self.config.chunk, method=self.config.method)
        return self.out_proj(ops.mul(y, ops.silu(z)))


def mamba_parameter_count(channels: int, config: Optional[SsmConfig] = None) -> int:
    """Closed-form parameter count of one MambaBlock."""
    config = config or SsmConfig()
    inner = config.expand * channels
    rank = SsmConfig.dt_rank(channels)
    n = config.d_state
    return (channels * 2 * inner + inner * (config.conv_kernel + 1) + inner * (rank + 2 * n)
            + rank * inner + inner + inner * n + inner + inner * channels)


def scan_shapes(length: int, channels: int, d_state: int, batch: int = 1) -> Tuple[Tuple[int, ...], ...]:
    """Shapes of (x, delta, a, b, c, d) for a scan problem."""
    return ((batch, length, channels), (batch, length, channels), (channels, d_state),
            (batch, length, d_state), (batch, length, d_state), (channels,))
