"""
Module and Layer Building Blocks

A Module owns Parameters and child Modules as attributes; named_parameters()
walks them in attribute-definition order so parameter names and checkpoint
layouts are deterministic ("enc1.0.fmb.branches.0.in_proj.weight").

Layers:
- Conv2d (k in {1, 3}), ConvTranspose2d (stride-2 upsampler)
- Linear, DepthwiseConv1d (sequence axis), LayerNorm (last axis)

Initialization draws from a numpy Generator passed in by the caller, so a
seed fully determines a network.
"""

from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from ..tensor import ops
from ..tensor.tensor import Tensor, get_default_dtype
from ..utils.errors import CheckpointError, ConfigurationError


class Parameter(Tensor):
    """A trainable leaf tensor."""

    def __init__(self, data: np.ndarray, name: Optional[str] = None):
        super().__init__(np.asarray(data, dtype=get_default_dtype()), requires_grad=True, name=name)


class Module:
    """Base class with parameter discovery, gradient reset and state dicts."""

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError(f"{type(self).__name__}.forward")

    def named_children(self) -> Iterator[Tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if isinstance(value, Parameter):
                yield prefix + name, value
        for name, child in self.named_children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self.named_children():
            yield from child.modules()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if strict and (missing or unexpected):
            raise CheckpointError("parameter names do not match the network",
                                  missing=missing[:5], unexpected=unexpected[:5])
        for name, array in state.items():
            if name not in own:
                continue
            if own[name].shape != tuple(array.shape):
                raise CheckpointError("parameter shape mismatch", name=name,
                                      expected=own[name].shape, found=tuple(array.shape))
            own[name].data = np.array(array, dtype=own[name].dtype, copy=True)
            own[name].grad = None


def uniform_init(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: np.random.Generator,
                 stride: int = 1, bias: bool = True, zero_init: bool = False,
                 padding: Optional[int] = None):
        if kernel_size not in (1, 3):
            raise ConfigurationError("kernel size must be 1 or 3", kernel_size=kernel_size)
        if in_channels < 1 or out_channels < 1:
            raise ConfigurationError("channel counts must be positive",
                                     in_channels=in_channels, out_channels=out_channels)
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = Parameter(np.zeros(shape) if zero_init else uniform_init(rng, shape, fan_in))
        if bias:
            self.bias = Parameter(np.zeros(out_channels) if zero_init
                                  else uniform_init(rng, (out_channels,), fan_in))
        else:
            self.bias = Tensor(np.zeros(out_channels))
        self.stride = stride
        self.pad = kernel_size // 2 if padding is None else padding

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class ConvTranspose2d(Module):
    """Stride-2, 3x3 transposed conv doubling H and W."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator):
        shape = (in_channels, out_channels, 3, 3)
        self.weight = Parameter(uniform_init(rng, shape, out_channels * 9))
        self.bias = Parameter(uniform_init(rng, (out_channels,), out_channels * 9))

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv_transpose2d(x, self.weight, self.bias, stride=2, pad=1, output_padding=1)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True):
        self.weight = Parameter(uniform_init(rng, (out_features, in_features), in_features))
        self.bias = Parameter(uniform_init(rng, (out_features,), in_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class DepthwiseConv1d(Module):
    def __init__(self, channels: int, kernel_size: int, rng: np.random.Generator):
        self.weight = Parameter(uniform_init(rng, (channels, kernel_size), kernel_size))
        self.bias = Parameter(uniform_init(rng, (channels,), kernel_size))

    def forward(self, x: Tensor) -> Tensor:
        return ops.depthwise_conv1d(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias, eps=self.eps)


def to_sequence(x: Tensor) -> Tensor:
    """B x C x H x W -> B x (H*W) x C, row-major pixel order."""
    b, c, h, w = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 3, 1)), (b, h * w, c))


def from_sequence(x: Tensor, height: int, width: int) -> Tensor:
    """Inverse of to_sequence."""
    b, _, c = x.shape
    return ops.transpose(ops.reshape(x, (b, height, width, c)), (0, 3, 1, 2))


def channel_layer_norm(x: Tensor, norm: LayerNorm) -> Tensor:
    """Layer norm over the channel axis of a B x C x H x W map."""
    return ops.transpose(norm(ops.transpose(x, (0, 2, 3, 1))), (0, 3, 1, 2))
