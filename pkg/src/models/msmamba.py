"""
MS-Mamba Block Module

One MS-Mamba block is two residual sub-blocks, each behind a channel layer norm:

    x1 = x + FMB(LN1(x))
    y  = x1 + AMFN(LN2(x1))

FMB (flip Mamba block):
- 1x1 conv expands C -> 3C, split into three C-wide parts p0, p1, p2
- p0 is scanned in row-major order, p1 after a vertical flip, p2 after a
  horizontal flip; flipped branch outputs are flipped back so they align
  with the normal branch pixel for pixel
- y = m0 * act(m1) * act(m2), act = sigmoid (or identity for ablation);
  a disabled branch contributes the factor 1
- 1x1 conv C -> C

AMFN (average/maximum fusion feed-forward):
- u = GELU(1x1 conv C -> 2C)
- channel mean and channel max maps of u, concatenated (enabled ones only)
- w = sigmoid(3x3 conv of the pooled maps), replicate-padded
- 1x1 conv (u * w): 2C -> C
"""

import copy
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np

from ..tensor import ops
from ..tensor.tensor import Tensor
from ..utils.errors import ConfigurationError, ShapeError
from .module import Conv2d, LayerNorm, Module, channel_layer_norm, from_sequence, to_sequence
from .ssm import MambaBlock, SsmConfig

BRANCHES = ("normal", "vertical", "horizontal")
POOLS = ("average", "maximum")
WEIGHT_ACTIVATIONS = ("sigmoid", "identity")


@dataclass
class FmbConfig:
    channels: int
    branches: Tuple[str, ...] = BRANCHES
    weight_activation: str = "sigmoid"
    ssm: SsmConfig = field(default_factory=SsmConfig)

    def __post_init__(self) -> None:
        self.branches = tuple(self.branches)
        unknown = [b for b in self.branches if b not in BRANCHES]
        if unknown:
            raise ConfigurationError("unknown FMB branch", branches=unknown)
        if "normal" not in self.branches:
            raise ConfigurationError("the normal FMB branch must be enabled", branches=self.branches)
        if self.weight_activation not in WEIGHT_ACTIVATIONS:
            raise ConfigurationError("weight activation must be sigmoid or identity",
                                     weight_activation=self.weight_activation)
        if self.channels < 1:
            raise ConfigurationError("channels must be positive", channels=self.channels)


@dataclass
class AmfnConfig:
    channels: int
    pools: Tuple[str, ...] = POOLS
    expansion: int = 2
    kernel_size: int = 3

    def __post_init__(self) -> None:
        self.pools = tuple(p for p in POOLS if p in self.pools)
        if not self.pools:
            raise ConfigurationError("at least one AMFN pooling path must be enabled")
        if self.channels < 1 or self.expansion < 1:
            raise ConfigurationError("channels and expansion must be positive",
                                     channels=self.channels, expansion=self.expansion)


@dataclass
class BlockOptions:
    """Switches shared by every MS-Mamba block of a network."""
    branches: Tuple[str, ...] = BRANCHES
    weight_activation: str = "sigmoid"
    pools: Tuple[str, ...] = POOLS
    ssm: SsmConfig = field(default_factory=SsmConfig)
    norm_eps: float = 1e-5


def _scan_branch(mamba: MambaBlock, part: Tensor, flip: Optional[str]) -> Tensor:
    _, _, height, width = part.shape
    if flip is not None:
        part = ops.flip_spatial(part, flip)
    out = from_sequence(mamba(to_sequence(part)), height, width)
    return out if flip is None else ops.flip_spatial(out, flip)


class FlipMambaBlock(Module):
    """Three-direction scan with flipped branches gating the normal branch."""

    _FLIPS = {"normal": None, "vertical": "vertical", "horizontal": "horizontal"}

    def __init__(self, config: FmbConfig, rng: np.random.Generator):
        c = config.channels
        self.config = config
        self.expand = Conv2d(c, 3 * c, 1, rng)
        self.mamba_normal = MambaBlock(c, rng, config.ssm)
        self.mamba_vertical = MambaBlock(c, rng, config.ssm) if "vertical" in config.branches else None
        self.mamba_horizontal = (MambaBlock(c, rng, config.ssm)
                                 if "horizontal" in config.branches else None)
        self.project = Conv2d(c, c, 1, rng)
        # branch name -> (mamba attribute, index of its C-wide slice of the expansion)
        self.roles: Dict[str, Tuple[str, int]] = {
            "normal": ("mamba_normal", 0),
            "vertical": ("mamba_vertical", 1),
            "horizontal": ("mamba_horizontal", 2),
        }

    def forward_branches(self, x: Tensor) -> Dict[str, Optional[Tensor]]:
        """Branch activations m0, m1, m2 before weighting (None when disabled)."""
        if x.ndim != 4 or x.shape[1] != self.config.channels:
            raise ShapeError("FMB expects B x C x H x W", expected_channels=self.config.channels,
                             got=x.shape)
        c = self.config.channels
        parts = ops.split(self.expand(x), (c, c, c), axis=1)
        outputs: Dict[str, Optional[Tensor]] = {}
        for branch in BRANCHES:
            attribute, index = self.roles[branch]
            mamba = getattr(self, attribute)
            outputs[branch] = None if mamba is None else _scan_branch(mamba, parts[index],
                                                                      self._FLIPS[branch])
        return outputs

    def weight(self, m: Tensor) -> Tensor:
        return ops.sigmoid(m) if self.config.weight_activation == "sigmoid" else m

    def forward(self, x: Tensor) -> Tensor:
        m = self.forward_branches(x)
        y = m["normal"]
        for branch in ("vertical", "horizontal"):
            if m[branch] is not None:
                y = ops.mul(y, self.weight(m[branch]))
        return self.project(y)

    def with_swapped_roles(self, branch: str = "vertical") -> "FlipMambaBlock":
        """
        Shallow clone whose normal branch runs the given flipped branch's Mamba
        on its expansion slice, and vice versa. Parameters are shared.
        """
        if branch not in ("vertical", "horizontal"):
            raise ConfigurationError("only a flipped branch can swap with normal", branch=branch)
        if getattr(self, self.roles[branch][0]) is None:
            raise ConfigurationError("cannot swap a disabled branch", branch=branch)
        clone = copy.copy(self)
        clone.roles = dict(self.roles)
        clone.roles["normal"], clone.roles[branch] = self.roles[branch], self.roles["normal"]
        return clone


class AverageMaxFusion(Module):
    """Feed-forward block gated by channel-pooled spatial attention."""

    def __init__(self, config: AmfnConfig, rng: np.random.Generator):
        c, hidden = config.channels, config.expansion * config.channels
        self.config = config
        self.expand = Conv2d(c, hidden, 1, rng)
        self.attention = Conv2d(len(config.pools), 1, config.kernel_size, rng, padding=0)
        self.project = Conv2d(hidden, c, 1, rng)

    def pooled_maps(self, u: Tensor) -> Tensor:
        maps = []
        if "average" in self.config.pools:
            maps.append(ops.mean(u, axis=1, keepdims=True))
        if "maximum" in self.config.pools:
            maps.append(ops.max(u, axis=1, keepdims=True))
        return maps[0] if len(maps) == 1 else ops.concat(maps, axis=1)

    def gate(self, u: Tensor) -> Tensor:
        r = self.config.kernel_size // 2
        pooled = ops.pad2d(self.pooled_maps(u), (r, r, r, r), mode="replicate")
        return ops.sigmoid(self.attention(pooled))

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.channels:
            raise ShapeError("AMFN expects B x C x H x W", expected_channels=self.config.channels,
                             got=x.shape)
        u = ops.gelu(self.expand(x))
        return self.project(ops.mul(u, self.gate(u)))


class MsMambaBlock(Module):
    def __init__(self, channels: int, rng: np.random.Generator,
                 options: Optional[BlockOptions] = None):
        options = options or BlockOptions()
        self.channels = channels
        self.ln1 = LayerNorm(channels, options.norm_eps)
        self.fmb = FlipMambaBlock(FmbConfig(channels, options.branches, options.weight_activation,
                                            options.ssm), rng)
        self.ln2 = LayerNorm(channels, options.norm_eps)
        self.amfn = AverageMaxFusion(AmfnConfig(channels, options.pools), rng)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError("MS-Mamba block expects B x C x H x W", expected_channels=self.channels,
                             got=x.shape)
        x1 = ops.add(x, self.fmb(channel_layer_norm(x, self.ln1)))
        return ops.add(x1, self.amfn(channel_layer_norm(x1, self.ln2)))

    def fmb_input(self, x: Tensor) -> Tensor:
        """Normalized input seen by the FMB; used by branch analysis."""
        return channel_layer_norm(x, self.ln1)
