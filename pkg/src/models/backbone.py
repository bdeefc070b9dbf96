"""
MARMamba Backbone Module

UNet-shaped residual network built from MS-Mamba blocks:

    stem 3x3 (1 -> D)
    enc1 (D) -> down -> enc2 (2D) -> down -> enc3 (4D) -> down
    bottleneck (8D)
    up -> fuse skip -> dec3 (4D) -> up -> fuse -> dec2 (2D) -> up -> fuse -> dec1 (D)
    refine (D) -> head 3x3 (D -> 1)
    output = input + head

The eight stage_blocks entries map onto (enc1, enc2, enc3, bottleneck, dec3,
dec2, dec1, refine). Encoders run their blocks before downsampling; decoders
upsample and fuse the skip before their blocks.

Usage:
    net = MARMamba(NetConfig(base_channels=4, stage_blocks=(1,) * 8), seed=0)
    y = net(Tensor(x))                     # x: B x 1 x H x W, H and W divisible by 8
"""

from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np

from ..tensor import ops
from ..tensor.tensor import Tensor
from ..utils.errors import ConfigurationError, ShapeError
from .module import Conv2d, ConvTranspose2d, Module
from .msmamba import BlockOptions, MsMambaBlock
from .ssm import SsmConfig

STAGE_NAMES = ("enc1", "enc2", "enc3", "bottleneck", "dec3", "dec2", "dec1", "refine")
DOWNSAMPLE_FACTOR = 8


@dataclass
class NetConfig:
    base_channels: int = 12
    stage_blocks: Tuple[int, ...] = (1, 2, 2, 4, 2, 2, 1, 1)
    input_channels: int = 1
    skip_fusion: str = "concat"
    upsampler: str = "transposed"
    head_zero_init: bool = True
    block: BlockOptions = field(default_factory=BlockOptions)

    def __post_init__(self) -> None:
        self.stage_blocks = tuple(int(n) for n in self.stage_blocks)
        if len(self.stage_blocks) != len(STAGE_NAMES):
            raise ConfigurationError("stage_blocks needs exactly 8 entries",
                                     got=len(self.stage_blocks))
        if any(n < 0 for n in self.stage_blocks):
            raise ConfigurationError("stage block counts must be non-negative",
                                     stage_blocks=self.stage_blocks)
        if self.base_channels < 1 or self.input_channels < 1:
            raise ConfigurationError("channel counts must be positive",
                                     base_channels=self.base_channels)
        if self.skip_fusion not in ("concat", "add"):
            raise ConfigurationError("skip_fusion must be concat or add", skip_fusion=self.skip_fusion)
        if self.upsampler not in ("transposed", "nearest"):
            raise ConfigurationError("upsampler must be transposed or nearest", upsampler=self.upsampler)

    def channel_ladder(self) -> List[int]:
        d = self.base_channels
        return [d, 2 * d, 4 * d, 8 * d, 4 * d, 2 * d, d, d]

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        payload["stage_blocks"] = list(self.stage_blocks)
        payload["block"]["branches"] = list(self.block.branches)
        payload["block"]["pools"] = list(self.block.pools)
        return payload

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "NetConfig":
        payload = dict(payload)
        block = dict(payload.pop("block", {}))
        ssm = SsmConfig(**block.pop("ssm", {}))
        for key in ("branches", "pools"):
            if key in block:
                block[key] = tuple(block[key])
        return cls(block=BlockOptions(ssm=ssm, **block), **payload)


class Stage(Module):
    def __init__(self, channels: int, count: int, rng: np.random.Generator, options: BlockOptions):
        self.blocks = [MsMambaBlock(channels, rng, options) for _ in range(count)]

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return x


class Upsample(Module):
    """Doubles H and W while halving channels."""

    def __init__(self, in_channels: int, out_channels: int, rng: np.random.Generator, mode: str):
        self.mode = mode
        if mode == "transposed":
            self.conv = ConvTranspose2d(in_channels, out_channels, rng)
        else:
            self.conv = Conv2d(in_channels, out_channels, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        if self.mode == "transposed":
            return self.conv(x)
        return self.conv(ops.upsample_nearest(x, 2))


class SkipFusion(Module):
    def __init__(self, channels: int, rng: np.random.Generator, mode: str):
        self.mode = mode
        self.fuse = Conv2d(2 * channels, channels, 1, rng) if mode == "concat" else None

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        if self.fuse is None:
            return ops.add(x, skip)
        return self.fuse(ops.concat([x, skip], axis=1))


class MARMamba(Module):
    """Residual artifact-reduction network; predicts a correction added to its input."""

    def __init__(self, config: Optional[NetConfig] = None, seed: int = 0):
        config = config or NetConfig()
        self.config = config
        self.seed = seed
        rng = np.random.default_rng(seed)
        d = config.base_channels
        widths = config.channel_ladder()
        counts = dict(zip(STAGE_NAMES, config.stage_blocks))
        opts = config.block

        self.stem = Conv2d(config.input_channels, d, 3, rng)
        self.encoders = [Stage(widths[i], counts[STAGE_NAMES[i]], rng, opts) for i in range(3)]
        self.downsamplers = [Conv2d(widths[i], 2 * widths[i], 3, rng, stride=2) for i in range(3)]
        self.bottleneck = Stage(widths[3], counts["bottleneck"], rng, opts)
        self.upsamplers = []
        self.fusions = []
        self.decoders = []
        for i, name in enumerate(("dec3", "dec2", "dec1")):
            c = widths[4 + i]
            self.upsamplers.append(Upsample(2 * c, c, rng, config.upsampler))
            self.fusions.append(SkipFusion(c, rng, config.skip_fusion))
            self.decoders.append(Stage(c, counts[name], rng, opts))
        self.refine = Stage(d, counts["refine"], rng, opts)
        self.head = Conv2d(d, config.input_channels, 3, rng, zero_init=config.head_zero_init)

    def stages(self) -> Dict[str, Stage]:
        return {
            "enc1": self.encoders[0], "enc2": self.encoders[1], "enc3": self.encoders[2],
            "bottleneck": self.bottleneck,
            "dec3": self.decoders[0], "dec2": self.decoders[1], "dec1": self.decoders[2],
            "refine": self.refine,
        }

    def named_blocks(self) -> Iterator[Tuple[str, MsMambaBlock]]:
        """Blocks in forward order, named "<stage>.<index>" (e.g. "enc2.0")."""
        for stage_name, stage in self.stages().items():
            for i, block in enumerate(stage.blocks):
                yield f"{stage_name}.{i}", block

    def block(self, name: str) -> MsMambaBlock:
        blocks = dict(self.named_blocks())
        if name not in blocks:
            raise ConfigurationError("no such MS-Mamba block", block=name, available=list(blocks)[:12])
        return blocks[name]

    def _run_stage(self, name: str, x: Tensor, taps: Optional[Dict[str, Tensor]]) -> Tensor:
        for i, block in enumerate(self.stages()[name].blocks):
            if taps is not None:
                taps[f"{name}.{i}"] = x
            x = block(x)
        return x

    def features(self, x: Tensor, taps: Optional[Dict[str, Tensor]] = None) -> Tensor:
        """Everything before the head; fills taps with each block's input when given."""
        check_divisible(x.shape)
        h = self.stem(x)
        skips = []
        for i, name in enumerate(("enc1", "enc2", "enc3")):
            h = self._run_stage(name, h, taps)
            skips.append(h)
            h = self.downsamplers[i](h)
        h = self._run_stage("bottleneck", h, taps)
        for i, name in enumerate(("dec3", "dec2", "dec1")):
            h = self.fusions[i](self.upsamplers[i](h), skips[2 - i])
            h = self._run_stage(name, h, taps)
        return self._run_stage("refine", h, taps)

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.config.input_channels:
            raise ShapeError("network expects B x 1 x H x W", got=x.shape)
        return ops.add(x, self.head(self.features(x)))


def check_divisible(shape: Tuple[int, ...], multiple: int = DOWNSAMPLE_FACTOR) -> None:
    height, width = shape[-2], shape[-1]
    if height % multiple or width % multiple:
        raise ShapeError(
            f"H and W must be divisible by {multiple}; pad with pad_to_multiple first",
            height=height, width=width)


def count_params(net: Module) -> int:
    return net.num_parameters()


@dataclass(frozen=True)
class CropRecord:
    height: int
    width: int


def pad_to_multiple(x: np.ndarray, multiple: int = DOWNSAMPLE_FACTOR) -> Tuple[np.ndarray, CropRecord]:
    """Reflect-pad the last two axes on the bottom/right up to the next multiple."""
    if multiple < 1:
        raise ConfigurationError("multiple must be at least 1", multiple=multiple)
    x = np.asarray(x)
    height, width = x.shape[-2], x.shape[-1]
    record = CropRecord(height, width)
    extra_h, extra_w = -height % multiple, -width % multiple
    if not extra_h and not extra_w:
        return x.copy(), record
    widths = [(0, 0)] * (x.ndim - 2) + [(0, extra_h), (0, extra_w)]
    return np.pad(x, widths, mode="reflect"), record


def crop_back(y: np.ndarray, record: CropRecord) -> np.ndarray:
    return np.asarray(y)[..., :record.height, :record.width].copy()
