"""
Rendering Module

Turns normalized reconstructions into displayable 8-bit images:
- HU-window rendering through the dataset's affine calibration
- amplified absolute-error maps and red heat overlays
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
from PIL import Image

from ..utils.errors import ConfigurationError, RenderError, ShapeError

DEFAULT_GAIN = 2.0


@dataclass(frozen=True)
class RenderWindow:
    hu_lo: float = -175.0
    hu_hi: float = 275.0

    def __post_init__(self) -> None:
        if not self.hu_lo < self.hu_hi:
            raise ConfigurationError("render window needs hu_lo < hu_hi", hu_lo=self.hu_lo, hu_hi=self.hu_hi)


@dataclass(frozen=True)
class Calibration:
    """HU = slope * normalized + intercept."""

    slope: float
    intercept: float

    @classmethod
    def from_metadata(cls, metadata: Optional[Dict[str, Any]]) -> "Calibration":
        if not metadata or "slope" not in metadata or "intercept" not in metadata:
            raise RenderError("dataset metadata declares no HU calibration")
        return cls(float(metadata["slope"]), float(metadata["intercept"]))


def render_hu(image: np.ndarray, window: RenderWindow = RenderWindow(),
              calibration: Optional[Calibration] = None) -> np.ndarray:
    """Window-clip in HU and map linearly to 0..255, rounding half to even."""
    if calibration is None:
        raise RenderError("HU rendering needs a calibration")
    hu = calibration.slope * np.asarray(image, dtype=np.float64) + calibration.intercept
    scaled = (np.clip(hu, window.hu_lo, window.hu_hi) - window.hu_lo) / (window.hu_hi - window.hu_lo)
    return np.rint(scaled * 255.0).astype(np.uint8)


def error_map(restored: np.ndarray, gt: np.ndarray, gain: float = DEFAULT_GAIN,
              metal_mask: Optional[np.ndarray] = None) -> np.ndarray:
    """|restored - gt| * gain clipped to [0, 1]; zero inside the preserved metal region."""
    restored = np.asarray(restored, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if restored.shape != gt.shape:
        raise ShapeError("error map operands differ in shape", restored=restored.shape, gt=gt.shape)
    amplified = np.clip(np.abs(restored - gt) * gain, 0.0, 1.0)
    if metal_mask is not None:
        amplified = np.where(np.asarray(metal_mask, dtype=bool), 0.0, amplified)
    return amplified


def heat_overlay(errors: np.ndarray, base: np.ndarray) -> np.ndarray:
    """RGB image: grayscale base with the error drawn into the red channel."""
    base = np.asarray(base, dtype=np.uint8)
    if base.shape != errors.shape:
        raise ShapeError("overlay base and error map differ in shape", base=base.shape, errors=errors.shape)
    heat = np.rint(np.asarray(errors) * 255.0).astype(np.uint8)
    rgb = np.stack([base, base, base], axis=-1)
    rgb[..., 0] = np.maximum(base, heat)
    return rgb


def save_image(path: Union[str, Path], pixels: np.ndarray) -> Path:
    """Write an 8-bit gray (H x W) or RGB (H x W x 3) image; format follows the suffix."""
    path = Path(path)
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise RenderError("only 8-bit images can be saved", dtype=str(pixels.dtype))
    if path.suffix.lower() == ".pgm" and pixels.ndim != 2:
        raise RenderError("PGM output must be single-channel", path=str(path))
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels).save(path)
    return path


def normalized_gray(values: np.ndarray) -> np.ndarray:
    """Scale a non-negative map by its maximum into 0..255 (all zeros stay zero)."""
    values = np.asarray(values, dtype=np.float64)
    peak = float(values.max()) if values.size else 0.0
    scaled = values / peak if peak > 0 else np.zeros_like(values)
    return np.rint(np.clip(scaled, 0.0, 1.0) * 255.0).astype(np.uint8)
