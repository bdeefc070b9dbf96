"""
Inference Module

Runs a trained network on single images of any size and implements the
threshold excise/reinsert procedure used for scans with real metal.

Features:
- Reflect padding to a multiple of 8 and crop back to the original size
- Inference mode (no graph) with per-image wall-clock timing
- Image input from MART1, PNG or PGM files

Usage:
    restored = predict_image(net, image).image
    restored, mask = excise_reinsert(image, lambda x: predict_image(net, x).image, tau=1.2)
"""

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from ..models.backbone import DOWNSAMPLE_FACTOR, MARMamba, crop_back, pad_to_multiple
from ..synth.tomography import SinogramConfig
from ..tensor.serialization import read_mart
from ..tensor.tensor import Tensor, no_grad
from ..utils.errors import FormatError, InferenceError
from ..utils.logger import get_logger

logger = get_logger(__name__)

DEFAULT_TAU = 1.2
# 8-bit inputs span the reconstruction clip range
EIGHT_BIT_RANGE = SinogramConfig().clip_range
IMAGE_SUFFIXES = (".mart", ".png", ".pgm")
_CROSS = ndimage.generate_binary_structure(2, 1)

Predictor = Callable[[np.ndarray], np.ndarray]


@dataclass
class Prediction:
    image: np.ndarray
    seconds: float


def predict_image(net: MARMamba, image: np.ndarray) -> Prediction:
    """Restore one 2-D image; sizes not divisible by 8 are padded and cropped back."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise InferenceError("inference expects a single 2-D image", shape=image.shape)
    if not np.all(np.isfinite(image)):
        raise InferenceError("input image contains non-finite values")
    padded, record = pad_to_multiple(image[None, None], DOWNSAMPLE_FACTOR)
    dtype = net.stem.weight.dtype
    start = time.perf_counter()
    with no_grad():
        out = net(Tensor(padded.astype(dtype))).numpy()
    seconds = time.perf_counter() - start
    logger.debug("Image restored", height=image.shape[0], width=image.shape[1], seconds=f"{seconds:.4f}")
    return Prediction(image=crop_back(out, record)[0, 0].astype(np.float64), seconds=seconds)


def threshold_mask(image: np.ndarray, tau: float = DEFAULT_TAU, ceiling: float = EIGHT_BIT_RANGE[1],
                   refine: bool = True) -> np.ndarray:
    """
    Pixels at or above tau. With refine, components that reach the clip
    ceiling lose their rim pixels below the ceiling: those are partial-volume
    blur around saturated metal, not metal.
    """
    image = np.asarray(image, dtype=np.float64)
    mask = image >= tau
    if not refine or not mask.any():
        return mask
    labels, count = ndimage.label(mask, structure=_CROSS)
    peaks = np.asarray(ndimage.maximum(image, labels, index=np.arange(1, count + 1)))
    saturated = np.concatenate([[False], peaks >= ceiling])
    rim = mask & ~ndimage.binary_erosion(mask, structure=_CROSS, border_value=1)
    # saturated pixels are never peeled, so no component empties
    return mask & ~(rim & saturated[labels] & (image < ceiling))


def excise_reinsert(image: np.ndarray, predict: Predictor,
                    tau: float = DEFAULT_TAU) -> Tuple[np.ndarray, np.ndarray]:
    """
    Segment metal by refined threshold, fill it with the mean of the remaining pixels,
    restore, then copy the original metal pixels back.

    Returns:
        (restored image, metal mask)
    """
    image = np.asarray(image, dtype=np.float64)
    if not np.isfinite(tau):
        raise InferenceError("threshold must be finite", tau=tau)
    mask = threshold_mask(image, tau)
    if mask.all():
        raise InferenceError("metal mask covers the whole image", tau=tau)
    excised = image.copy()
    if mask.any():
        excised[mask] = image[~mask].mean()
    restored = np.asarray(predict(excised), dtype=np.float64).copy()
    if restored.shape != image.shape:
        raise InferenceError("predictor changed the image shape", got=restored.shape, expected=image.shape)
    restored[mask] = image[mask]
    logger.debug("Metal excised and reinserted", tau=tau, metal_px=int(mask.sum()))
    return restored, mask


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 1.0


def read_image(path: Union[str, Path]) -> np.ndarray:
    """MART1 is read verbatim; 8-bit PNG/PGM gray levels are mapped onto the reconstruction range."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in IMAGE_SUFFIXES:
        raise InferenceError("unsupported image format", path=str(path), supported=",".join(IMAGE_SUFFIXES))
    if not path.is_file():
        raise InferenceError("input image not found", path=str(path))
    if suffix == ".mart":
        image = read_mart(path).astype(np.float64)
    else:
        try:
            with Image.open(path) as handle:
                gray = np.asarray(handle.convert("L"), dtype=np.float64)
        except (UnidentifiedImageError, OSError) as e:
            raise FormatError(f"cannot decode image: {e}", path=str(path)) from e
        lo, hi = EIGHT_BIT_RANGE
        image = lo + gray / 255.0 * (hi - lo)
    if image.ndim == 4 and image.shape[:2] == (1, 1):
        image = image[0, 0]
    if image.ndim != 2:
        raise InferenceError("input image must be 2-D", path=str(path), shape=image.shape)
    return image
