"""
Image Quality Metrics Module

PSNR, SSIM and RMSE with an optional inclusion mask, plus the region and
metal-size grouping used by the evaluation protocol.

Conventions:
- images are 2-D float arrays in normalized [0, 1] units (data_range 1)
- masks passed to the metrics select pixels INCLUDED in the statistic
- metal masks (1 = metal) are turned into inclusion masks by region_mask()
- metal pixel counts are rescaled to a 416 x 416 reference grid before
  binning, so the same physical insert lands in the same group at any size
"""

from enum import Enum
from typing import Optional

import numpy as np
from scipy import ndimage

from ..utils.errors import ConfigurationError, EvaluationError

PSNR_CAP_DB = 99.0
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5
SSIM_WINDOW = 2 * int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5) + 1

REFERENCE_GRID = 416
# Upper bounds (inclusive) of metal pixel counts on the reference grid.
SIZE_GROUP_BOUNDS = (("tiny", 80), ("small", 180), ("medium", 650))


class RegionMode(str, Enum):
    NON_METAL = "non_metal"
    METAL_INCLUDED = "metal_included"


class SizeGroup(str, Enum):
    LARGE = "large"
    MEDIUM = "medium"
    SMALL = "small"
    TINY = "tiny"


def _as_pair(y: np.ndarray, i_hat: np.ndarray):
    y = np.asarray(y, dtype=np.float64)
    i_hat = np.asarray(i_hat, dtype=np.float64)
    if y.shape != i_hat.shape:
        raise EvaluationError("metric operands must have equal shapes", y=y.shape, i_hat=i_hat.shape)
    return y, i_hat


def _included(mask: Optional[np.ndarray], shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask)
    if mask.shape != shape:
        raise EvaluationError("mask shape does not match the images", mask=mask.shape, image=shape)
    include = mask.astype(bool)
    if not include.any():
        raise EvaluationError("no pixels are included in the metric")
    return include


def mse(y: np.ndarray, i_hat: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    y, i_hat = _as_pair(y, i_hat)
    include = _included(mask, y.shape)
    diff = (y - i_hat)[include]
    return float(np.mean(diff * diff))


def rmse(y: np.ndarray, i_hat: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
    return float(np.sqrt(mse(y, i_hat, mask)))


def psnr(y: np.ndarray, i_hat: np.ndarray, mask: Optional[np.ndarray] = None,
         data_range: float = 1.0) -> float:
    """PSNR in dB; zero error is reported as the 99 dB cap."""
    if data_range <= 0:
        raise EvaluationError("data_range must be positive", data_range=data_range)
    error = mse(y, i_hat, mask)
    if error == 0.0:
        return PSNR_CAP_DB
    return float(min(PSNR_CAP_DB, 10.0 * np.log10(data_range ** 2 / error)))


def ssim_map(y: np.ndarray, i_hat: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    """Gaussian-window SSIM map (11 taps, sigma 1.5, reflected borders)."""
    y, i_hat = _as_pair(y, i_hat)
    if y.ndim != 2:
        raise EvaluationError("SSIM expects 2-D images", shape=y.shape)
    if min(y.shape) < SSIM_WINDOW:
        raise EvaluationError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}", shape=y.shape)

    def blur(a: np.ndarray) -> np.ndarray:
        return ndimage.gaussian_filter(a, sigma=SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="reflect")

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_y, mu_x = blur(y), blur(i_hat)
    var_y = blur(y * y) - mu_y * mu_y
    var_x = blur(i_hat * i_hat) - mu_x * mu_x
    cov = blur(y * i_hat) - mu_y * mu_x
    numerator = (2.0 * mu_y * mu_x + c1) * (2.0 * cov + c2)
    denominator = (mu_y * mu_y + mu_x * mu_x + c1) * (var_y + var_x + c2)
    return numerator / denominator


def ssim(y: np.ndarray, i_hat: np.ndarray, mask: Optional[np.ndarray] = None,
         data_range: float = 1.0) -> float:
    values = ssim_map(y, i_hat, data_range)
    include = _included(mask, values.shape)
    return float(np.mean(values[include]))


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    mask = np.asarray(mask).astype(bool)
    if radius <= 0:
        return mask
    structure = ndimage.generate_binary_structure(2, 1)
    return ndimage.binary_dilation(mask, structure=structure, iterations=int(radius))


def region_mask(metal_mask: np.ndarray, mode, dilation: int = 0) -> np.ndarray:
    """Inclusion mask for a region mode: non_metal excludes the (dilated) metal."""
    mode = RegionMode(mode)
    metal = np.asarray(metal_mask)
    if not np.isin(metal, (0, 1)).all():
        raise EvaluationError("metal mask values must be 0 or 1")
    if mode is RegionMode.METAL_INCLUDED:
        return np.ones(metal.shape, dtype=bool)
    return ~dilate(metal, dilation)


def reference_pixel_count(count: int, grid: int) -> float:
    """Metal pixel count rescaled to the reference grid."""
    if grid < 1:
        raise ConfigurationError("grid size must be positive", grid=grid)
    return count * (REFERENCE_GRID / grid) ** 2


def size_group(count: int, grid: int = REFERENCE_GRID) -> SizeGroup:
    scaled = reference_pixel_count(count, grid)
    for name, upper in SIZE_GROUP_BOUNDS:
        if scaled <= upper:
            return SizeGroup(name)
    return SizeGroup.LARGE
