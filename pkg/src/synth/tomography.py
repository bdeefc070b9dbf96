"""
Parallel-Beam Tomography Module

Forward projection, metal corruption and filtered backprojection on square
grids. The image spans unit physical width, so line integrals are pixel
sums times pixel_size = 1/n.

Geometry (pixel units, c = (n - 1) / 2):
    detector coordinate   t = x cos(theta) + y sin(theta)
    x = col - c, y = row - c, theta = k * pi / n_angles
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from ..utils.errors import ConfigurationError, ShapeError


@dataclass
class SinogramConfig:
    n_angles: int = 180
    hann: bool = False
    clip: bool = True
    clip_range: Tuple[float, float] = (0.0, 1.5)

    def __post_init__(self) -> None:
        if self.n_angles < 2:
            raise ConfigurationError("need at least two projection angles", n_angles=self.n_angles)

    def angles(self) -> np.ndarray:
        return np.arange(self.n_angles) * np.pi / self.n_angles


def _check_square(img: np.ndarray) -> int:
    if img.ndim != 2 or img.shape[0] != img.shape[1]:
        raise ShapeError("tomography expects a square 2-D image", got=img.shape)
    return img.shape[0]


def radon(img: np.ndarray, cfg: Optional[SinogramConfig] = None) -> np.ndarray:
    """Line integrals along rays, bilinear sampling; returns n_angles x n."""
    cfg = cfg or SinogramConfig()
    img = np.asarray(img, dtype=np.float64)
    n = _check_square(img)
    c = (n - 1) / 2.0
    theta = cfg.angles()[:, None, None]
    t = (np.arange(n) - c)[None, :, None]
    s = (np.arange(n) - c)[None, None, :]
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    cols = t * cos_t - s * sin_t + c
    rows = t * sin_t + s * cos_t + c
    samples = ndimage.map_coordinates(img, [rows.ravel(), cols.ravel()], order=1,
                                      mode="constant", cval=0.0)
    return samples.reshape(cfg.n_angles, n, n).sum(axis=2) / n


def corrupt_metal(sino_tissue: np.ndarray, sino_metal: np.ndarray, gamma: float = 0.3,
                  cap: float = 1.0, noise_fraction: float = 0.02,
                  rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """
    Beam-hardening surplus gamma * s_m^2 / (1 + s_m) on top of the ideal sum;
    rays through metal saturate at cap and get Gaussian noise of std
    noise_fraction * cap.
    """
    if sino_tissue.shape != sino_metal.shape:
        raise ShapeError("sinograms must have equal shapes",
                         tissue=sino_tissue.shape, metal=sino_metal.shape)
    metal_rays = sino_metal > 0
    if not metal_rays.any():
        return sino_tissue.copy()
    out = sino_tissue + sino_metal + gamma * sino_metal ** 2 / (1.0 + sino_metal)
    out = np.where(metal_rays, np.minimum(out, cap), out)
    sigma = noise_fraction * cap if np.isfinite(cap) else 0.0
    if sigma > 0:
        rng = rng or np.random.default_rng(0)
        out = out + np.where(metal_rays, rng.normal(0.0, sigma, size=out.shape), 0.0)
    return out


def ramp_filter(size: int, hann: bool = False) -> np.ndarray:
    """Frequency response of the band-limited Ram-Lak filter (spatial-domain construction)."""
    k = np.concatenate([np.arange(1, size / 2 + 1, 2, dtype=int),
                        np.arange(size / 2 - 1, 0, -2, dtype=int)])
    kernel = np.zeros(size)
    kernel[0] = 0.25
    kernel[1::2] = -1.0 / (np.pi * k) ** 2
    response = 2.0 * np.real(np.fft.fft(kernel))
    if hann:
        response *= np.fft.fftshift(np.hanning(size))
    return response


def fbp(sino: np.ndarray, cfg: Optional[SinogramConfig] = None) -> np.ndarray:
    """Filtered backprojection onto an n x n grid, n = detector count."""
    cfg = cfg or SinogramConfig(n_angles=sino.shape[0])
    sino = np.asarray(sino, dtype=np.float64)
    if sino.ndim != 2 or sino.shape[0] != cfg.n_angles:
        raise ShapeError("sinogram rows must match n_angles", got=sino.shape, n_angles=cfg.n_angles)
    n_angles, n = sino.shape
    size = max(64, int(2 ** np.ceil(np.log2(2 * n))))
    # back to pixel-unit line integrals before filtering
    padded = np.zeros((n_angles, size))
    padded[:, :n] = sino * n
    filtered = np.real(np.fft.ifft(np.fft.fft(padded, axis=1) * ramp_filter(size, cfg.hann),
                                   axis=1))[:, :n]

    c = (n - 1) / 2.0
    rows, cols = np.mgrid[0:n, 0:n]
    x, y = cols - c, rows - c
    detector = np.arange(n)
    image = np.zeros((n, n))
    for k, theta in enumerate(cfg.angles()):
        t = x * np.cos(theta) + y * np.sin(theta) + c
        image += np.interp(t.ravel(), detector, filtered[k], left=0.0, right=0.0).reshape(n, n)
    image *= np.pi / (2.0 * n_angles)
    if cfg.clip:
        image = np.clip(image, *cfg.clip_range)
    return image


def disk_mask(n: int, radius_fraction: float) -> np.ndarray:
    """Centered disk covering radius_fraction of the half-width."""
    c = (n - 1) / 2.0
    rows, cols = np.mgrid[0:n, 0:n]
    return (rows - c) ** 2 + (cols - c) ** 2 <= (radius_fraction * n / 2.0) ** 2


def _band(n: int, p: np.ndarray, direction: np.ndarray, width: float) -> np.ndarray:
    rows, cols = np.mgrid[0:n, 0:n]
    offset = np.stack([rows - p[0], cols - p[1]], axis=-1)
    normal = np.array([-direction[1], direction[0]])
    return np.abs(offset @ normal) <= width


def directional_streak_ratio(diff: np.ndarray, centers: Sequence[Tuple[float, float]],
                             width: float = 1.5, exclusion: float = 8.0,
                             support: Optional[np.ndarray] = None) -> float:
    """
    Mean squared difference along the line through two metal centers divided by
    the same along the perpendicular line through their midpoint. Pixels within
    `exclusion` of either center and outside `support` are ignored.
    """
    diff = np.asarray(diff, dtype=np.float64)
    n = _check_square(diff)
    if len(centers) != 2:
        raise ConfigurationError("streak ratio needs exactly two metal centers", count=len(centers))
    p1, p2 = (np.asarray(p, dtype=np.float64) for p in centers)
    direction = (p2 - p1) / np.linalg.norm(p2 - p1)
    perpendicular = np.array([-direction[1], direction[0]])
    middle = (p1 + p2) / 2.0

    rows, cols = np.mgrid[0:n, 0:n]
    keep = np.ones((n, n), dtype=bool) if support is None else np.asarray(support, dtype=bool)
    for p in (p1, p2):
        keep &= (rows - p[0]) ** 2 + (cols - p[1]) ** 2 > exclusion ** 2
    along = _band(n, middle, direction, width) & keep
    across = _band(n, middle, perpendicular, width) & keep
    energy = diff ** 2
    return float(energy[along].mean() / max(energy[across].mean(), 1e-30))
