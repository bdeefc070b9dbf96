"""
Phantom Generation Module

Ellipse phantoms and metal inserts on an n x n grid.

Geometry:
- ellipse centers and axes live in normalized coordinates where the image
  spans [-1, 1] on both axes (pixel j has coordinate (j - (n-1)/2) / (n/2))
- metal disks live in pixel coordinates (row, col, radius in pixels)
- metal radius presets are defined on a 416 x 416 reference grid and scaled
  linearly with n so mask pixel counts land in the matching size group
"""

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from ..metrics.quality import REFERENCE_GRID
from ..utils.errors import ConfigurationError

METAL_ATTENUATION = 4.0
# Disk radius in pixels on the reference grid, per size group.
METAL_PRESET_RADII: Dict[str, float] = {"large": 20.0, "medium": 10.5, "small": 6.2, "tiny": 3.8}


@dataclass(frozen=True)
class Ellipse:
    center: Tuple[float, float]
    axes: Tuple[float, float]
    angle: float = 0.0
    intensity: float = 0.5

    def indicator(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        dx, dy = x - self.center[0], y - self.center[1]
        cos_a, sin_a = np.cos(self.angle), np.sin(self.angle)
        u = dx * cos_a + dy * sin_a
        v = -dx * sin_a + dy * cos_a
        return (u / self.axes[0]) ** 2 + (v / self.axes[1]) ** 2 <= 1.0


@dataclass
class PhantomSpec:
    n: int = 128
    ellipses: List[Ellipse] = field(default_factory=list)
    seed: Tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.n < 2:
            raise ConfigurationError("phantom grid must be at least 2x2", n=self.n)
        for e in self.ellipses:
            if not 0.0 <= e.intensity <= 0.8:
                raise ConfigurationError("ellipse intensity must lie in [0, 0.8]", intensity=e.intensity)
            if np.hypot(*e.center) + max(e.axes) > 1.0:
                raise ConfigurationError("ellipse must lie inside the unit disk", center=e.center, axes=e.axes)


@dataclass(frozen=True)
class MetalDisk:
    row: float
    col: float
    radius: float


@dataclass
class MetalSpec:
    disks: List[MetalDisk] = field(default_factory=list)
    attenuation: float = METAL_ATTENUATION

    def mask(self, n: int) -> np.ndarray:
        rows, cols = np.mgrid[0:n, 0:n]
        mask = np.zeros((n, n), dtype=bool)
        for disk in self.disks:
            mask |= (rows - disk.row) ** 2 + (cols - disk.col) ** 2 <= disk.radius ** 2
        return mask


def grid_coordinates(n: int) -> Tuple[np.ndarray, np.ndarray]:
    """Normalized (x, y) per pixel; x grows with column, y with row."""
    axis = (np.arange(n) - (n - 1) / 2.0) / (n / 2.0)
    y, x = np.meshgrid(axis, axis, indexing="ij")
    return x, y


def make_phantom(spec: PhantomSpec) -> np.ndarray:
    x, y = grid_coordinates(spec.n)
    image = np.zeros((spec.n, spec.n))
    for ellipse in spec.ellipses:
        image += ellipse.indicator(x, y) * ellipse.intensity
    return np.clip(image, 0.0, 1.0)


def random_phantom_spec(n: int, rng: np.random.Generator, max_inner: int = 6,
                        seed: Tuple[int, ...] = ()) -> PhantomSpec:
    """A soft-tissue body ellipse with a few brighter inner structures."""
    body_a = rng.uniform(0.78, 0.88)
    body_b = rng.uniform(0.6, 0.78)
    ellipses = [Ellipse((0.0, 0.0), (body_a, body_b), rng.uniform(-0.2, 0.2), 0.5)]
    for _ in range(int(rng.integers(2, max_inner + 1))):
        axes = (rng.uniform(0.05, 0.22), rng.uniform(0.05, 0.22))
        reach = max(0.0, min(body_a, body_b) - max(axes) - 0.05)
        radius, theta = rng.uniform(0.0, reach), rng.uniform(0.0, 2 * np.pi)
        center = (radius * np.cos(theta), radius * np.sin(theta))
        ellipses.append(Ellipse(center, axes, rng.uniform(0.0, np.pi), rng.uniform(0.02, 0.25)))
    return PhantomSpec(n=n, ellipses=ellipses, seed=tuple(seed))


def preset_radius(group: str, n: int) -> float:
    if group not in METAL_PRESET_RADII:
        raise ConfigurationError("unknown metal size group", group=group,
                                 allowed=sorted(METAL_PRESET_RADII))
    return METAL_PRESET_RADII[group] * n / REFERENCE_GRID


def random_metal_spec(n: int, group: str, rng: np.random.Generator, count: int = 1,
                      body_fraction: float = 0.45) -> MetalSpec:
    """count disks of the preset radius, pixel-centred, well inside the body."""
    radius = preset_radius(group, n)
    center = (n - 1) / 2.0
    reach = body_fraction * n / 2.0
    disks = []
    for _ in range(count):
        r, theta = rng.uniform(0.0, reach), rng.uniform(0.0, 2 * np.pi)
        row = float(np.round(center + r * np.sin(theta)))
        col = float(np.round(center + r * np.cos(theta)))
        disks.append(MetalDisk(row, col, radius))
    return MetalSpec(disks=disks)


def metal_pair_spec(n: int, group: str, separation: float = 0.5) -> MetalSpec:
    """Two disks on the horizontal midline, separation given as a fraction of n."""
    radius = preset_radius(group, n)
    middle = float(np.floor((n - 1) / 2.0))
    offset = float(np.round(separation * n / 2.0))
    return MetalSpec(disks=[MetalDisk(middle, middle - offset, radius),
                            MetalDisk(middle, middle + offset, radius)])


def disk_centers(spec: MetalSpec) -> Sequence[Tuple[float, float]]:
    return [(d.row, d.col) for d in spec.disks]
