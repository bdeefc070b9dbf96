"""
Synthetic Dataset Module

Builds and loads paired (artifact image, clean image, metal mask) datasets.

Per sample:
    phantom -> GT = fbp(radon(tissue))
    metal disks -> input = fbp(corrupt(radon(tissue * (1 - mask)), radon(mu * mask)))

Layout of a dataset directory:
    manifest.json                 {version, grid, n_angles, calibration, samples: [...]}
    samples/00000_input.mart      MART1 float64 n x n
    samples/00000_gt.mart
    samples/00000_mask.mart
    previews/00000_input.pgm      optional 8-bit previews

Every sample draws from its own generator seeded by (master seed, sample id),
so parallel generation never changes the outputs.
"""

import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, Union

import jsonschema
import numpy as np
from PIL import Image

from ..metrics.quality import size_group
from ..tensor.serialization import read_mart, write_mart
from ..utils.errors import DatasetError, FormatError
from ..utils.files import atomic_write_json, read_json
from ..utils.logger import get_logger, log_execution_time
from .phantom import (METAL_ATTENUATION, MetalSpec, make_phantom, random_metal_spec,
                      random_phantom_spec)
from .tomography import SinogramConfig, corrupt_metal, fbp, radon

logger = get_logger(__name__)

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"
SIZE_GROUPS = ("large", "medium", "small", "tiny")
DEFAULT_CALIBRATION = {"slope": 2000.0, "intercept": -1000.0}

MANIFEST_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "required": ["version", "samples", "calibration"],
    "properties": {
        "version": {"type": "integer", "const": MANIFEST_VERSION},
        "grid": {"type": "integer", "minimum": 8},
        "n_angles": {"type": "integer", "minimum": 2},
        "calibration": {
            "type": "object",
            "required": ["slope", "intercept"],
            "properties": {"slope": {"type": "number"}, "intercept": {"type": "number"}},
        },
        "samples": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "input", "gt", "mask", "metal_px", "group", "seed"],
                "properties": {
                    "id": {"type": "integer", "minimum": 0},
                    "input": {"type": "string"},
                    "gt": {"type": "string"},
                    "mask": {"type": "string"},
                    "metal_px": {"type": "integer", "minimum": 0},
                    "group": {"type": "string", "enum": list(SIZE_GROUPS) + ["none"]},
                    "seed": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
                },
            },
        },
    },
}


@dataclass
class CorruptionConfig:
    gamma: float = 0.3
    cap: float = 1.0
    noise_fraction: float = 0.02
    metal_attenuation: float = METAL_ATTENUATION


@dataclass
class SamplePair:
    sample_id: int
    input: np.ndarray
    gt: np.ndarray
    mask: np.ndarray
    group: str = "none"
    seed: Tuple[int, int] = (0, 0)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not (self.input.shape == self.gt.shape == self.mask.shape):
            raise DatasetError("input, gt and mask must have equal shapes", sample_id=self.sample_id,
                               input=self.input.shape, gt=self.gt.shape, mask=self.mask.shape)

    @property
    def metal_px(self) -> int:
        return int(np.count_nonzero(self.mask))


def simulate_pair(tissue: np.ndarray, metal: MetalSpec, sinogram: SinogramConfig,
                  corruption: CorruptionConfig, rng: np.random.Generator):
    """Returns (input, gt, mask) for one tissue image and metal layout."""
    n = tissue.shape[0]
    mask = metal.mask(n)
    gt = fbp(radon(tissue, sinogram), sinogram)
    sino_tissue = radon(tissue * (~mask), sinogram)
    sino_metal = radon(corruption.metal_attenuation * mask.astype(np.float64), sinogram)
    corrupted = corrupt_metal(sino_tissue, sino_metal, corruption.gamma, corruption.cap,
                              corruption.noise_fraction, rng)
    return fbp(corrupted, sinogram), gt, mask


def generate_sample(sample_id: int, master_seed: int, n: int, group: str,
                    sinogram: Optional[SinogramConfig] = None,
                    corruption: Optional[CorruptionConfig] = None, metal_count: int = 1) -> SamplePair:
    sinogram = sinogram or SinogramConfig()
    corruption = corruption or CorruptionConfig()
    seed = (master_seed, sample_id)
    rng = np.random.default_rng(list(seed))
    tissue = make_phantom(random_phantom_spec(n, rng, seed=seed))
    metal = random_metal_spec(n, group, rng, count=metal_count)
    image, gt, mask = simulate_pair(tissue, metal, sinogram, corruption, rng)
    measured_group = size_group(int(mask.sum()), n).value if mask.any() else "none"
    return SamplePair(sample_id=sample_id, input=image, gt=gt, mask=mask.astype(np.float64),
                      group=measured_group, seed=seed,
                      metadata={"preset": group, "disks": [vars(d) for d in metal.disks]})


def to_uint8(image: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    scaled = (np.clip(image, lo, hi) - lo) / (hi - lo) * 255.0
    return np.rint(scaled).astype(np.uint8)


def write_preview(path: Union[str, Path], image: np.ndarray, lo: float = 0.0, hi: float = 1.0) -> Path:
    """8-bit grayscale preview; the format follows the suffix (.pgm, .png)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(image, lo, hi)).save(path)
    return path


def _sample_files(sample_id: int) -> Dict[str, str]:
    stem = f"samples/{sample_id:05d}"
    return {"input": f"{stem}_input.mart", "gt": f"{stem}_gt.mart", "mask": f"{stem}_mask.mart"}


@log_execution_time
def synth_dataset(count: int, out_dir: Union[str, Path], seed: int = 0, n: int = 128,
                  size_mix: Sequence[str] = SIZE_GROUPS, n_angles: int = 180,
                  corruption: Optional[CorruptionConfig] = None, max_workers: int = 1,
                  export_pgm: bool = False, calibration: Optional[Dict[str, float]] = None,
                  metal_count: int = 1, on_sample: Optional[Callable[[int], None]] = None) -> Dict[str, Any]:
    """
    Generate `count` samples into out_dir and write the manifest.

    Size groups are assigned round-robin from size_mix. On any IO failure the
    files written by this call and the manifest are removed before re-raising.
    """
    if count < 1:
        raise DatasetError("count must be at least 1", count=count)
    unknown = [g for g in size_mix if g not in SIZE_GROUPS]
    if unknown or not size_mix:
        raise DatasetError("size_mix must name groups from large, medium, small, tiny", size_mix=list(size_mix))
    out_dir = Path(out_dir)
    sinogram = SinogramConfig(n_angles=n_angles)
    corruption = corruption or CorruptionConfig()
    written: List[Path] = []
    written_lock = threading.Lock()

    def build(sample_id: int) -> Dict[str, Any]:
        group = size_mix[sample_id % len(size_mix)]
        sample = generate_sample(sample_id, seed, n, group, sinogram, corruption, metal_count)
        files = _sample_files(sample_id)
        paths = [write_mart(out_dir / files[key], getattr(sample, key), "float64")
                 for key in ("input", "gt", "mask")]
        if export_pgm:
            paths.append(write_preview(out_dir / "previews" / f"{sample_id:05d}_input.pgm", sample.input))
            paths.append(write_preview(out_dir / "previews" / f"{sample_id:05d}_gt.pgm", sample.gt))
        with written_lock:
            written.extend(paths)
        logger.debug("Sample written", sample_id=sample_id, group=sample.group, metal_px=sample.metal_px)
        if on_sample is not None:
            on_sample(sample_id)
        return {"id": sample_id, **files, "metal_px": sample.metal_px, "group": sample.group,
                "seed": list(sample.seed)}

    manifest_path = out_dir / MANIFEST_NAME
    try:
        with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
            entries = list(pool.map(build, range(count)))
        manifest = {
            "version": MANIFEST_VERSION,
            "grid": n,
            "n_angles": n_angles,
            "calibration": dict(calibration or DEFAULT_CALIBRATION),
            "corruption": vars(corruption),
            "samples": entries,
        }
        atomic_write_json(manifest_path, manifest)
    except OSError as e:
        for path in written + [manifest_path]:
            try:
                path.unlink()
            except OSError:
                pass
        logger.error("Dataset generation failed; partial output removed", exception=e)
        raise DatasetError(f"could not write dataset: {e}", out_dir=str(out_dir)) from e

    groups = {g: sum(1 for s in entries if s["group"] == g) for g in SIZE_GROUPS}
    logger.info("Dataset written", count=count, out_dir=str(out_dir), **groups)
    return manifest


def load_manifest(root: Union[str, Path]) -> Dict[str, Any]:
    path = Path(root) / MANIFEST_NAME
    if not path.is_file():
        raise DatasetError("dataset manifest not found", path=str(path))
    try:
        manifest = read_json(path)
    except ValueError as e:
        raise DatasetError(f"manifest is not valid JSON: {e}", path=str(path)) from e
    try:
        jsonschema.validate(manifest, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as e:
        raise DatasetError(f"manifest does not match its schema: {e.message}", path=str(path)) from e
    return manifest


def load_dataset(root: Union[str, Path], limit: Optional[int] = None) -> List[SamplePair]:
    """All samples of a dataset directory, in manifest order."""
    root = Path(root)
    manifest = load_manifest(root)
    pairs = []
    for entry in manifest["samples"][:limit]:
        try:
            arrays = {key: read_mart(root / entry[key]) for key in ("input", "gt", "mask")}
        except (OSError, FormatError) as e:
            raise DatasetError(f"cannot read sample {entry['id']}: {e}", sample_id=entry["id"]) from e
        pairs.append(SamplePair(sample_id=entry["id"], group=entry["group"], seed=tuple(entry["seed"]),
                                metadata={"calibration": manifest["calibration"]}, **arrays))
    return pairs
