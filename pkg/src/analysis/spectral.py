"""
Directional Spectral Analysis Module

Measures how the flipped FMB branches redistribute feature energy across
orientations. For a square map the 2-D DFT power inside a mid-frequency
annulus is binned by spectral angle in [0, pi); comparing a branch's
spectrum with the normal branch's gives a per-orientation log-ratio, with
positive values where the branch enhances that orientation.

Features:
- directional_energy: P(theta) of one map, DC excluded by the annulus
- energy_logratio: floored natural log of P_branch / P_normal
- branch_spectra: spectra of m0/m1/m2 at a chosen MS-Mamba block
- feature_energy_maps: mean squared activation per branch

Usage:
    spectra = branch_spectra(net, image, block="enc2.0")
    write_spectra_csv(run_dir / "directional_energy.csv", spectra)
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np
import pandas as pd

from ..models.backbone import MARMamba
from ..tensor import ops
from ..tensor.tensor import Tensor, no_grad
from ..utils.errors import AnalysisError
from ..utils.logger import get_logger

logger = get_logger(__name__)

DEFAULT_BINS = 36
DEFAULT_ANNULUS = (0.15, 0.45)
DEFAULT_BLOCK = "enc2.0"
LOGRATIO_FLOOR = 1e-12
SPECTRA_COLUMNS = ["bin_deg_lo", "bin_deg_hi", "p_norm", "p_h", "p_v", "logratio_h", "logratio_v"]


@dataclass
class DirectionalSpectrum:
    """Energy per orientation bin; bins partition [0, pi)."""

    power: np.ndarray
    annulus: Tuple[float, float] = DEFAULT_ANNULUS

    @property
    def bins(self) -> int:
        return int(self.power.size)

    def edges_deg(self) -> np.ndarray:
        return np.linspace(0.0, 180.0, self.bins + 1)

    def peak_bin(self) -> int:
        return int(np.argmax(self.power))


def _check_annulus(annulus: Tuple[float, float]) -> None:
    lo, hi = annulus
    if not 0 <= lo < hi:
        raise AnalysisError("annulus radii must satisfy 0 <= lo < hi", annulus=annulus)


def orientation_bins(n: int, bins: int = DEFAULT_BINS,
                     annulus: Tuple[float, float] = DEFAULT_ANNULUS) -> Tuple[np.ndarray, np.ndarray]:
    """Bin index of every DFT coefficient of an n x n map and the annulus selection."""
    _check_annulus(annulus)
    if bins < 1:
        raise AnalysisError("at least one orientation bin is required", bins=bins)
    freq = np.fft.fftfreq(n)
    fy, fx = np.meshgrid(freq, freq, indexing="ij")
    # radius as a fraction of Nyquist
    radius = np.hypot(fx, fy) / 0.5
    selected = (radius >= annulus[0]) & (radius <= annulus[1])
    theta = np.mod(np.arctan2(fy, fx), np.pi)
    index = np.floor(theta * bins / np.pi + 1e-9).astype(np.int64)
    return np.clip(index, 0, bins - 1), selected


def directional_energy(feature_map: np.ndarray, bins: int = DEFAULT_BINS,
                       annulus: Tuple[float, float] = DEFAULT_ANNULUS) -> DirectionalSpectrum:
    """|DFT|^2 of a square map accumulated per orientation bin, normalized by bin size."""
    feature_map = np.asarray(feature_map, dtype=np.float64)
    if feature_map.ndim != 2 or feature_map.shape[0] != feature_map.shape[1]:
        raise AnalysisError("directional energy needs a square 2-D map", shape=feature_map.shape)
    index, selected = orientation_bins(feature_map.shape[0], bins, annulus)
    if not selected.any():
        raise AnalysisError("frequency annulus is empty for this map size",
                            size=feature_map.shape[0], annulus=annulus)
    power = np.abs(ops.dft2(feature_map)) ** 2
    totals = np.bincount(index[selected], weights=power[selected], minlength=bins)
    counts = np.bincount(index[selected], minlength=bins)
    energy = np.divide(totals, counts, out=np.zeros(bins), where=counts > 0)
    return DirectionalSpectrum(power=energy, annulus=tuple(annulus))


def channel_energy(features: np.ndarray, bins: int = DEFAULT_BINS,
                   annulus: Tuple[float, float] = DEFAULT_ANNULUS) -> DirectionalSpectrum:
    """Average directional energy over the channels of a C x H x W feature stack."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 3:
        raise AnalysisError("channel energy needs C x H x W features", shape=features.shape)
    spectra = [directional_energy(channel, bins, annulus).power for channel in features]
    return DirectionalSpectrum(power=np.mean(spectra, axis=0), annulus=tuple(annulus))


def energy_logratio(p_branch: np.ndarray, p_norm: np.ndarray, floor: float = LOGRATIO_FLOOR) -> np.ndarray:
    p_branch = np.asarray(p_branch, dtype=np.float64)
    p_norm = np.asarray(p_norm, dtype=np.float64)
    if p_branch.shape != p_norm.shape:
        raise AnalysisError("spectra use different binnings", branch=p_branch.shape, norm=p_norm.shape)
    return np.log(np.maximum(p_branch, floor) / np.maximum(p_norm, floor))


def _branch_activations(net: MARMamba, image: np.ndarray, block: str) -> Dict[str, Optional[np.ndarray]]:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] != image.shape[1]:
        raise AnalysisError("branch analysis needs a square 2-D image", shape=image.shape)
    target = net.block(block)
    taps: Dict[str, Tensor] = {}
    dtype = net.stem.weight.dtype
    with no_grad():
        net.features(Tensor(image[None, None].astype(dtype)), taps)
        branches = target.fmb.forward_branches(target.fmb_input(taps[block]))
    return {name: None if m is None else m.numpy()[0].astype(np.float64) for name, m in branches.items()}


def feature_energy_maps(net: MARMamba, image: np.ndarray,
                        block: str = DEFAULT_BLOCK) -> Dict[str, np.ndarray]:
    """Mean of squared activations over channels for each enabled branch."""
    activations = _branch_activations(net, image, block)
    return {name: np.mean(m ** 2, axis=0) for name, m in activations.items() if m is not None}


@dataclass
class BranchSpectra:
    block: str
    normal: DirectionalSpectrum
    horizontal: Optional[DirectionalSpectrum] = None
    vertical: Optional[DirectionalSpectrum] = None

    def logratio(self, branch: str) -> Optional[np.ndarray]:
        spectrum = getattr(self, branch)
        return None if spectrum is None else energy_logratio(spectrum.power, self.normal.power)

    def to_frame(self) -> pd.DataFrame:
        edges = self.normal.edges_deg()
        missing = np.full(self.normal.bins, np.nan)

        def column(value: Optional[np.ndarray]) -> np.ndarray:
            return missing if value is None else value

        return pd.DataFrame({
            "bin_deg_lo": edges[:-1],
            "bin_deg_hi": edges[1:],
            "p_norm": self.normal.power,
            "p_h": column(self.horizontal.power if self.horizontal else None),
            "p_v": column(self.vertical.power if self.vertical else None),
            "logratio_h": column(self.logratio("horizontal")),
            "logratio_v": column(self.logratio("vertical")),
        }, columns=SPECTRA_COLUMNS)


def branch_spectra(net: MARMamba, image: np.ndarray, block: str = DEFAULT_BLOCK,
                   bins: int = DEFAULT_BINS,
                   annulus: Tuple[float, float] = DEFAULT_ANNULUS) -> BranchSpectra:
    activations = _branch_activations(net, image, block)
    spectra = {name: None if m is None else channel_energy(m, bins, annulus)
               for name, m in activations.items()}
    result = BranchSpectra(block=block, normal=spectra["normal"],
                           horizontal=spectra["horizontal"], vertical=spectra["vertical"])
    logger.info("Branch spectra computed", block=block, bins=bins,
                peak_h=None if result.horizontal is None else int(np.argmax(result.logratio("horizontal"))),
                peak_v=None if result.vertical is None else int(np.argmax(result.logratio("vertical"))))
    return result


def write_spectra_csv(path: Union[str, Path], spectra: BranchSpectra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    spectra.to_frame().to_csv(path, index=False, float_format="%.10g")
    return path
