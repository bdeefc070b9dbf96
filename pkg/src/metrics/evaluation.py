"""
Evaluation Protocol Module

Scores restored images against ground truth per region mode and groups the
results by metal size.

Region modes:
- non_metal: pixels outside the (optionally dilated) metal mask
- metal_included: every pixel

Outputs:
- per-image table: image_id, region_mode, size_group, psnr_db, ssim, rmse, perceptual
- aggregate table: one row per (region_mode, size_group, metric) with the
  population mean and std over member images; a group without members is
  emitted with empty statistics
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from ..synth.dataset import SamplePair
from ..tensor.tensor import no_grad
from ..utils.errors import EvaluationError
from ..utils.logger import get_logger, log_execution_time
from .losses import perceptual_distance
from .quality import RegionMode, SizeGroup, psnr, region_mask, rmse, ssim

logger = get_logger(__name__)

METRICS = ("psnr_db", "ssim", "rmse", "perceptual")
RECORD_COLUMNS = ["image_id", "region_mode", "size_group", *METRICS]
AGGREGATE_COLUMNS = ["region_mode", "size_group", "metric", "count", "mean", "std"]
CSV_FLOAT_FORMAT = "%.10g"

Predictor = Callable[[np.ndarray], np.ndarray]


@dataclass
class EvaluationResult:
    records: pd.DataFrame
    aggregate: pd.DataFrame

    def write(self, directory: Union[str, Path], prefix: str = "eval") -> Dict[str, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {
            "records": directory / f"{prefix}_per_image.csv",
            "aggregate": directory / f"{prefix}_aggregate.csv",
        }
        self.records.to_csv(paths["records"], index=False, float_format=CSV_FLOAT_FORMAT)
        self.aggregate.to_csv(paths["aggregate"], index=False, float_format=CSV_FLOAT_FORMAT)
        return paths

    def cell(self, mode: str, group: str, metric: str) -> pd.Series:
        table = self.aggregate
        rows = table[(table.region_mode == mode) & (table.size_group == group) & (table.metric == metric)]
        if rows.empty:
            raise EvaluationError("no such aggregate cell", mode=mode, group=group, metric=metric)
        return rows.iloc[0]


def score_image(gt: np.ndarray, restored: np.ndarray, include: np.ndarray) -> Dict[str, float]:
    """All four metrics over the included pixels."""
    # excluded pixels take the reference value so the perceptual term only sees included ones
    limited = np.where(include, restored, gt)
    with no_grad():
        perceptual = perceptual_distance(gt[None, None], limited[None, None]).item()
    return {
        "psnr_db": psnr(gt, restored, include),
        "ssim": ssim(gt, restored, include),
        "rmse": rmse(gt, restored, include),
        "perceptual": perceptual,
    }


def aggregate_records(records: pd.DataFrame, modes: Sequence[str]) -> pd.DataFrame:
    rows = []
    for mode in modes:
        for group in SizeGroup:
            members = records[(records.region_mode == mode) & (records.size_group == group.value)]
            for metric in METRICS:
                values = members[metric].to_numpy(dtype=np.float64)
                rows.append({
                    "region_mode": mode,
                    "size_group": group.value,
                    "metric": metric,
                    "count": int(values.size),
                    "mean": float(values.mean()) if values.size else np.nan,
                    "std": float(values.std(ddof=0)) if values.size else np.nan,
                })
    return pd.DataFrame(rows, columns=AGGREGATE_COLUMNS)


@log_execution_time
def evaluate_set(pairs: Sequence[SamplePair], predict: Optional[Predictor] = None,
                 modes: Sequence[str] = (RegionMode.NON_METAL.value, RegionMode.METAL_INCLUDED.value),
                 dilation: int = 0, max_workers: int = 1,
                 on_image: Optional[Callable[[int], None]] = None) -> EvaluationResult:
    """
    Evaluate predict(input) against each pair's ground truth.

    With predict=None the unprocessed input images are scored, which gives
    the artifact baseline.
    """
    modes = [RegionMode(m).value for m in modes]
    for pair in pairs:
        if pair.mask is None:
            raise EvaluationError("every pair needs a metal mask", sample_id=pair.sample_id)

    def run(pair: SamplePair) -> List[Dict[str, object]]:
        restored = pair.input if predict is None else predict(pair.input)
        rows = []
        for mode in modes:
            include = region_mask(pair.mask, mode, dilation)
            rows.append({"image_id": pair.sample_id, "region_mode": mode, "size_group": pair.group,
                         **score_image(pair.gt, restored, include)})
        if on_image is not None:
            on_image(pair.sample_id)
        return rows

    with ThreadPoolExecutor(max_workers=max(1, max_workers)) as pool:
        per_image = list(pool.map(run, pairs))

    records = pd.DataFrame([row for rows in per_image for row in rows], columns=RECORD_COLUMNS)
    records = records.sort_values(["region_mode", "image_id"], kind="mergesort",
                                  key=lambda col: col.map(modes.index) if col.name == "region_mode" else col)
    records = records.reset_index(drop=True)
    aggregate = aggregate_records(records, modes)
    logger.info("Evaluation finished", images=len(pairs), modes=",".join(modes))
    return EvaluationResult(records=records, aggregate=aggregate)
