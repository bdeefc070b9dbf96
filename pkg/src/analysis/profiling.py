"""
Model Profiling Module

Forward-pass wall-clock time and multiply-accumulate counts per square image
size. The scan blocks are linear in the number of pixels, so MACs per pixel
stay constant as the size grows.
"""

import time
from pathlib import Path
from typing import Sequence, Union

import numpy as np
import pandas as pd

from ..models.backbone import DOWNSAMPLE_FACTOR, MARMamba, count_params
from ..tensor.tensor import Tensor, count_macs, no_grad
from ..utils.errors import ConfigurationError
from ..utils.logger import get_logger

logger = get_logger(__name__)

PROFILE_COLUMNS = ["size", "params", "macs", "seconds"]


def profile_model(net: MARMamba, sizes: Sequence[int], repeats: int = 3, seed: int = 0) -> pd.DataFrame:
    if repeats < 1:
        raise ConfigurationError("repeats must be at least 1", repeats=repeats)
    rng = np.random.default_rng(seed)
    params = count_params(net)
    dtype = net.stem.weight.dtype
    rows = []
    for size in sizes:
        if size < DOWNSAMPLE_FACTOR or size % DOWNSAMPLE_FACTOR:
            raise ConfigurationError("profile sizes must be positive multiples of 8", size=size)
        x = Tensor(rng.random((1, 1, size, size)).astype(dtype))
        timings = []
        macs = 0
        with no_grad():
            for _ in range(repeats):
                with count_macs() as counter:
                    start = time.perf_counter()
                    net(x)
                    timings.append(time.perf_counter() - start)
                macs = counter["macs"]
        rows.append({"size": int(size), "params": params, "macs": int(macs), "seconds": float(np.mean(timings))})
        logger.info("Profiled forward pass", size=size, macs=macs, seconds=f"{np.mean(timings):.4f}")
    return pd.DataFrame(rows, columns=PROFILE_COLUMNS)


def write_profile(path: Union[str, Path], table: pd.DataFrame) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_csv(path, index=False, float_format="%.6g")
    return path
