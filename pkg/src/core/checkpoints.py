"""
Checkpoint Store Module

Model checkpoints as plain directories:

    <root>/iter_000500/
        config.json           NetConfig
        params/<name>.mart    one MART1 tensor per parameter
        optimizer/m/<name>.mart, optimizer/v/<name>.mart   Adam moments (optional)
        meta.json             iteration, phase, phase_iter, seed, dtype, adam_step,
                              sha256 digest per tensor file

A checkpoint is assembled in a temporary sibling directory and renamed into
place, so a crash never leaves a half-written checkpoint under its final name.
Loading verifies every digest. Retention keeps the newest keep_last entries.
"""

import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import jsonschema
import numpy as np

from ..models.backbone import MARMamba, NetConfig
from ..tensor.serialization import read_mart, write_mart
from ..utils.errors import CheckpointError, FormatError
from ..utils.files import atomic_write_json, read_json, sha256_file
from ..utils.logger import get_logger

logger = get_logger(__name__)

CHECKPOINT_PREFIX = "iter_"

META_SCHEMA: Dict[str, Any] = {
    "type": "object",
    "required": ["iteration", "seed", "dtype", "digests"],
    "properties": {
        "iteration": {"type": "integer", "minimum": 0},
        "phase": {"type": "integer", "minimum": 0},
        "phase_iter": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer"},
        "dtype": {"type": "string", "enum": ["float32", "float64"]},
        "adam_step": {"type": "integer", "minimum": 0},
        "digests": {"type": "object", "additionalProperties": {"type": "string"}},
    },
}


@dataclass
class ModelCheckpoint:
    net: MARMamba
    meta: Dict[str, Any]
    optimizer: Dict[str, np.ndarray] = field(default_factory=dict)
    path: Optional[Path] = None

    @property
    def iteration(self) -> int:
        return int(self.meta["iteration"])

    @property
    def seed(self) -> int:
        return int(self.meta["seed"])


def _tensor_file(kind: str, name: str) -> str:
    return f"{kind}/{name}.mart"


def save_checkpoint(path: Union[str, Path], net: MARMamba, meta: Dict[str, Any],
                    optimizer: Optional[Dict[str, np.ndarray]] = None) -> Path:
    """Write a checkpoint directory at path (replacing an existing one)."""
    path = Path(path)
    staging = path.with_name(f"{path.name}.tmp")
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir(parents=True)
    try:
        dtype = str(next(iter(net.parameters())).dtype) if net.parameters() else "float64"
        digests = {}
        for name, param in net.named_parameters():
            relative = _tensor_file("params", name)
            digests[relative] = sha256_file(write_mart(staging / relative, param.data))
        for key, array in (optimizer or {}).items():
            relative = _tensor_file("optimizer", key)
            digests[relative] = sha256_file(write_mart(staging / relative, array))
        atomic_write_json(staging / "config.json", net.config.to_dict())
        atomic_write_json(staging / "meta.json", {**meta, "dtype": dtype, "digests": digests})
        if path.exists():
            shutil.rmtree(path)
        staging.rename(path)
    except OSError as e:
        shutil.rmtree(staging, ignore_errors=True)
        raise CheckpointError(f"could not write checkpoint: {e}", path=str(path)) from e
    return path


def load_checkpoint(path: Union[str, Path], verify: bool = True) -> ModelCheckpoint:
    path = Path(path)
    if not (path / "meta.json").is_file() or not (path / "config.json").is_file():
        raise CheckpointError("not a checkpoint directory", path=str(path))
    try:
        meta = read_json(path / "meta.json")
        jsonschema.validate(meta, META_SCHEMA)
        config = NetConfig.from_dict(read_json(path / "config.json"))
    except (ValueError, jsonschema.ValidationError) as e:
        raise CheckpointError(f"checkpoint metadata is invalid: {e}", path=str(path)) from e
    except TypeError as e:
        raise CheckpointError(f"checkpoint config has unknown fields: {e}", path=str(path)) from e

    if verify:
        for relative, digest in meta["digests"].items():
            target = path / relative
            if not target.is_file() or sha256_file(target) != digest:
                raise CheckpointError("checkpoint tensor missing or corrupted", file=relative)

    net = MARMamba(config, seed=int(meta["seed"]))
    try:
        state = {name: read_mart(path / _tensor_file("params", name)) for name, _ in net.named_parameters()}
        optimizer = {relative[len("optimizer/"):-len(".mart")]: read_mart(path / relative)
                     for relative in meta["digests"] if relative.startswith("optimizer/")}
    except FormatError as e:
        raise CheckpointError(f"cannot read checkpoint tensors: {e}", path=str(path)) from e
    net.load_state_dict(state)
    return ModelCheckpoint(net=net, meta=meta, optimizer=optimizer, path=path)


class CheckpointStore:
    """Numbered checkpoints under one root with last-N retention."""

    def __init__(self, root: Union[str, Path], keep_last: int = 3):
        if keep_last < 1:
            raise CheckpointError("keep_last must be at least 1", keep_last=keep_last)
        self.root = Path(root)
        self.keep_last = keep_last

    def path_for(self, iteration: int) -> Path:
        return self.root / f"{CHECKPOINT_PREFIX}{iteration:07d}"

    def list(self) -> List[Path]:
        if not self.root.is_dir():
            return []
        return sorted(p for p in self.root.iterdir()
                      if p.is_dir() and p.name.startswith(CHECKPOINT_PREFIX) and not p.name.endswith(".tmp"))

    def latest(self) -> Optional[Path]:
        entries = self.list()
        return entries[-1] if entries else None

    def save(self, net: MARMamba, meta: Dict[str, Any],
             optimizer: Optional[Dict[str, np.ndarray]] = None) -> Path:
        path = save_checkpoint(self.path_for(int(meta["iteration"])), net, meta, optimizer)
        logger.info("Checkpoint written", iteration=meta["iteration"], path=str(path))
        self.prune()
        return path

    def prune(self) -> List[Path]:
        entries = self.list()
        removed = entries[:-self.keep_last] if len(entries) > self.keep_last else []
        for old in removed:
            shutil.rmtree(old, ignore_errors=True)
            logger.debug("Checkpoint pruned", path=str(old))
        return removed

    def load(self, path: Optional[Union[str, Path]] = None) -> ModelCheckpoint:
        target = Path(path) if path is not None else self.latest()
        if target is None:
            raise CheckpointError("no checkpoint found", root=str(self.root))
        return load_checkpoint(target)
