"""
File Helpers Module

Atomic writes, content digests and run-directory bookkeeping shared by the
dataset writer, the checkpoint store and the CLI.

Features:
- Atomic file writes (temporary file in the same directory, then replace)
- SHA-256 digests for integrity checks
- Run directories that refuse to be reused without force
- git-describe-style version strings for reproducibility metadata

Usage:
    atomic_write_json(run_dir / "run.json", {"seed": 7})
    run = RunDirectory.prepare(Path("runs/exp1"), force=False)
"""

import hashlib
import json
import os
import subprocess
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from .errors import ContractError
from .json_utils import dumps


def atomic_write_bytes(path: Union[str, Path], content: bytes) -> Path:
    """Write content next to its destination, then move it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_file = path.with_name(f"{path.name}.tmp_{os.getpid()}")
    try:
        with open(temp_file, "wb") as f:
            f.write(content)
        temp_file.replace(path)
    finally:
        if temp_file.exists():
            try:
                temp_file.unlink()
            except OSError:
                pass
    return path


def atomic_write_json(path: Union[str, Path], payload: Any) -> Path:
    return atomic_write_bytes(path, dumps(payload).encode("utf-8"))


def read_json(path: Union[str, Path]) -> Any:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def sha256_file(path: Union[str, Path]) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def version_string() -> str:
    """`git describe --always --dirty` when available, else the package version."""
    from .. import __version__

    try:
        result = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True, text=True, timeout=5, check=False,
        )
        if result.returncode == 0 and result.stdout.strip():
            return result.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}-nogit"


@dataclass
class RunDirectory:
    """
    A directory holding everything one CLI invocation produced.

    Every run directory gets a run.json with the seed, the command, the argv
    and the version string; the resolved configuration snapshot is written
    next to it by the config layer.
    """
    path: Path
    created_at: datetime = field(default_factory=datetime.now)

    @classmethod
    def prepare(cls, path: Union[str, Path], force: bool = False) -> "RunDirectory":
        path = Path(path)
        if path.exists() and not path.is_dir():
            raise ContractError(f"run directory {path} is a file", path=str(path))
        if path.exists() and any(path.iterdir()) and not force:
            raise ContractError(
                f"run directory {path} is not empty; pass --force to overwrite", path=str(path))
        # with force, outputs are overwritten in place; unrelated files are left alone
        path.mkdir(parents=True, exist_ok=True)
        return cls(path=path)

    def write_metadata(self, command: str, seed: int, argv: Optional[List[str]] = None,
                       extra: Optional[Dict[str, Any]] = None) -> Path:
        payload = {
            "command": command,
            "seed": seed,
            "argv": list(argv or []),
            "version": version_string(),
            "started_at": self.created_at.isoformat(timespec="seconds"),
        }
        payload.update(extra or {})
        return atomic_write_json(self.path / "run.json", payload)
