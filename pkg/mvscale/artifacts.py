"""Run artefacts: CSV/JSON writers, the ``summary.json`` record and byte-level comparison.

Floats are written with ``repr`` so every value round-trips exactly. Files are
only created once an experiment has finished computing, so a run that fails
validation leaves nothing on disk.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import platform
from importlib import metadata
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import ConfigError, ReplayMismatchError

SUMMARY_FILE = "summary.json"
_TRACKED_PACKAGES = ("numpy", "scipy", "POT", "joblib", "pydantic", "loguru")


def format_value(value: Any) -> str:
    """Full-precision text for one CSV cell."""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    return value


def sha256_file(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def package_versions() -> Dict[str, str]:
    versions = {"python": platform.python_version()}
    for name in _TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = "unknown"
    return versions


class ArtifactWriter:
    """Single writer for one run directory; remembers what it wrote."""

    def __init__(self, out_dir: Path | str) -> None:
        self.out_dir = Path(out_dir)
        self.written: List[str] = []

    def _path(self, name: str) -> Path:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        if name not in self.written:
            self.written.append(name)
        return self.out_dir / name

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
        path = self._path(name)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                if len(row) != len(header):
                    raise ConfigError(f"{name}: row of width {len(row)} under a header of width {len(header)}")
                writer.writerow([format_value(v) for v in row])
        logger.info("wrote {}", path)
        return path

    def write_json(self, name: str, payload: Dict[str, Any]) -> Path:
        path = self._path(name)
        path.write_text(json.dumps(_jsonable(payload), sort_keys=True, indent=2) + "\n")
        logger.info("wrote {}", path)
        return path

    def hashes(self) -> Dict[str, str]:
        return {name: sha256_file(self.out_dir / name) for name in self.written}


class RunSummary(BaseModel):
    """Everything needed to audit or replay a run."""

    model_config = ConfigDict(extra="forbid")

    experiment: str
    seed: int
    config_hash: str
    config: Dict[str, Any]
    threads: int = 1
    wall_time: float = 0.0
    versions: Dict[str, str] = Field(default_factory=dict)
    tolerances: Dict[str, Any] = Field(default_factory=dict)
    headline: Dict[str, Any] = Field(default_factory=dict)
    artifacts: Dict[str, str] = Field(default_factory=dict)

    def write(self, out_dir: Path | str) -> Path:
        path = Path(out_dir) / SUMMARY_FILE
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = _jsonable(self.model_dump())
        path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
        logger.info("wrote {}", path)
        return path

    @classmethod
    def read(cls, path: Path | str) -> "RunSummary":
        try:
            raw = Path(path).read_text()
        except OSError as err:
            raise ConfigError(f"cannot read summary {path}: {err}") from err
        try:
            return cls.model_validate_json(raw)
        except ValidationError as err:
            raise ConfigError(f"invalid summary {path}:\n{err}") from err


def first_difference(a: bytes, b: bytes) -> Optional[int]:
    """Byte offset of the first divergence, ``None`` when identical."""
    if a == b:
        return None
    limit = min(len(a), len(b))
    view_a = np.frombuffer(a[:limit], dtype=np.uint8)
    view_b = np.frombuffer(b[:limit], dtype=np.uint8)
    diff = np.flatnonzero(view_a != view_b)
    return int(diff[0]) if diff.size else limit


def compare_artifacts(recorded_dir: Path, fresh_dir: Path, names: Iterable[str]) -> List[str]:
    """Check that every named file is byte-identical in both directories."""
    checked = []
    for name in names:
        recorded, fresh = recorded_dir / name, fresh_dir / name
        if not recorded.exists() or not fresh.exists():
            raise ReplayMismatchError(name, 0)
        offset = first_difference(recorded.read_bytes(), fresh.read_bytes())
        if offset is not None:
            raise ReplayMismatchError(name, offset)
        checked.append(name)
    return checked


def finite_or_none(value: float) -> Optional[float]:
    """JSON headline value; non-finite numbers become ``None``."""
    value = float(value)
    return value if math.isfinite(value) else None
