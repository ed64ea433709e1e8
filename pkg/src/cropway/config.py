"""Run provenance, seeding and process-level settings shared by every command."""
import json
import logging
import os
from dataclasses import asdict, dataclass, field, is_dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np

from cropway import __version__
from cropway.errors import ConfigError

__all__ = ["RunConfig", "SEED_STREAMS", "derive_seed", "worker_count", "to_jsonable", "write_json"]

logger = logging.getLogger(__name__)

#: Named random streams split off a master seed.
SEED_STREAMS = ("generation", "init", "batching")

THREADS_ENV = "CW_THREADS"


def derive_seed(master: int, stream: str, *path: int) -> int:
    """Independent 32-bit seed for ``stream`` (and an optional integer path below it)."""
    if stream not in SEED_STREAMS:
        raise ConfigError(f"unknown seed stream {stream!r}, expected one of {SEED_STREAMS}")
    if master < 0:
        raise ConfigError(f"seed must be non-negative, got {master}")
    entropy = [int(master), SEED_STREAMS.index(stream), *(int(p) for p in path)]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint32)[0])


def worker_count() -> int:
    """Thread pool size, capped by the ``CW_THREADS`` environment variable."""
    default = os.cpu_count() or 1
    raw = os.getenv(THREADS_ENV)
    if not raw:
        return default
    try:
        value = int(raw)
    except ValueError as e:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from e
    if value < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return value


def to_jsonable(value: Any) -> Any:
    """Convert dataclasses, paths, tuples and numpy scalars/arrays into plain JSON values."""
    if is_dataclass(value) and not isinstance(value, type):
        return to_jsonable(asdict(value))
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def write_json(payload: Any, path: Union[str, Path]) -> Path:
    """Write ``payload`` with sorted keys so reruns produce identical bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(to_jsonable(payload), f, indent=2, sort_keys=True)
        f.write("\n")
    return path


@dataclass
class RunConfig:
    """Resolved parameters of one command invocation, embedded in everything it writes."""

    command: str
    seed: Optional[int] = None
    params: Dict[str, Any] = field(default_factory=dict)
    version: str = __version__

    def validate(self) -> "RunConfig":
        if not self.command:
            raise ConfigError("run config needs a command name")
        if self.seed is not None and self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {
            "command": self.command,
            "seed": self.seed,
            "params": to_jsonable(self.params),
            "version": self.version,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        return cls(
            command=data.get("command", ""),
            seed=data.get("seed"),
            params=dict(data.get("params") or {}),
            version=data.get("version", __version__),
        )
