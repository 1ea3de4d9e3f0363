"""Run manifest: config hash, stage markers and progress, written atomically."""

from __future__ import annotations

import json
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..core import ConfigurationError
from ..io import atomic_write_text

TOOL_VERSION = "0.1.0"
MANIFEST_NAME = "manifest.json"


@dataclass
class RunManifest:
    config_hash: str
    tool_version: str = TOOL_VERSION
    stages: dict[str, str] = field(default_factory=dict)
    progress: dict[str, int] = field(default_factory=dict)

    _lock = threading.Lock()

    def mark(self, stage: str, status: str, run_dir: Path) -> None:
        with self._lock:
            self.stages[stage] = status
            self.save(run_dir)

    def advance(self, stage: str, done: int, run_dir: Path) -> None:
        with self._lock:
            self.progress[stage] = done
            self.save(run_dir)

    def complete(self, stage: str) -> bool:
        return self.stages.get(stage) == "complete"

    def save(self, run_dir: Path) -> None:
        atomic_write_text(Path(run_dir) / MANIFEST_NAME, json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, run_dir: Path) -> "RunManifest | None":
        p = Path(run_dir) / MANIFEST_NAME
        if not p.exists():
            return None
        d = json.loads(p.read_text(encoding="utf-8"))
        return cls(d["config_hash"], d.get("tool_version", TOOL_VERSION), d.get("stages", {}), d.get("progress", {}))


def open_manifest(run_dir: Path, config_hash: str) -> RunManifest:
    """Load the manifest, refusing to resume a run made with a different config."""
    m = RunManifest.load(run_dir)
    if m is None:
        m = RunManifest(config_hash)
        m.save(run_dir)
        return m
    if m.config_hash != config_hash:
        raise ConfigurationError(
            f"{run_dir} was created with config {m.config_hash}, current config is {config_hash}; "
            "use a fresh --out directory"
        )
    return m
