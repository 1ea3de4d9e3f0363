"""Flat ``key = value`` experiment configuration."""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any

from ..core import DEFAULT_GRID, FINE_GRID, CheckpointGrid, ConfigurationError
from ..modelclient.http import ENV_TOKEN, ENV_URL

BOOL_TRUE = {"1", "true", "yes", "on"}
BOOL_FALSE = {"0", "false", "no", "off"}

# keys that never change results and so stay out of the config hash
UNHASHED = {"out", "parallelism", "http_token", "http_url", "http_timeout", "http_requests_per_second"}


@dataclass
class ExperimentConfig:
    dataset: str = ""
    out: str = "runs/default"
    backend: str = "mock"
    model: str = "model"
    grid: str = "default"  # default | fine | comma-separated fractions
    n_rollouts: int = 4
    n_psc: int = 8
    topk: int = 20
    efa_max_tokens: int = 64
    max_tokens: int = 32768
    theta: float = 0.75
    trigger: str = "deployment"
    seed: int = 0
    parallelism: int = 4
    probes: str = "psc,efa,atlt,ed"
    suffix_ablation: bool = False
    grader: str = "exact"
    perturb_kinds: str = "truncate_20,shuffle_30,replace_30"
    perturb_fractions: str = "0.1,0.5"
    sc_baselines: bool = True
    calibration_split: str = "first_half"
    calibration_trigger: str = "offline"
    theta_grid: str = "0.5,0.625,0.75,0.875,1.0"
    fp_limit: float = 0.05
    n_resplits: int = 100
    n_bootstrap: int = 10000
    n_permutations: int = 100000
    stats_cohort_key: str = "difficulty"
    http_url: str = ""
    http_token: str = ""
    http_model: str = ""
    http_timeout: float = 120.0
    http_max_attempts: int = 5
    http_requests_per_second: float = 0.0
    http_supports_scoring: bool = False
    mock_n_problems: int = 20
    mock_commit_fraction: float = 0.2
    mock_forceable_fraction: float = 0.4
    mock_rollout_length: int = 100
    mock_cold_start_accuracy: float = 1.0
    mock_curve: str = "step"

    def __post_init__(self) -> None:
        if self.backend not in ("mock", "http"):
            raise ConfigurationError(f"backend must be mock or http, got {self.backend!r}")
        for name in ("trigger", "calibration_trigger"):
            if getattr(self, name) not in ("deployment", "offline"):
                raise ConfigurationError(f"{name} must be deployment or offline, got {getattr(self, name)!r}")
        for name in ("n_rollouts", "n_psc", "parallelism", "n_resplits"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        unknown = set(self.probe_set) - {"psc", "efa", "atlt", "ed"}
        if unknown:
            raise ConfigurationError(f"unknown probes: {sorted(unknown)}")
        self.checkpoint_grid  # validate early

    @property
    def checkpoint_grid(self) -> CheckpointGrid:
        if self.grid == "default":
            return DEFAULT_GRID
        if self.grid == "fine":
            return FINE_GRID
        try:
            return CheckpointGrid(tuple(float(x) for x in self.grid.split(",")))
        except ValueError as exc:
            raise ConfigurationError(f"bad grid {self.grid!r}: {exc}") from None

    @property
    def probe_set(self) -> tuple[str, ...]:
        return tuple(p.strip() for p in self.probes.split(",") if p.strip())

    @property
    def thetas(self) -> tuple[float, ...]:
        return tuple(float(x) for x in self.theta_grid.split(","))

    @property
    def perturbations(self) -> tuple[str, ...]:
        return tuple(k.strip() for k in self.perturb_kinds.split(",") if k.strip())

    @property
    def perturb_at(self) -> tuple[float, ...]:
        return tuple(float(x) for x in self.perturb_fractions.split(","))

    def hashed_items(self) -> list[tuple[str, Any]]:
        return [(f.name, getattr(self, f.name)) for f in fields(self) if f.name not in UNHASHED]

    def config_hash(self) -> str:
        text = "\n".join(f"{k}={_render(v)}" for k, v in self.hashed_items())
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def dump(self) -> str:
        """Config text with secrets left out."""
        return "".join(
            f"{f.name} = {_render(getattr(self, f.name))}\n" for f in fields(self) if f.name != "http_token"
        )

    def replace(self, **kw: Any) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)


def _render(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(name: str, kind: Any, raw: str) -> Any:
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            low = raw.lower()
            if low in BOOL_TRUE:
                return True
            if low in BOOL_FALSE:
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"{name}: cannot parse {raw!r} as {kind}") from None
    return raw


_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def parse_config_text(text: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        out[key] = _coerce(key, _TYPES[key], value)
    return out


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None, env=None) -> ExperimentConfig:
    """File values, then explicit overrides, then endpoint/token from the environment."""
    values: dict[str, Any] = {}
    if path:
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    env = os.environ if env is None else env
    if env.get(ENV_URL):
        values["http_url"] = env[ENV_URL]
    if env.get(ENV_TOKEN):
        values["http_token"] = env[ENV_TOKEN]
    return ExperimentConfig(**values)
