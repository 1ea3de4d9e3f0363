"""Experiment runner: staged, resumable pipeline over a run directory."""

from .config import ExperimentConfig, load_config, parse_config_text
from .manifest import RunManifest
from .reports import cmd_analyze, cmd_baee, cmd_calibrate, cmd_filter_fp, cmd_report, cmd_stats
from .stages import (
    MissingStageError,
    Run,
    cmd_perturb,
    cmd_probe,
    cmd_rollout,
    open_run,
    perturb_prefix,
    perturbation_summary,
)

__all__ = [
    "ExperimentConfig", "MissingStageError", "Run", "RunManifest", "cmd_analyze", "cmd_baee", "cmd_calibrate",
    "cmd_filter_fp", "cmd_perturb", "cmd_probe", "cmd_report", "cmd_rollout", "cmd_stats", "load_config",
    "open_run", "parse_config_text", "perturb_prefix", "perturbation_summary",
]
