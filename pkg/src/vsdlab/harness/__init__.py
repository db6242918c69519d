"""Configuration, presets, experiment execution and the command line."""

from .config import ConfigError, ExperimentConfig, parse_config, serialize
from .experiment import RunManifest, run_experiment
from .images import render_density_image
from .presets import PRESETS

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "PRESETS",
    "RunManifest",
    "parse_config",
    "render_density_image",
    "run_experiment",
    "serialize",
]
