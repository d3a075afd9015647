"""Benchmark harness: configs, instance generation, runs and reports."""

from .config import ConfigError, ExperimentConfig, preset
from .harness import compare, generate, load_report, solve

__all__ = ["ConfigError", "ExperimentConfig", "preset", "generate", "solve", "compare", "load_report"]
