"""Configuration, bundles, presets and the ``rguide`` command line."""

from .bundle import run_compare, run_sample, run_sweep
from .config import build, load_file, load_text

__all__ = ["build", "load_file", "load_text", "run_compare", "run_sample", "run_sweep"]
