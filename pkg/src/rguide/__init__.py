"""Metric-preconditioned diffusion guidance on analytic score oracles."""

__version__ = "0.1.0"
