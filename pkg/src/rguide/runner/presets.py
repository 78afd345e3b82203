"""Named run configurations shipped with the CLI.

Presets are stored as YAML text so ``rguide presets --show NAME`` prints
something that can be saved, edited and passed back with ``--config``.
"""

from __future__ import annotations

from ..errors import ConfigError
from . import config as cfgmod

FIG1_SPIRAL = """\
# Three guidance rules on the 2-D spiral: CFG, exact projection of the
# score-aligned component, and the rank-one score metric with rho = 10.
# Strengths are calibrated so every rule reaches the same mean final
# conditional energy (1% of the unguided value) before the paired run.
seed: 0
batch_size: 64
oracle: {kind: spiral}
sampler: {integrator: euler, n_steps: 100}
rules:
  - {kind: cfg, name: cfg, w: 1.0}
  - {kind: quadratic_penalty, name: projection, beta: 1.0, metric: {kind: score_aligned, lam: .inf}}
  - {kind: fixed_mog, name: mog_score, beta: 1.0, metric: {kind: score, rho: 10.0}}
calibration:
  target_fraction: 0.01
  tolerance: 0.02
  bracket: [0.0, 8.0]
  scan_points: 5
"""

GMM_2D = """\
# Two well separated 2-D Gaussians, guided towards label b.
seed: 0
batch_size: 32
condition: b
oracle:
  kind: gmm
  components:
    - {weight: 0.5, mean: [-2.0, 0.0], variance: 0.1, label: a}
    - {weight: 0.5, mean: [2.0, 0.0], variance: 0.1, label: b}
sampler: {integrator: euler, n_steps: 100}
rules:
  - {kind: cfg, name: cfg, w: 2.0}
  - {kind: fixed_mog, name: mog, beta: 2.0, metric: {kind: score, rho: 10.0}}
  - {kind: auto_mog, name: auto_mog, gamma: 1.0, metric: {kind: score, rho: 10.0}}
"""

GMM_HIGHDIM = """\
# Random 64-D mixture; exercises the matrix-free metric path.
seed: 0
batch_size: 16
condition: c0
oracle: {kind: random_gmm, dim: 64, n_components: 4, spread: 3.0, variance: 0.25, seed: 0}
sampler: {integrator: euler, n_steps: 100}
rules:
  - {kind: cfg, name: cfg, w: 2.0}
  - {kind: fixed_mog, name: mog, beta: 2.0, metric: {kind: score, rho: 10.0}}
  - {kind: auto_mog, name: auto_mog, gamma: 1.0, metric: {kind: score, rho: 10.0}}
"""

RHO_SWEEP = """\
# Anisotropy ratio sweep on the spiral; rho = 1 is the isotropic (CFG) case.
seed: 0
batch_size: 16
oracle: {kind: spiral}
sampler: {integrator: euler, n_steps: 100}
rules:
  - {kind: cfg, name: cfg, w: 1.0}
  - {kind: fixed_mog, name: mog_score, beta: 1.0, metric: {kind: score, rho: 10.0}}
sweep:
  parameter: rho
  values: [1.0, 5.0, 10.0, 20.0, 50.0]
"""

GAMMA_SWEEP = """\
# Energy-balance ratio sweep around gamma = 1 for Auto-MOG.
seed: 0
batch_size: 16
oracle: {kind: spiral}
sampler: {integrator: euler, n_steps: 100}
rules:
  - {kind: auto_mog, name: auto_mog, gamma: 1.0, metric: {kind: score, rho: 10.0}}
sweep:
  parameter: gamma
  values: [0.25, 0.5, 1.0, 2.0, 4.0]
"""

PRESETS = {
    "fig1-spiral": FIG1_SPIRAL,
    "gmm-2d": GMM_2D,
    "gmm-highdim": GMM_HIGHDIM,
    "rho-sweep": RHO_SWEEP,
    "gamma-sweep": GAMMA_SWEEP,
}
COMPARE_PRESETS = ("fig1-spiral", "gmm-2d", "gmm-highdim")


def preset_text(name):
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}") from None


def load_preset(name, overrides=()):
    return cfgmod.load_text(preset_text(name), overrides)
