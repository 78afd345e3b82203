"""Synthetic distributions with exact scores at every noise level.

A Gaussian mixture with diagonal covariances stays a Gaussian mixture under
the forward process: component ``k`` becomes ``N(alpha_t mu_k, alpha_t^2
Sigma_k + sigma_t^2 I)``. Log densities, scores, and the conditional energy
``-log p_t(c | x)`` therefore all have closed forms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import OracleError

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class ForwardProcess:
    """Noising schedule on ``[0, horizon]``.

    ``vp``: linear beta(t) from ``beta_min`` to ``beta_max``, drift
    ``-beta(t) x / 2``, ``g^2 = beta(t)``.
    ``ve``: geometric noise level from ``sigma_min`` to ``sigma_max``, zero
    drift; the marginal noise std is ``sigma_min sqrt(r^(2t/T) - 1)`` with
    ``r = sigma_max / sigma_min`` so that clean data sits at ``t = 0``.
    """

    kind: str = "vp"
    beta_min: float = 0.1
    beta_max: float = 20.0
    sigma_min: float = 0.01
    sigma_max: float = 50.0
    horizon: float = 1.0

    def __post_init__(self):
        if self.kind not in ("vp", "ve"):
            raise OracleError(f"unknown process kind {self.kind!r}")
        if not self.horizon > 0:
            raise OracleError("horizon must be positive")
        if self.kind == "vp" and not (0 <= self.beta_min <= self.beta_max and self.beta_max > 0):
            raise OracleError("need 0 <= beta_min <= beta_max, beta_max > 0")
        if self.kind == "ve" and not (0 < self.sigma_min < self.sigma_max):
            raise OracleError("need 0 < sigma_min < sigma_max")

    def check_time(self, t):
        t = float(t)
        if not (-1e-12 <= t <= self.horizon * (1 + 1e-12)):
            raise OracleError(f"time {t!r} outside [0, {self.horizon}]")
        return min(max(t, 0.0), self.horizon)

    def _integrated_beta(self, t):
        return self.beta_min * t + (self.beta_max - self.beta_min) * t * t / (2.0 * self.horizon)

    def beta(self, t):
        return self.beta_min + (self.beta_max - self.beta_min) * t / self.horizon

    def alpha(self, t):
        if self.kind == "ve":
            return 1.0
        return math.exp(-0.5 * self._integrated_beta(t))

    def sigma(self, t):
        if self.kind == "ve":
            r2 = (self.sigma_max / self.sigma_min) ** (2.0 * t / self.horizon)
            return self.sigma_min * math.sqrt(r2 - 1.0)
        return math.sqrt(-math.expm1(-self._integrated_beta(t)))

    def drift(self, x, t):
        if self.kind == "ve":
            return np.zeros_like(x)
        return -0.5 * self.beta(t) * x

    def diffusion_sq(self, t):
        if self.kind == "ve":
            r = self.sigma_max / self.sigma_min
            return self.sigma_min**2 * (2.0 / self.horizon) * math.log(r) * r ** (2.0 * t / self.horizon)
        return self.beta(t)

    def velocity(self, x, t, score):
        """Probability-flow ODE right-hand side ``f(x, t) - g(t)^2 score / 2``."""
        return self.drift(x, t) - 0.5 * self.diffusion_sq(t) * score

    def prior_std(self):
        if self.kind == "ve":
            return self.sigma(self.horizon)
        return 1.0


class OracleEval(NamedTuple):
    log_p: np.ndarray
    log_p_cond: np.ndarray
    log_prior_cond: float
    s0: np.ndarray
    s_c: np.ndarray

    @property
    def energy(self):
        return -(self.log_p_cond + self.log_prior_cond - self.log_p)

    @property
    def delta_s(self):
        return self.s_c - self.s0


class ConditionalEnergy(NamedTuple):
    value: float
    gradient: np.ndarray


def _logsumexp(a, axis=-1):
    m = np.max(a, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(a - m), axis=axis)) + np.squeeze(m, axis)
    return out


class GaussianMixtureOracle:
    """Labelled Gaussian mixture with diagonal (or scalar) covariances."""

    def __init__(self, weights, means, variances, labels, process=None):
        means = np.atleast_2d(np.asarray(means, dtype=np.float64))
        k, d = means.shape
        weights = np.asarray(weights, dtype=np.float64).reshape(-1)
        if weights.shape != (k,):
            raise OracleError(f"expected {k} weights, got {weights.shape[0]}")
        if np.any(weights <= 0):
            raise OracleError("mixture weights must be positive")
        if abs(weights.sum() - 1.0) > 1e-9:
            raise OracleError(f"mixture weights must sum to 1, got {weights.sum()!r}")
        variances = np.asarray(variances, dtype=np.float64)
        if variances.ndim == 0:
            variances = np.full((k, d), float(variances))
        elif variances.ndim == 1:
            if variances.shape[0] != k:
                raise OracleError("scalar-per-component variances need one value per component")
            variances = np.repeat(variances[:, None], d, axis=1)
        if variances.shape != (k, d) or np.any(variances <= 0):
            raise OracleError("variances must be positive with shape (K,), (K, d) or scalar")
        labels = tuple(str(lab) for lab in labels)
        if len(labels) != k:
            raise OracleError(f"expected {k} labels, got {len(labels)}")
        for arr in (weights, means, variances):
            arr.setflags(write=False)
        self.weights = weights
        self.means = means
        self.variances = variances
        self.labels = labels
        self.process = process if process is not None else ForwardProcess()
        self._log_w = np.log(weights)
        self._masks = {}
        for lab in set(labels):
            mask = np.array([x == lab for x in labels])
            self._masks[lab] = (mask, float(np.log(weights[mask].sum())))

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def condition_labels(self):
        return tuple(sorted(self._masks))

    def _mask(self, condition):
        try:
            return self._masks[str(condition)]
        except KeyError:
            raise OracleError(
                f"unknown condition label {condition!r}; known: {', '.join(self.condition_labels)}"
            ) from None

    def _check_x(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.dim:
            raise OracleError(f"x has dimension {x.shape[-1]}, oracle has {self.dim}")
        if not np.all(np.isfinite(x)):
            raise OracleError("x contains non-finite entries")
        return x

    def _component_terms(self, x, t):
        t = self.process.check_time(t)
        a, s = self.process.alpha(t), self.process.sigma(t)
        var = a * a * self.variances + s * s
        diff = x[..., None, :] - a * self.means
        logn = -0.5 * np.sum(diff * diff / var + np.log(var) + LOG_2PI, axis=-1)
        return self._log_w + logn, -diff / var

    @staticmethod
    def _mix(logits, comp_scores):
        lse = _logsumexp(logits)
        resp = np.exp(logits - lse[..., None])
        return lse, np.einsum("...k,...kd->...d", resp, comp_scores)

    def evaluate(self, x, t, condition=None):
        """All density quantities at ``(x, t)`` from one pass over components."""
        x = self._check_x(x)
        logits, comp = self._component_terms(x, t)
        log_p, s0 = self._mix(logits, comp)
        if condition is None:
            return OracleEval(log_p, log_p, 0.0, s0, s0)
        mask, log_wc = self._mask(condition)
        lse_c, s_c = self._mix(logits[..., mask], comp[..., mask, :])
        return OracleEval(log_p, lse_c - log_wc, log_wc, s0, s_c)

    def log_density(self, x, t):
        return self.evaluate(x, t).log_p

    def log_density_conditional(self, x, t, condition):
        return self.evaluate(x, t, condition).log_p_cond

    def log_condition_posterior(self, x, t, condition):
        """``log p_t(c | x)``, evaluated in log space."""
        ev = self.evaluate(x, t, condition)
        return ev.log_p_cond + ev.log_prior_cond - ev.log_p

    def score_unconditional(self, x, t):
        return self.evaluate(x, t).s0

    def score_conditional(self, x, t, condition):
        return self.evaluate(x, t, condition).s_c

    def conditional_increment(self, x, t, condition):
        return self.evaluate(x, t, condition).delta_s

    def conditional_energy(self, x, t, condition):
        """``E = -log p_t(c | x)`` (zero for a vacuous condition) and its gradient ``s0 - s_c``."""
        ev = self.evaluate(x, t, condition)
        return ConditionalEnergy(ev.energy, ev.s0 - ev.s_c)

    def manifold_distance(self, x):
        return None

    @property
    def has_manifold(self):
        return False


def spiral_curve(theta, a, b):
    theta = np.asarray(theta, dtype=np.float64)
    return np.stack([a * theta * np.cos(theta), a * theta * np.sin(theta), b * theta], axis=-1)


class SpiralManifoldOracle(GaussianMixtureOracle):
    """Gaussian tube around the 3-D spiral ``(a t cos t, a t sin t, b t)``.

    Anchors are equally spaced in arc length; those in the last
    ``condition_fraction`` of the arc carry ``condition_label`` and the rest
    carry ``"background"``.
    """

    def __init__(
        self,
        a=0.35,
        b=0.18,
        theta_start=math.pi,
        theta_end=6.0 * math.pi,
        tube_std=0.07,
        n_anchors=96,
        condition_fraction=0.15,
        condition_label="target",
        grid_resolution=4000,
        process=None,
    ):
        if not (theta_end > theta_start):
            raise OracleError("theta_end must exceed theta_start")
        if n_anchors < 2 or grid_resolution < 2:
            raise OracleError("need at least 2 anchors and 2 grid points")
        if not (0.0 < condition_fraction < 1.0):
            raise OracleError("condition_fraction must be in (0, 1)")
        if not tube_std > 0:
            raise OracleError("tube_std must be positive")
        self.a, self.b = float(a), float(b)
        self.theta_start, self.theta_end = float(theta_start), float(theta_end)
        self.tube_std = float(tube_std)
        self.condition_fraction = float(condition_fraction)
        self.condition_label = str(condition_label)

        fine = np.linspace(self.theta_start, self.theta_end, 20001)
        speed = np.sqrt(self.a**2 * (1.0 + fine**2) + self.b**2)
        arc = np.concatenate([[0.0], np.cumsum(0.5 * (speed[1:] + speed[:-1]) * np.diff(fine))])
        self.arc_length = float(arc[-1])
        s_anchor = np.linspace(0.0, self.arc_length, int(n_anchors))
        self.anchor_theta = np.interp(s_anchor, arc, fine)
        means = spiral_curve(self.anchor_theta, self.a, self.b)
        cut = (1.0 - self.condition_fraction) * self.arc_length
        labels = [self.condition_label if s >= cut else "background" for s in s_anchor]
        n = int(n_anchors)
        super().__init__(np.full(n, 1.0 / n), means, self.tube_std**2, labels, process)

        self.grid_theta = np.linspace(self.theta_start, self.theta_end, int(grid_resolution))
        self.grid_points = spiral_curve(self.grid_theta, self.a, self.b)
        seg = np.linalg.norm(np.diff(self.grid_points, axis=0), axis=-1)
        # Nearest curve point lies within half a segment of some grid point.
        self.grid_tolerance = 0.5 * float(seg.max())

    def curve(self, theta):
        return spiral_curve(theta, self.a, self.b)

    @property
    def has_manifold(self):
        return True

    def manifold_distance(self, x):
        """Distance from ``x`` (shape ``(..., 3)``) to the nearest grid point on the curve."""
        x = self._check_x(x)
        diff = x[..., None, :] - self.grid_points
        return np.sqrt(np.min(np.einsum("...gi,...gi->...g", diff, diff), axis=-1))
