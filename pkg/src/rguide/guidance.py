"""Guidance rules mapping ``(s0, delta_s, state)`` to a guided score.

Every rule except CFG builds a fresh metric from the current unconditional
score (and position) at each call and applies ``s0 + beta M^-1 delta_s``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from . import geometry as geo
from .errors import GeometryError, NumericalError

log = logging.getLogger(__name__)

METRIC_KINDS = ("identity", "score", "radial", "score_aligned", "diagonal", "composite")

DEFAULT_LAMBDA_TANGENT = 1.0
DEFAULT_RHO = 10.0
DEFAULT_GAMMA = 1.0
NORMAL_EPSILON = 1e-5
AUTO_EPSILON = 1e-6
BETA_CLAMP = (0.0, 50.0)


@dataclass(frozen=True)
class MetricSpec:
    """Recipe for the per-step metric.

    ``score`` is the rank-one anisotropic metric around the normalised
    unconditional score (``lambda_normal = rho * lambda_tangent``);
    ``radial`` and ``score_aligned`` are ``I + lam u u^T`` penalties along
    ``x / ||x||`` and ``s0 / ||s0||`` (``lam = inf`` projects);
    ``diagonal`` uses ``weights + diag_epsilon``; ``composite`` sandwiches the
    score metric between square roots of the diagonal.
    """

    kind: str = "score"
    lambda_tangent: float = DEFAULT_LAMBDA_TANGENT
    rho: float = DEFAULT_RHO
    lam: float = 1.0
    weights: tuple | None = None
    epsilon: float = NORMAL_EPSILON
    diag_epsilon: float = 1e-5

    def __post_init__(self):
        if self.kind not in METRIC_KINDS:
            raise GeometryError(f"unknown metric kind {self.kind!r}; expected one of {METRIC_KINDS}")
        if not (self.lambda_tangent > 0 and math.isfinite(self.lambda_tangent)):
            raise GeometryError("lambda_tangent must be positive")
        if not (self.rho > 0 and math.isfinite(self.rho)):
            raise GeometryError("rho must be positive")
        if math.isnan(self.lam) or self.lam < 0:
            raise GeometryError("lam must be nonnegative")
        if math.isinf(self.lam) and self.kind != "score_aligned":
            raise GeometryError("only the score_aligned penalty accepts lam = inf")
        if not (self.epsilon >= 0 and self.diag_epsilon >= 0):
            raise GeometryError("epsilons must be nonnegative")
        if self.weights is not None:
            object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))

    @property
    def lambda_normal(self):
        return self.rho * self.lambda_tangent

    @property
    def is_projection(self):
        return self.kind == "score_aligned" and math.isinf(self.lam)


def _rows(v):
    return np.sqrt(geo.dot(v, v))


def _diagonal(spec, aux_diagonal, d):
    aux = aux_diagonal if aux_diagonal is not None else spec.weights
    if aux is None:
        raise GeometryError(f"{spec.kind} metric needs a diagonal (metric.weights or aux_diagonal)")
    aux = np.asarray(aux, dtype=np.float64)
    if aux.shape[-1] != d:
        raise GeometryError(f"diagonal has length {aux.shape[-1]}, expected {d}")
    if np.any(aux < 0):
        raise GeometryError("diagonal entries must be nonnegative")
    return geo.Diagonal(aux + spec.diag_epsilon)


def build_metric(spec: MetricSpec, s0, x=None, aux_diagonal=None) -> geo.Metric:
    """Construct this step's metric from the unconditional score and position."""
    s0 = np.asarray(s0, dtype=np.float64)
    d = s0.shape[-1]
    kind = spec.kind
    if kind == "identity":
        return geo.Identity(d)
    if kind == "score":
        n = geo.UnitNormal.from_score(s0, spec.epsilon).vector
        return geo.RankOneAnisotropic(n, spec.lambda_tangent, spec.lambda_normal)
    if kind in ("radial", "score_aligned"):
        src = s0 if kind == "score_aligned" else np.asarray(x, dtype=np.float64)
        if src.ndim != 1:
            raise GeometryError(f"{kind} metric is built per trajectory; pass a single vector")
        norm = float(np.sqrt(src @ src))
        if norm == 0.0:
            log.warning("%s metric undefined at a zero %s; falling back to identity",
                        kind, "score" if kind == "score_aligned" else "position")
            return geo.Identity(d)
        cls = geo.RadialPenalty if kind == "radial" else geo.ScoreAlignedPenalty
        return cls(src / norm, spec.lam)
    diag = _diagonal(spec, aux_diagonal, d)
    if kind == "diagonal":
        return diag
    # composite: the normal is carried into the D^{1/2}-scaled coordinates
    # (gradients transform with D^{-1/2}) and rescaled to its original length.
    n = geo.UnitNormal.from_score(s0, spec.epsilon).vector
    scaled = n / np.sqrt(diag.weights)
    sn = _rows(scaled)
    keep = _rows(n)
    factor = np.divide(keep, sn, out=np.zeros_like(sn), where=sn > 0)
    n_tilde = scaled * (factor[..., None] if scaled.ndim > 1 else factor)
    core = geo.RankOneAnisotropic(n_tilde, spec.lambda_tangent, spec.lambda_normal)
    return geo.Composite(diag, core)


# -- rules -------------------------------------------------------------------


def _nonneg(value, name):
    if not (value >= 0 and math.isfinite(value)):
        raise GeometryError(f"{name} must be nonnegative and finite, got {value!r}")


@dataclass(frozen=True)
class CFG:
    w: float = 1.0
    name: str = "cfg"

    scale_param = "w"

    def __post_init__(self):
        _nonneg(self.w, "w")


@dataclass(frozen=True)
class FixedMOG:
    beta: float = 1.0
    metric: MetricSpec = field(default_factory=MetricSpec)
    name: str = "mog"

    scale_param = "beta"

    def __post_init__(self):
        _nonneg(self.beta, "beta")


@dataclass(frozen=True)
class QuadraticPenalty:
    """``s0 + beta Q^-1 delta_s`` for a penalty metric ``Q`` (CFG++/APG style)."""

    beta: float = 1.0
    metric: MetricSpec = field(default_factory=lambda: MetricSpec(kind="score_aligned", lam=math.inf))
    name: str = "penalty"

    scale_param = "beta"

    def __post_init__(self):
        _nonneg(self.beta, "beta")


@dataclass(frozen=True)
class AutoMOG:
    gamma: float = DEFAULT_GAMMA
    metric: MetricSpec = field(default_factory=MetricSpec)
    epsilon: float = AUTO_EPSILON
    beta_clamp: tuple = BETA_CLAMP
    name: str = "auto_mog"

    scale_param = "gamma"

    def __post_init__(self):
        if not (self.gamma > 0 and math.isfinite(self.gamma)):
            raise GeometryError("gamma must be positive")
        if not self.epsilon >= 0:
            raise GeometryError("epsilon must be nonnegative")
        lo, hi = (float(c) for c in self.beta_clamp)
        if not (0 <= lo <= hi):
            raise GeometryError("beta_clamp must satisfy 0 <= lower <= upper")
        if self.metric.is_projection:
            raise GeometryError("auto_mog needs a finite metric; prior energy is infinite under a projection")
        object.__setattr__(self, "beta_clamp", (lo, hi))


@dataclass(frozen=True)
class LinearDecayCFG:
    """CFG whose scale moves linearly from ``w_start`` (first step) to ``w_end`` (last)."""

    w_start: float = 15.0
    w_end: float = 1.0
    name: str = "linear_decay_cfg"

    scale_param = None

    def __post_init__(self):
        _nonneg(self.w_start, "w_start")
        _nonneg(self.w_end, "w_end")

    def scale_at(self, step_index, n_steps):
        frac = 0.0 if n_steps <= 1 else min(max(step_index / (n_steps - 1), 0.0), 1.0)
        return self.w_start + (self.w_end - self.w_start) * frac


RULE_TYPES = {
    "cfg": CFG,
    "fixed_mog": FixedMOG,
    "auto_mog": AutoMOG,
    "quadratic_penalty": QuadraticPenalty,
    "linear_decay_cfg": LinearDecayCFG,
}


def rule_kind(rule):
    for kind, cls in RULE_TYPES.items():
        if type(rule) is cls:
            return kind
    raise TypeError(f"not a guidance rule: {rule!r}")


def scale_of(rule):
    if rule.scale_param is None:
        raise GeometryError(f"{rule_kind(rule)} has no single scale parameter")
    return getattr(rule, rule.scale_param)


def with_scale(rule, value):
    if rule.scale_param is None:
        raise GeometryError(f"{rule_kind(rule)} has no single scale parameter")
    return replace(rule, **{rule.scale_param: float(value)})


# -- evaluation --------------------------------------------------------------


@dataclass(frozen=True)
class StepState:
    x: np.ndarray
    t: float
    step_index: int = 0
    n_steps: int = 1
    aux_diagonal: np.ndarray | None = None


class AutoBeta(NamedTuple):
    beta: float
    e_prior: float
    e_guid: float
    clamped: bool
    natural: np.ndarray


class GuidanceOutcome(NamedTuple):
    guided_score: np.ndarray
    beta_used: float
    e_prior: float
    e_guid: float
    efficiency: float
    clamped: bool
    metric: geo.Metric


def auto_beta(gamma, metric, s0, delta_s, epsilon=AUTO_EPSILON, clamp=BETA_CLAMP):
    """Energy-balanced strength ``clamp(gamma ||s0||_M / (||M^-1 ds||_M + eps))``.

    Works on single vectors or on batches of shape ``(..., d)``.
    """
    nat = metric.inverse_apply(delta_s)
    e_prior = np.sqrt(metric.quadratic_form(s0))
    guid_sq = metric.quadratic_form(nat)
    dual_sq = geo.dot(delta_s, nat)
    # ||M^-1 ds||_M^2 and ds^T M^-1 ds are the same number computed two ways.
    if np.any(np.abs(guid_sq - dual_sq) > 1e-10 * np.maximum(np.abs(guid_sq), np.abs(dual_sq)) + 1e-300):
        raise NumericalError("guidance energy identity violated; metric inverse is inconsistent")
    e_guid = np.sqrt(guid_sq)
    raw = gamma * e_prior / (e_guid + epsilon)
    lo, hi = clamp
    beta = np.clip(raw, lo, hi)
    clamped = (raw > hi) | (raw < lo)
    if np.ndim(beta) == 0:
        return AutoBeta(float(beta), float(e_prior), float(e_guid), bool(clamped), nat)
    return AutoBeta(beta, e_prior, e_guid, clamped, nat)


def _efficiency(metric, delta_s, u):
    qf = float(metric.quadratic_form(u))
    if qf <= 0.0:
        return 0.0
    return float(geo.dot(delta_s, u)) / math.sqrt(qf)


def guide(rule, s0, delta_s, state: StepState) -> GuidanceOutcome:
    s0 = np.asarray(s0, dtype=np.float64)
    delta_s = np.asarray(delta_s, dtype=np.float64)
    if s0.shape != delta_s.shape:
        raise GeometryError(f"s0 {s0.shape} and delta_s {delta_s.shape} differ in shape")
    if isinstance(rule, (CFG, LinearDecayCFG)):
        w = rule.w if isinstance(rule, CFG) else rule.scale_at(state.step_index, state.n_steps)
        metric = geo.Identity(s0.shape[-1])
        u = w * delta_s
        guided = s0 + u
        beta, clamped = float(w), False
        e_prior = float(np.sqrt(s0 @ s0))
        e_guid = float(np.sqrt(delta_s @ delta_s))
    else:
        metric = build_metric(rule.metric, s0, state.x, state.aux_diagonal)
        if isinstance(rule, AutoMOG):
            ab = auto_beta(rule.gamma, metric, s0, delta_s, rule.epsilon, rule.beta_clamp)
            beta, e_prior, e_guid, clamped, nat = ab
        else:
            nat = metric.inverse_apply(delta_s)
            beta, clamped = float(rule.beta), False
            e_guid = float(np.sqrt(metric.quadratic_form(nat)))
            if rule.metric.is_projection:
                # s0 lies along the penalised axis, so its metric length is infinite.
                e_prior = float(np.sqrt(s0 @ s0))
            else:
                e_prior = float(np.sqrt(metric.quadratic_form(s0)))
        u = beta * nat
        guided = s0 + u
    if not np.all(np.isfinite(guided)):
        raise NumericalError("guided score is not finite", step_index=state.step_index)
    return GuidanceOutcome(guided, beta, e_prior, e_guid, _efficiency(metric, delta_s, u), clamped, metric)
