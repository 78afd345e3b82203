"""Matrix-free positive-definite metric operators.

A metric is never stored as a dense ``d x d`` matrix. Each operator exposes
``apply`` (Mv), ``inverse_apply`` (M^-1 v) and ``quadratic_form`` (v^T M v),
all O(d). Vectors may carry leading batch axes: ``v`` of shape ``(..., d)``
and direction fields of shape ``(d,)`` or ``(..., d)`` broadcast together,
scalar results then have shape ``(...)``.

The module-level functions at the bottom are the guidance-facing solvers:
the quadratic-cost minimiser, the constrained steepest-descent direction and
the guidance efficiency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDirection, DimensionMismatch, GeometryError, NonFiniteInput

UNIT_TOL = 1e-12


def dot(a, b):
    """Inner product over the last axis."""
    return np.einsum("...i,...i->...", a, b)


def _as_vector(v, what="vector"):
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0:
        raise GeometryError(f"{what} must have at least one axis")
    if not np.all(np.isfinite(v)):
        raise NonFiniteInput(what)
    return v


def _as_direction(u, what, allow_short=False):
    u = _as_vector(u, what)
    norms = np.sqrt(dot(u, u))
    if allow_short:
        if np.any(norms > 1.0 + UNIT_TOL):
            raise GeometryError(f"{what} must have norm <= 1, got {np.max(norms)!r}")
    elif np.any(np.abs(norms - 1.0) > UNIT_TOL):
        raise GeometryError(f"{what} must be a unit vector (|norm - 1| <= {UNIT_TOL})")
    u.setflags(write=False)
    return u


def _positive(x, name):
    x = float(x)
    if not (x > 0.0 and math.isfinite(x)):
        raise GeometryError(f"{name} must be a positive finite number, got {x!r}")
    return x


def normalize(v):
    """Return v / ||v|| along the last axis. Zero rows raise."""
    v = _as_vector(v)
    n = np.sqrt(dot(v, v))
    if np.any(n == 0.0):
        raise DegenerateDirection("cannot normalize a zero vector")
    return v / n[..., None] if v.ndim > 1 else v / n


class Metric:
    """Interface shared by all metric operators. Instances are immutable."""

    def apply(self, v):
        raise NotImplementedError

    def inverse_apply(self, v):
        raise NotImplementedError

    def quadratic_form(self, v):
        raise NotImplementedError

    @property
    def dim(self):
        """Ambient dimension, or ``None`` when any dimension is accepted."""
        return None

    def _check(self, v):
        v = _as_vector(v)
        d = self.dim
        if d is not None and v.shape[-1] != d:
            raise DimensionMismatch(d, v.shape[-1])
        return v

    def norm(self, v):
        return np.sqrt(self.quadratic_form(v))


@dataclass(frozen=True)
class Identity(Metric):
    size: int | None = None

    @property
    def dim(self):
        return self.size

    def apply(self, v):
        return self._check(v).copy()

    def inverse_apply(self, v):
        return self._check(v).copy()

    def quadratic_form(self, v):
        v = self._check(v)
        return dot(v, v)


@dataclass(frozen=True, eq=False)
class RankOneAnisotropic(Metric):
    """``M = lt I + (ln - lt) n n^T`` with eigenvalue ``ln`` along ``n``.

    ``normal`` may be shorter than unit length (the epsilon-stabilised
    normal of a vanishing score); the inverse below is the exact
    Sherman-Morrison inverse for any ``||n|| <= 1`` and reduces to
    ``v/lt - (ln - lt)/(lt ln) (n.v) n`` when ``||n|| = 1``.
    """

    normal: np.ndarray
    lambda_tangent: float = 1.0
    lambda_normal: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "normal", _as_direction(self.normal, "normal", allow_short=True))
        object.__setattr__(self, "lambda_tangent", _positive(self.lambda_tangent, "lambda_tangent"))
        object.__setattr__(self, "lambda_normal", _positive(self.lambda_normal, "lambda_normal"))

    @property
    def dim(self):
        return self.normal.shape[-1]

    @property
    def rho(self):
        return self.lambda_normal / self.lambda_tangent

    def apply(self, v):
        v = self._check(v)
        n = self.normal
        kappa = self.lambda_normal - self.lambda_tangent
        return self.lambda_tangent * v + (kappa * dot(n, v))[..., None] * n

    def inverse_apply(self, v):
        v = self._check(v)
        n = self.normal
        lt = self.lambda_tangent
        kappa = self.lambda_normal - lt
        coef = kappa / (lt * (lt + kappa * dot(n, n)))
        return v / lt - (coef * dot(n, v))[..., None] * n

    def quadratic_form(self, v):
        v = self._check(v)
        return self.lambda_tangent * dot(v, v) + (self.lambda_normal - self.lambda_tangent) * dot(self.normal, v) ** 2


@dataclass(frozen=True, eq=False)
class _DirectionalPenalty(Metric):
    direction: np.ndarray
    lam: float = 1.0

    _allow_inf = False

    def __post_init__(self):
        object.__setattr__(self, "direction", _as_direction(self.direction, "direction"))
        lam = float(self.lam)
        if math.isnan(lam) or lam < 0.0 or (math.isinf(lam) and not self._allow_inf):
            raise GeometryError(f"lam must be a nonnegative finite number, got {lam!r}")
        object.__setattr__(self, "lam", lam)

    @property
    def dim(self):
        return self.direction.shape[-1]

    @property
    def is_projection(self):
        return math.isinf(self.lam)

    def apply(self, v):
        v = self._check(v)
        if self.is_projection:
            raise GeometryError("an infinite penalty has no finite apply; use inverse_apply (projection)")
        u = self.direction
        return v + (self.lam * dot(u, v))[..., None] * u

    def inverse_apply(self, v):
        v = self._check(v)
        u = self.direction
        coef = 1.0 if self.is_projection else self.lam / (1.0 + self.lam)
        return v - (coef * dot(u, v))[..., None] * u

    def quadratic_form(self, v):
        v = self._check(v)
        along = dot(self.direction, v)
        vv = dot(v, v)
        if not self.is_projection:
            return vv + self.lam * along**2
        # Restricted to the orthogonal complement; rounding-level components count as zero.
        tangent = vv - along**2
        off = np.abs(along) > 1e-12 * np.sqrt(vv)
        return np.where(off, np.inf, tangent)


@dataclass(frozen=True, eq=False)
class RadialPenalty(_DirectionalPenalty):
    """``M = I + lam xhat xhat^T``: penalises motion along the position ray."""


@dataclass(frozen=True, eq=False)
class ScoreAlignedPenalty(_DirectionalPenalty):
    """``M = I + lam shat shat^T``; ``lam = inf`` is the orthogonal projection."""

    _allow_inf = True


@dataclass(frozen=True, eq=False)
class Diagonal(Metric):
    weights: np.ndarray

    def __post_init__(self):
        w = _as_vector(self.weights, "weights")
        if np.any(w <= 0.0):
            raise GeometryError("diagonal weights must be strictly positive")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def dim(self):
        return self.weights.shape[-1]

    def apply(self, v):
        return self.weights * self._check(v)

    def inverse_apply(self, v):
        return self._check(v) / self.weights

    def quadratic_form(self, v):
        v = self._check(v)
        return dot(self.weights * v, v)


@dataclass(frozen=True, eq=False)
class Composite(Metric):
    """``M = D^{1/2} C D^{1/2}`` for a diagonal ``D`` and a closed-form core ``C``.

    The inverse stays O(d): diagonal solve, core inverse, diagonal solve.
    """

    diagonal: Diagonal
    core: Metric

    def __post_init__(self):
        if not isinstance(self.diagonal, Diagonal):
            raise GeometryError("Composite.diagonal must be a Diagonal metric")
        if isinstance(self.core, _DirectionalPenalty) and self.core.is_projection:
            raise GeometryError("Composite core must be positive definite")
        cd = self.core.dim
        if cd is not None and cd != self.diagonal.dim:
            raise DimensionMismatch(self.diagonal.dim, cd, "core metric")
        object.__setattr__(self, "_root", np.sqrt(self.diagonal.weights))

    @property
    def dim(self):
        return self.diagonal.dim

    def apply(self, v):
        v = self._check(v)
        return self._root * self.core.apply(self._root * v)

    def inverse_apply(self, v):
        v = self._check(v)
        return self.core.inverse_apply(v / self._root) / self._root

    def quadratic_form(self, v):
        v = self._check(v)
        return self.core.quadratic_form(self._root * v)


@dataclass(frozen=True)
class UnitNormal:
    """epsilon-stabilised normal ``s0 / (||s0|| + eps)``; its norm is below one."""

    vector: np.ndarray
    source_norm: np.ndarray | float
    epsilon: float = 1e-5

    @classmethod
    def from_score(cls, s0, epsilon=1e-5):
        s0 = _as_vector(s0, "s0")
        norm = np.sqrt(dot(s0, s0))
        denom = norm + epsilon
        vec = s0 / (denom[..., None] if s0.ndim > 1 else denom)
        return cls(vector=vec, source_norm=norm, epsilon=epsilon)


# -- operations --------------------------------------------------------------


def metric_apply(m: Metric, v):
    return m.apply(v)


def metric_inverse_apply(m: Metric, v):
    return m.inverse_apply(v)


def metric_quadratic_form(m: Metric, v):
    return m.quadratic_form(v)


def metric_norm(m: Metric, v):
    return m.norm(v)


def solve_quadratic_guidance(m: Metric, energy_gradient, beta):
    """Minimiser of ``0.5 u^T M u + beta <g, u>``, i.e. ``-beta M^-1 g``."""
    beta = float(beta)
    if not (beta >= 0.0 and math.isfinite(beta)):
        raise GeometryError(f"beta must be nonnegative and finite, got {beta!r}")
    return -beta * m.inverse_apply(energy_gradient)


def quadratic_objective(m: Metric, energy_gradient, beta, u):
    return 0.5 * m.quadratic_form(u) + beta * dot(energy_gradient, u)


def steepest_descent_direction(m: Metric, energy_gradient, step):
    """Direction of largest decrease of ``<g, v>`` on the sphere ``||v||_M = step``."""
    step = _positive(step, "step")
    g = _as_vector(energy_gradient, "energy_gradient")
    nat = m.inverse_apply(g)
    dual_sq = dot(g, nat)
    if np.any(dual_sq <= 0.0):
        raise DegenerateDirection("zero energy gradient has no descent direction")
    scale = step / np.sqrt(dual_sq)
    return -(scale[..., None] if g.ndim > 1 else scale) * nat


def guidance_efficiency(m: Metric, energy_gradient, u):
    """``-<g, u> / ||u||_M``: energy decrease per unit metric length."""
    g = _as_vector(energy_gradient, "energy_gradient")
    u = _as_vector(u, "u")
    qf = m.quadratic_form(u)
    if np.any(qf <= 0.0):
        raise DegenerateDirection("efficiency is undefined for a zero update")
    return -dot(g, u) / np.sqrt(qf)


def dual_norm(m: Metric, g):
    """``||g||_{M^-1}``, the largest attainable efficiency."""
    g = _as_vector(g, "g")
    return np.sqrt(dot(g, m.inverse_apply(g)))
