"""Deterministic probability-flow ODE sampling with pluggable guidance."""

from __future__ import annotations

import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import OracleError, RGuideError, StepError
from .guidance import StepState, guide
from .oracle import ForwardProcess

INTEGRATORS = ("euler", "heun")


@dataclass(frozen=True)
class SamplerConfig:
    integrator: str = "euler"
    n_steps: int = 100
    time_grid: tuple | None = None
    process: ForwardProcess = field(default_factory=ForwardProcess)
    seed: int = 0
    t_min_fraction: float = 1e-3
    t_start_fraction: float = 1.0
    state_every: int | None = None
    init_mean: tuple | None = None
    init_std: float | None = None

    def __post_init__(self):
        if self.integrator not in INTEGRATORS:
            raise ValueError(f"integrator must be one of {INTEGRATORS}, got {self.integrator!r}")
        if int(self.n_steps) < 1:
            raise ValueError("n_steps must be >= 1")
        if not (0.0 <= self.t_min_fraction < self.t_start_fraction <= 1.0):
            raise ValueError("need 0 <= t_min_fraction < t_start_fraction <= 1")
        if self.state_every is not None and self.state_every < 1:
            raise ValueError("state_every must be >= 1")
        if self.time_grid is not None:
            grid = tuple(float(t) for t in self.time_grid)
            if len(grid) != int(self.n_steps) + 1:
                raise ValueError(f"time_grid needs n_steps + 1 = {int(self.n_steps) + 1} entries")
            if any(b >= a for a, b in zip(grid, grid[1:])):
                raise ValueError("time_grid must be strictly decreasing")
            if grid[-1] < 0 or grid[0] > self.process.horizon:
                raise ValueError("time_grid must lie inside [0, horizon]")
            object.__setattr__(self, "time_grid", grid)

    def times(self):
        if self.time_grid is not None:
            return np.array(self.time_grid)
        T = self.process.horizon
        return np.linspace(self.t_start_fraction * T, self.t_min_fraction * T, int(self.n_steps) + 1)

    def stride(self, dim):
        if self.state_every is not None:
            return int(self.state_every)
        return 1 if dim <= 3 else 10


@dataclass
class TrajectoryRecord:
    """Per-step diagnostics for one trajectory.

    Scalar series have one entry per grid point (``n_steps + 1``); guidance
    quantities at the last grid point are evaluated for the log but not
    integrated. Vectors are kept only at ``state_steps``.
    """

    rule_name: str
    seed: int
    n_steps: int
    times: list = field(default_factory=list)
    beta: list = field(default_factory=list)
    e_prior: list = field(default_factory=list)
    e_guid: list = field(default_factory=list)
    efficiency: list = field(default_factory=list)
    clamped: list = field(default_factory=list)
    energy: list = field(default_factory=list)
    manifold_distance: list | None = None
    state_steps: list = field(default_factory=list)
    states: list = field(default_factory=list)
    s0: list = field(default_factory=list)
    delta_s: list = field(default_factory=list)
    guided: list = field(default_factory=list)
    x0: np.ndarray | None = None
    wall_time: float = 0.0
    error: str | None = None

    _SERIES = ("times", "beta", "e_prior", "e_guid", "efficiency", "energy")
    _VECTORS = ("states", "s0", "delta_s", "guided")

    def _finalize(self):
        for name in self._SERIES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        self.clamped = np.asarray(self.clamped, dtype=bool)
        if self.manifold_distance is not None:
            self.manifold_distance = np.asarray(self.manifold_distance, dtype=np.float64)
        self.state_steps = np.asarray(self.state_steps, dtype=np.int64)
        for name in self._VECTORS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        return self

    @property
    def complete(self):
        return self.error is None and len(self.times) == self.n_steps + 1

    def same_numbers(self, other):
        """Bitwise equality of every logged quantity (wall time excluded)."""
        if self.error != other.error or self.n_steps != other.n_steps:
            return False
        names = self._SERIES + self._VECTORS + ("clamped", "state_steps", "x0")
        for name in names:
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and not np.array_equal(a, b):
                return False
        if (self.manifold_distance is None) != (other.manifold_distance is None):
            return False
        return self.manifold_distance is None or np.array_equal(self.manifold_distance, other.manifold_distance)


def step(x, t, t_next, guided_score, process: ForwardProcess, integrator="euler", score_fn=None):
    """Advance ``x`` from ``t`` to ``t_next`` along ``dx/dt = f - g^2 s / 2``.

    ``score_fn(x, t)`` supplies the guided score at Heun's predictor point.
    """
    if not t > t_next:
        raise StepError(f"step must go backwards in time (t={t}, t_next={t_next})")
    h = t_next - t
    v = process.velocity(x, t, guided_score)
    if integrator == "euler":
        out = x + h * v
    elif integrator == "heun":
        if score_fn is None:
            raise ValueError("heun needs score_fn to re-evaluate the guided score")
        pred = x + h * v
        if not np.all(np.isfinite(pred)):
            raise StepError(f"non-finite predictor at t={t}")
        v_pred = process.velocity(pred, t_next, score_fn(pred, t_next))
        out = x + 0.5 * h * (v + v_pred)
    else:
        raise ValueError(f"unknown integrator {integrator!r}")
    if not np.all(np.isfinite(out)):
        raise StepError(f"non-finite state after step t={t} -> {t_next}")
    return out


def initial_state(config: SamplerConfig, dim):
    rng = np.random.default_rng(config.seed)
    std = config.process.prior_std() if config.init_std is None else float(config.init_std)
    mean = np.zeros(dim) if config.init_mean is None else np.asarray(config.init_mean, dtype=np.float64)
    if mean.shape != (dim,):
        raise ValueError(f"init_mean has shape {mean.shape}, oracle dimension is {dim}")
    return mean + std * rng.standard_normal(dim)


def sample(oracle, rule, config: SamplerConfig, condition, x_T=None, aux_diagonal=None) -> TrajectoryRecord:
    """Run one guided trajectory from ``x_T`` (or a seeded prior draw) to ``t_min``."""
    start = time.perf_counter()
    if condition not in oracle.condition_labels:
        raise OracleError(f"unknown condition label {condition!r}; known: {', '.join(oracle.condition_labels)}")
    dim = oracle.dim
    x = initial_state(config, dim) if x_T is None else np.array(x_T, dtype=np.float64)
    ts = config.times()
    n = len(ts) - 1
    stride = config.stride(dim)
    rec = TrajectoryRecord(rule_name=rule.name, seed=int(config.seed), n_steps=n)
    if oracle.has_manifold:
        rec.manifold_distance = []

    def guided_at(xk, tk, k):
        ev = oracle.evaluate(xk, tk, condition)
        out = guide(rule, ev.s0, ev.delta_s, StepState(xk, tk, k, n, aux_diagonal))
        return ev, out

    try:
        for k in range(n + 1):
            t = float(ts[k])
            ev, out = guided_at(x, t, k)
            rec.times.append(t)
            rec.beta.append(out.beta_used)
            rec.e_prior.append(out.e_prior)
            rec.e_guid.append(out.e_guid)
            rec.efficiency.append(out.efficiency)
            rec.clamped.append(out.clamped)
            rec.energy.append(float(ev.energy))
            if rec.manifold_distance is not None:
                rec.manifold_distance.append(float(oracle.manifold_distance(x)))
            if k % stride == 0 or k == n:
                rec.state_steps.append(k)
                rec.states.append(x.copy())
                rec.s0.append(ev.s0)
                rec.delta_s.append(ev.delta_s)
                rec.guided.append(out.guided_score)
            if k == n:
                break
            t_next = float(ts[k + 1])
            score_fn = (lambda xp, tp, k=k: guided_at(xp, tp, k)[1].guided_score)
            x = step(x, t, t_next, out.guided_score, config.process, config.integrator, score_fn)
    except RGuideError as exc:
        rec.error = str(exc)
        rec.wall_time = time.perf_counter() - start
        rec._finalize()
        step_index = getattr(exc, "step_index", None)
        raise StepError(str(exc), step_index=step_index if step_index is not None else len(rec.times),
                        partial=rec) from exc
    rec.x0 = x
    rec.wall_time = time.perf_counter() - start
    return rec._finalize()


def _sample_one(args):
    oracle, rule, config, condition, aux = args
    try:
        return sample(oracle, rule, config, condition, aux_diagonal=aux)
    except StepError as exc:
        return exc.partial


def sample_batch(oracle, rule, config: SamplerConfig, condition, n_trajectories, jobs=1, aux_diagonal=None):
    """``n`` trajectories seeded ``config.seed + i``.

    Failed trajectories come back as partial records with ``error`` set; the
    batch never aborts. Output order and content do not depend on ``jobs``.
    """
    if n_trajectories < 1:
        raise ValueError("n_trajectories must be >= 1")
    tasks = [(oracle, rule, replace(config, seed=int(config.seed) + i), condition, aux_diagonal)
             for i in range(int(n_trajectories))]
    if jobs is None or jobs <= 1 or len(tasks) == 1:
        return [_sample_one(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=int(jobs)) as pool:
        return list(pool.map(_sample_one, tasks, chunksize=max(1, math.ceil(len(tasks) / (4 * jobs)))))
