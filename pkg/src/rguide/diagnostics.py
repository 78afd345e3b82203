"""Trajectory summaries, paired rule comparisons and strength calibration."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import geometry as geo
from .errors import CalibrationError, IncompleteRecord
from .guidance import CFG, LinearDecayCFG, build_metric, scale_of, with_scale
from .sampler import sample_batch

SUMMARY_FIELDS = (
    "max_manifold_distance",
    "mean_manifold_distance",
    "final_conditional_energy",
    "energy_auc",
    "mean_efficiency",
    "mean_beta",
    "clamped_fraction",
)


@dataclass(frozen=True)
class TrajectorySummary:
    max_manifold_distance: float | None
    mean_manifold_distance: float | None
    final_conditional_energy: float
    energy_auc: float
    mean_efficiency: float
    mean_beta: float
    clamped_fraction: float
    beta_series: tuple = field(repr=False, default=())

    def row(self):
        return {name: getattr(self, name) for name in SUMMARY_FIELDS}


def energy_auc(energy):
    """Trapezoid integral of the energy series over the step index (unit spacing)."""
    e = np.asarray(energy, dtype=np.float64)
    return float(np.sum(0.5 * (e[1:] + e[:-1])))


def summarize(record, oracle=None) -> TrajectorySummary:
    if not record.complete:
        raise IncompleteRecord(
            f"trajectory {record.rule_name}/{record.seed} is incomplete"
            + (f": {record.error}" if record.error else "")
        )
    n = record.n_steps + 1
    for name in record._SERIES:
        if len(getattr(record, name)) != n:
            raise IncompleteRecord(f"series {name} has {len(getattr(record, name))} entries, expected {n}")
    dist = record.manifold_distance
    if dist is None and oracle is not None and oracle.has_manifold and len(record.state_steps) == n:
        dist = oracle.manifold_distance(record.states)
    scalars = [record.energy, record.beta, record.efficiency]
    if dist is not None:
        scalars.append(dist)
    if not all(np.all(np.isfinite(s)) for s in scalars):
        raise IncompleteRecord("record contains non-finite diagnostics")
    return TrajectorySummary(
        max_manifold_distance=None if dist is None else float(np.max(dist)),
        mean_manifold_distance=None if dist is None else float(np.mean(dist)),
        final_conditional_energy=float(record.energy[-1]),
        energy_auc=energy_auc(record.energy),
        mean_efficiency=float(np.mean(record.efficiency)),
        mean_beta=float(np.mean(record.beta)),
        clamped_fraction=float(np.mean(record.clamped)),
        beta_series=tuple(float(b) for b in record.beta),
    )


def recompute_efficiency(record, rule, metric_spec=None):
    """Efficiency at each stored state, rebuilt from the raw ``(s0, delta_s, guided)`` vectors.

    ``metric_spec`` overrides the metric the update is measured in; by default
    it is the rule's own (identity for CFG variants).
    """
    out = []
    for x, s0, ds, guided in zip(record.states, record.s0, record.delta_s, record.guided):
        if metric_spec is not None:
            metric = build_metric(metric_spec, s0, x)
        elif isinstance(rule, (CFG, LinearDecayCFG)):
            metric = geo.Identity(len(s0))
        else:
            metric = build_metric(rule.metric, s0, x)
        u = guided - s0
        qf = float(metric.quadratic_form(u))
        out.append(0.0 if qf <= 0.0 else float(ds @ u) / math.sqrt(qf))
    return np.array(out)


@dataclass
class ComparisonReport:
    rule_names: tuple
    summaries: dict
    aggregates: dict
    deltas: dict
    dominates: dict
    records: dict = field(repr=False, default_factory=dict)

    def aggregate(self, rule, metric):
        return self.aggregates[rule][metric]


def _aggregate(summaries):
    agg = {}
    for name in SUMMARY_FIELDS:
        vals = [getattr(s, name) for s in summaries]
        if any(v is None for v in vals):
            agg[name] = (None, None)
        else:
            arr = np.array(vals)
            agg[name] = (float(arr.mean()), float(arr.std()))
    return agg


def build_report(records_by_rule, oracle=None) -> ComparisonReport:
    """Aggregate paired batches ``{rule_name: [records]}`` into a report."""
    names = tuple(records_by_rule)
    summaries = {n: [summarize(r, oracle) for r in records_by_rule[n]] for n in names}
    sizes = {len(v) for v in summaries.values()}
    if len(sizes) != 1:
        raise IncompleteRecord("paired comparison needs equal batch sizes")
    seeds = {n: tuple(r.seed for r in records_by_rule[n]) for n in names}
    if len(set(seeds.values())) != 1:
        raise IncompleteRecord("paired comparison needs identical seed sets")
    aggregates = {n: _aggregate(summaries[n]) for n in names}
    deltas, dominates = {}, {}
    for a, b in itertools.permutations(names, 2):
        d = {}
        for metric in SUMMARY_FIELDS:
            va = [getattr(s, metric) for s in summaries[a]]
            vb = [getattr(s, metric) for s in summaries[b]]
            d[metric] = None if None in va or None in vb else float(np.mean(np.subtract(va, vb)))
        deltas[(a, b)] = d
        da, db = aggregates[a]["max_manifold_distance"][0], aggregates[b]["max_manifold_distance"][0]
        ea, eb = aggregates[a]["final_conditional_energy"][0], aggregates[b]["final_conditional_energy"][0]
        if da is None:
            dominates[(a, b)] = False
        else:
            dominates[(a, b)] = da <= db and ea <= eb and (da < db or ea < eb)
    return ComparisonReport(names, summaries, aggregates, deltas, dominates, dict(records_by_rule))


def compare_rules(oracle, rules, config, condition, n, jobs=1) -> ComparisonReport:
    """Run every rule on the same seeds and compare summary statistics."""
    if len(rules) < 2:
        raise ValueError("compare_rules needs at least two rules")
    names = [r.name for r in rules]
    if len(set(names)) != len(names):
        raise ValueError(f"rule names must be unique, got {names}")
    records = {r.name: sample_batch(oracle, r, config, condition, n, jobs=jobs) for r in rules}
    return build_report(records, oracle)


def mean_final_energy(oracle, rule, config, condition, n, jobs=1):
    recs = sample_batch(oracle, rule, config, condition, n, jobs=jobs)
    bad = [r for r in recs if not r.complete]
    if bad:
        raise CalibrationError(f"{len(bad)} trajectories failed at scale {scale_of(rule)!r}: {bad[0].error}")
    return float(np.mean([r.energy[-1] for r in recs]))


class Calibration(NamedTuple):
    scale: float
    energy: float
    scanned: tuple


def calibrate_strength(oracle, rule, config, condition, target_energy, tolerance=0.02, n=64,
                       bracket=(0.0, 8.0), scan_points=5, max_iter=50, jobs=1) -> Calibration:
    """Find the scale of ``rule`` whose mean final conditional energy hits ``target_energy``.

    The energy is assumed to decrease with the scale. A coarse scan over
    ``bracket`` checks that assumption and locates a bracketing pair, then
    bisection runs until the relative error is within ``tolerance``. Bisection
    keeps the sign change between its ends, so small non-monotone wiggles of a
    finite batch mean between scan points do not stop it. A scan that does
    not bracket the target or rises by more than the tolerance, or bisection
    that runs out of iterations, raises :class:`CalibrationError` with the
    scanned values.
    """
    lo, hi = (float(b) for b in bracket)
    if not (0 <= lo < hi):
        raise ValueError("bracket must satisfy 0 <= lo < hi")
    tol = tolerance * abs(target_energy) if target_energy != 0 else tolerance
    scanned = []

    def f(s):
        e = mean_final_energy(oracle, with_scale(rule, s), config, condition, n, jobs)
        scanned.append((s, e))
        return e

    def hit(e):
        return abs(e - target_energy) <= tol

    grid = np.linspace(lo, hi, max(int(scan_points), 2))
    energies = []
    for s in grid:
        e = f(float(s))
        if energies and e > energies[-1] + tol:
            raise CalibrationError("mean final energy is not monotone in the scale", scanned)
        energies.append(e)
        if hit(e):
            return Calibration(float(s), e, tuple(scanned))
    idx = next((i for i in range(len(grid) - 1) if energies[i] >= target_energy >= energies[i + 1]), None)
    if idx is None:
        raise CalibrationError(f"target energy {target_energy:.6g} not bracketed", scanned)
    a, b = float(grid[idx]), float(grid[idx + 1])
    ea, eb = energies[idx], energies[idx + 1]
    for _ in range(max_iter):
        mid = 0.5 * (a + b)
        e = f(mid)
        if hit(e):
            return Calibration(mid, e, tuple(scanned))
        if e > target_energy:
            a, ea = mid, e
        else:
            b, eb = mid, e
    raise CalibrationError(f"bisection did not reach tolerance in {max_iter} iterations", scanned)
