"""Execute configured runs and write result bundles.

Bundle layout::

    config.yaml            resolved config snapshot (re-runnable)
    manifest.json          tool version, command, CSV schema, status, timing
    summary.csv            one row per (rule, trajectory)
    series.csv             per-step batch means per rule (plots are built from this alone)
    trajectories/*.csv     one file per trajectory, one row per step
    plots/*.svg            optional
    comparison.csv, calibration.csv, sweep.csv, values/...   command specific

Everything except ``manifest.json`` (which carries wall-clock timing) is a
pure function of the config snapshot.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import time

import numpy as np

from .. import __version__
from ..diagnostics import SUMMARY_FIELDS, build_report, calibrate_strength, mean_final_energy, summarize
from ..guidance import CFG, with_scale
from ..sampler import sample_batch
from . import config as cfgmod
from .svg import line_plot

SCHEMA_VERSION = 1
TRAJECTORY_COLUMNS = ("rule", "trajectory", "seed", "step", "t", "beta", "e_prior", "e_guid", "efficiency",
                      "clamped", "energy", "manifold_distance")
SUMMARY_COLUMNS = ("rule", "trajectory", "seed", "error") + SUMMARY_FIELDS
SERIES_COLUMNS = ("rule", "step", "t", "mean_manifold_distance", "mean_energy", "mean_beta", "n")
COMPARISON_COLUMNS = ("rule", "statistic", "mean", "std")
DELTA_COLUMNS = ("rule", "versus", "statistic", "mean_paired_delta")
CALIBRATION_COLUMNS = ("rule", "parameter", "scale", "mean_final_energy", "target_energy", "evaluations")


def fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(v) for v in row])
    return buf.getvalue()


class BundleWriter:
    def __init__(self, root):
        self.root = root
        self.files = {}

    def add(self, relpath, text):
        self.files[relpath] = text

    def commit(self, manifest):
        for rel, text in sorted(self.files.items()):
            path = os.path.join(self.root, rel)
            os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        manifest = dict(manifest, files=sorted(self.files))
        with open(os.path.join(self.root, "manifest.json"), "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")


# -- tables ------------------------------------------------------------------


def trajectory_csv(rec, index, dim):
    header = TRAJECTORY_COLUMNS + tuple(f"x{i}" for i in range(dim))
    stored = {int(k): row for k, row in zip(rec.state_steps, rec.states)}
    rows = []
    for k in range(len(rec.times)):
        dist = None if rec.manifold_distance is None else rec.manifold_distance[k]
        x = stored.get(k)
        rows.append([rec.rule_name, index, rec.seed, k, rec.times[k], rec.beta[k], rec.e_prior[k], rec.e_guid[k],
                     rec.efficiency[k], bool(rec.clamped[k]), rec.energy[k], dist]
                    + (list(x) if x is not None else [None] * dim))
    return csv_text(header, rows)


def summary_rows(records_by_rule, oracle, prefix=()):
    rows = []
    for name, recs in records_by_rule.items():
        for i, rec in enumerate(recs):
            if rec.complete:
                s = summarize(rec, oracle)
                rows.append(list(prefix) + [name, i, rec.seed, None] + [getattr(s, f) for f in SUMMARY_FIELDS])
            else:
                rows.append(list(prefix) + [name, i, rec.seed, rec.error] + [None] * len(SUMMARY_FIELDS))
    return rows


def series_csv(records_by_rule):
    rows = []
    for name, recs in records_by_rule.items():
        done = [r for r in recs if r.complete]
        if not done:
            continue
        energy = np.mean([r.energy for r in done], axis=0)
        beta = np.mean([r.beta for r in done], axis=0)
        dist = None
        if done[0].manifold_distance is not None:
            dist = np.mean([r.manifold_distance for r in done], axis=0)
        for k, t in enumerate(done[0].times):
            rows.append([name, k, t, None if dist is None else dist[k], energy[k], beta[k], len(done)])
    return csv_text(SERIES_COLUMNS, rows)


def plots_from_series(text):
    """SVG documents built only from the contents of ``series.csv``."""
    by_rule = {}
    for row in csv.DictReader(io.StringIO(text)):
        by_rule.setdefault(row["rule"], []).append(row)
    plots = {}
    specs = [("manifold_distance.svg", "mean_manifold_distance", "Distance to manifold"),
             ("energy.svg", "mean_energy", "Conditional energy"),
             ("beta.svg", "mean_beta", "Guidance strength")]
    for fname, col, label in specs:
        series = {}
        for rule, rows in by_rule.items():
            if rows and rows[0][col] != "":
                series[rule] = ([float(r["step"]) for r in rows], [float(r[col]) for r in rows])
        if series:
            plots[fname] = line_plot(series, title=f"{label} over steps", xlabel="step", ylabel=label.lower())
    return plots


# -- execution ---------------------------------------------------------------


def run_rules(spec, jobs, rules=None):
    rules = spec.rules if rules is None else rules
    records, timing = {}, {}
    for rule in rules:
        start = time.perf_counter()
        records[rule.name] = sample_batch(spec.oracle, rule, spec.sampler, spec.condition,
                                          spec.resolved["batch_size"], jobs=jobs)
        timing[rule.name] = time.perf_counter() - start
    return records, timing


def _failures(records_by_rule, prefix=""):
    out = []
    for name, recs in records_by_rule.items():
        for i, r in enumerate(recs):
            if not r.complete:
                out.append(f"{prefix}{name}/{i}: {r.error}")
    return out


def _write_batch(writer, spec, records, emit_plots, base=""):
    dim = spec.oracle.dim
    for name, recs in records.items():
        for i, rec in enumerate(recs):
            writer.add(f"{base}trajectories/{name}_{i:04d}.csv", trajectory_csv(rec, i, dim))
    writer.add(f"{base}summary.csv", csv_text(SUMMARY_COLUMNS, summary_rows(records, spec.oracle)))
    series = series_csv(records)
    writer.add(f"{base}series.csv", series)
    if emit_plots:
        for fname, svg in plots_from_series(series).items():
            writer.add(f"{base}plots/{fname}", svg)


def _manifest(command, status, failures, timing, extra=None):
    m = {
        "tool": "rguide",
        "version": __version__,
        "command": command,
        "schema_version": SCHEMA_VERSION,
        "columns": {
            "trajectories": list(TRAJECTORY_COLUMNS) + ["x0..x{d-1}"],
            "summary": list(SUMMARY_COLUMNS),
            "series": list(SERIES_COLUMNS),
            "comparison": list(COMPARISON_COLUMNS),
            "deltas": list(DELTA_COLUMNS),
            "calibration": list(CALIBRATION_COLUMNS),
        },
        "status": status,
        "failures": failures,
        "timing": timing,
    }
    if extra:
        m.update(extra)
    return m


SNAPSHOT_HEADER = "Resolved rguide configuration snapshot.\nRe-run with the command recorded in manifest.json."


class RunResult:
    def __init__(self, out_dir, status, failures, report=None, calibration=None):
        self.out_dir = out_dir
        self.status = status
        self.failures = failures
        self.report = report
        self.calibration = calibration

    @property
    def ok(self):
        return self.status == "ok"


def run_sample(resolved, out_dir, jobs=None):
    start = time.perf_counter()
    spec = cfgmod.build(resolved)
    jobs = resolved["jobs"] if jobs is None else jobs
    records, timing = run_rules(spec, jobs)
    writer = BundleWriter(out_dir)
    writer.add("config.yaml", cfgmod.dump(resolved, SNAPSHOT_HEADER))
    _write_batch(writer, spec, records, resolved["emit_plots"])
    failures = _failures(records)
    status = "partial" if failures else "ok"
    timing = {"total_seconds": time.perf_counter() - start, "per_rule_seconds": timing}
    writer.commit(_manifest("sample", status, failures, timing))
    return RunResult(out_dir, status, failures)


def calibrate_rules(spec, jobs):
    """Scale every calibrated rule so its mean final energy matches the target."""
    c = spec.resolved["calibration"]
    n = spec.resolved["batch_size"]
    target = c["target_energy"]
    if target is None:
        unguided = mean_final_energy(spec.oracle, CFG(w=0.0, name="unguided"), spec.sampler, spec.condition, n, jobs)
        target = c["target_fraction"] * unguided
    names = c["rules"] or [r.name for r in spec.rules if r.scale_param is not None]
    rules, rows = [], []
    for rule in spec.rules:
        if rule.name not in names:
            rules.append(rule)
            continue
        cal = calibrate_strength(spec.oracle, rule, spec.sampler, spec.condition, target, c["tolerance"], n,
                                 tuple(c["bracket"]), c["scan_points"], c["max_iter"], jobs)
        rules.append(with_scale(rule, cal.scale))
        rows.append([rule.name, rule.scale_param, cal.scale, cal.energy, target, len(cal.scanned)])
    return rules, rows, target


def run_compare(resolved, out_dir, jobs=None):
    start = time.perf_counter()
    spec = cfgmod.build(resolved)
    jobs = resolved["jobs"] if jobs is None else jobs
    writer = BundleWriter(out_dir)
    writer.add("config.yaml", cfgmod.dump(resolved, SNAPSHOT_HEADER))
    rules, cal_rows = spec.rules, None
    if resolved["calibration"] is not None:
        rules, cal_rows, _ = calibrate_rules(spec, jobs)
        writer.add("calibration.csv", csv_text(CALIBRATION_COLUMNS, cal_rows))
    cal_seconds = time.perf_counter() - start
    records, timing = run_rules(spec, jobs, rules)
    _write_batch(writer, spec, records, resolved["emit_plots"])
    failures = _failures(records)
    report = None
    if not failures:
        report = build_report(records, spec.oracle)
        rows = []
        for name in report.rule_names:
            for stat in SUMMARY_FIELDS:
                mean, std = report.aggregates[name][stat]
                rows.append([name, stat, mean, std])
        writer.add("comparison.csv", csv_text(COMPARISON_COLUMNS, rows))
        drows = [[a, b, stat, d[stat]] for (a, b), d in report.deltas.items() for stat in SUMMARY_FIELDS]
        writer.add("deltas.csv", csv_text(DELTA_COLUMNS, drows))
    status = "partial" if failures else "ok"
    timing = {"total_seconds": time.perf_counter() - start, "calibration_seconds": cal_seconds,
              "per_rule_seconds": timing}
    writer.commit(_manifest("compare", status, failures, timing))
    return RunResult(out_dir, status, failures, report, cal_rows)


def run_sweep(resolved, out_dir, jobs=None):
    start = time.perf_counter()
    sweep = resolved["sweep"]
    if sweep is None:
        raise cfgmod.ConfigError("sweep needs a parameter and values (config 'sweep' block or --param/--values)",
                                 key="sweep")
    jobs = resolved["jobs"] if jobs is None else jobs
    param = sweep["parameter"]
    base = {k: v for k, v in resolved.items() if k != "sweep"}
    base["sweep"] = None
    writer = BundleWriter(out_dir)
    writer.add("config.yaml", cfgmod.dump(resolved, SNAPSHOT_HEADER))
    stats = ("final_conditional_energy", "energy_auc", "max_manifold_distance", "mean_manifold_distance",
             "mean_efficiency", "mean_beta", "clamped_fraction")
    header = ("parameter", "value", "rule", "n_ok") + tuple(f"{s}_{m}" for s in stats for m in ("mean", "std"))
    rows, failures, timing = [], [], {}
    for i, value in enumerate(sweep["values"]):
        r = cfgmod.with_parameter(base, param, value)
        spec = cfgmod.build(r)
        records, t = run_rules(spec, jobs)
        timing[f"{param}={value!r}"] = t
        sub = f"values/{param}-{i:03d}/"
        writer.add(f"{sub}config.yaml", cfgmod.dump(r, SNAPSHOT_HEADER))
        _write_batch(writer, spec, records, resolved["emit_plots"], base=sub)
        failures += _failures(records, prefix=f"{param}={value!r}:")
        for name, recs in records.items():
            summaries = [summarize(x, spec.oracle) for x in recs if x.complete]
            row = [param, value, name, len(summaries)]
            for s in stats:
                vals = [getattr(x, s) for x in summaries]
                if not vals or any(v is None for v in vals):
                    row += [None, None]
                else:
                    row += [float(np.mean(vals)), float(np.std(vals))]
            rows.append(row)
    writer.add("sweep.csv", csv_text(header, rows))
    status = "partial" if failures else "ok"
    timing = {"total_seconds": time.perf_counter() - start, "per_value_seconds": timing}
    writer.commit(_manifest("sweep", status, failures, timing, {"sweep": {"parameter": param}}))
    return RunResult(out_dir, status, failures)


RUNNERS = {"sample": run_sample, "compare": run_compare, "sweep": run_sweep}


def replot(bundle_dir):
    """Regenerate every ``plots/*.svg`` in a bundle from its ``series.csv`` files."""
    written = []
    for root, _dirs, files in os.walk(bundle_dir):
        if "series.csv" in files:
            with open(os.path.join(root, "series.csv"), encoding="utf-8") as fh:
                plots = plots_from_series(fh.read())
            for fname, svg in plots.items():
                path = os.path.join(root, "plots", fname)
                os.makedirs(os.path.dirname(path), exist_ok=True)
                with open(path, "w", encoding="utf-8", newline="") as fh:
                    fh.write(svg)
                written.append(path)
    return sorted(written)


def bundle_digest_files(bundle_dir):
    """Relative paths of every deterministic file in a bundle (all but the manifest)."""
    out = []
    for root, _dirs, files in os.walk(bundle_dir):
        for f in files:
            rel = os.path.relpath(os.path.join(root, f), bundle_dir)
            if rel != "manifest.json":
                out.append(rel)
    return sorted(out)


def _finite(v):
    return v is not None and math.isfinite(v)
