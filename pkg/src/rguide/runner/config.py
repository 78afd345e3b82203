"""Run configuration: YAML loading, validation, overrides and resolved echo.

A config file is a YAML mapping. Loading fills every default, rejects
unknown keys, and produces a *resolved* tree that is written back verbatim
into each result bundle, so a bundle can be regenerated from its snapshot.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import numpy as np
import yaml

from ..errors import ConfigError, RGuideError
from ..guidance import RULE_TYPES, AutoMOG, CFG, FixedMOG, LinearDecayCFG, MetricSpec, QuadraticPenalty
from ..oracle import ForwardProcess, GaussianMixtureOracle, SpiralManifoldOracle
from ..sampler import INTEGRATORS, SamplerConfig

SWEEPABLE = ("rho", "gamma", "w", "beta", "n_steps", "tube_std")

_PROCESS = {"kind": "vp", "beta_min": 0.1, "beta_max": 20.0, "sigma_min": 0.01, "sigma_max": 50.0, "horizon": 1.0}
_SAMPLER = {
    "integrator": "euler",
    "n_steps": 100,
    "time_grid": None,
    "t_min_fraction": 1e-3,
    "t_start_fraction": 1.0,
    "state_every": None,
    "init": {"mean": None, "std": None},
}
_SPIRAL = {
    "kind": "spiral",
    "a": 0.35,
    "b": 0.18,
    "theta_start": math.pi,
    "theta_end": 6.0 * math.pi,
    "tube_std": 0.07,
    "n_anchors": 96,
    "condition_fraction": 0.15,
    "condition_label": "target",
    "grid_resolution": 4000,
}
_METRIC = {"kind": "score", "lambda_tangent": 1.0, "rho": 10.0, "lam": 1.0, "weights": None,
           "epsilon": 1e-5, "diag_epsilon": 1e-5}
_RULES = {
    "cfg": {"w": 1.0},
    "fixed_mog": {"beta": 1.0, "metric": {}},
    "auto_mog": {"gamma": 1.0, "epsilon": 1e-6, "beta_clamp": [0.0, 50.0], "metric": {}},
    "quadratic_penalty": {"beta": 1.0, "metric": {"kind": "score_aligned", "lam": math.inf}},
    "linear_decay_cfg": {"w_start": 15.0, "w_end": 1.0},
}
_CALIBRATION = {"target_energy": None, "target_fraction": 0.01, "tolerance": 0.02, "bracket": [0.0, 8.0],
                "scan_points": 5, "max_iter": 50, "rules": None}
_TOP = ("seed", "condition", "batch_size", "output_dir", "emit_plots", "jobs",
        "oracle", "process", "sampler", "rules", "calibration", "sweep")


class _Loader(yaml.SafeLoader):
    pass


def line_map(text):
    """``{dotted.key: line}`` for every mapping key and sequence item in ``text``."""
    lines = {}

    def walk(node, path):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = f"{path}.{k.value}" if path else str(k.value)
                lines[p] = k.start_mark.line + 1
                walk(v, p)
        elif isinstance(node, yaml.SequenceNode):
            for i, v in enumerate(node.value):
                p = f"{path}.{i}"
                lines[p] = v.start_mark.line + 1
                walk(v, p)

    try:
        root = yaml.compose(text, Loader=_Loader)
    except yaml.YAMLError:
        return lines
    if root is not None:
        walk(root, "")
    return lines


class _Resolver:
    def __init__(self, lines=None):
        self.lines = lines or {}

    def error(self, path, message):
        line = None
        p = path
        while p and line is None:
            line = self.lines.get(p)
            p = p.rpartition(".")[0]
        return ConfigError(message, key=path or None, line=line)

    def mapping(self, value, path, allowed):
        if value is None:
            value = {}
        if not isinstance(value, dict):
            raise self.error(path, "expected a mapping")
        unknown = sorted(set(map(str, value)) - set(allowed))
        if unknown:
            key = f"{path}.{unknown[0]}" if path else unknown[0]
            raise self.error(key, f"unknown key (allowed: {', '.join(allowed)})")
        return value

    def merge(self, value, defaults, path):
        value = self.mapping(value, path, tuple(defaults))
        out = {}
        for key, default in defaults.items():
            out[key] = value.get(key, copy.deepcopy(default))
        return out

    def number(self, value, path, *, positive=False, nonneg=False, allow_inf=False, integer=False):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            if isinstance(value, str):
                try:
                    value = float(value)
                except ValueError:
                    raise self.error(path, f"expected a number, got {value!r}") from None
            else:
                raise self.error(path, f"expected a number, got {value!r}")
        if integer:
            if isinstance(value, float) and not value.is_integer():
                raise self.error(path, f"expected an integer, got {value!r}")
            value = int(value)
        else:
            value = float(value)
        if math.isnan(value) or (math.isinf(value) and not allow_inf):
            raise self.error(path, f"expected a finite number, got {value!r}")
        if positive and not value > 0:
            raise self.error(path, f"must be > 0, got {value!r}")
        if nonneg and not value >= 0:
            raise self.error(path, f"must be >= 0, got {value!r}")
        return value

    def vector(self, value, path, allow_none=True):
        if value is None and allow_none:
            return None
        if not isinstance(value, (list, tuple)) or not value:
            raise self.error(path, "expected a non-empty list of numbers")
        return [self.number(v, f"{path}.{i}") for i, v in enumerate(value)]

    def choice(self, value, path, options):
        if value not in options:
            raise self.error(path, f"expected one of {', '.join(map(str, options))}, got {value!r}")
        return value

    # -- sections ---------------------------------------------------------

    def process(self, raw):
        p = self.merge(raw, _PROCESS, "process")
        p["kind"] = self.choice(p["kind"], "process.kind", ("vp", "ve"))
        for key in ("beta_min", "beta_max", "sigma_min", "sigma_max"):
            p[key] = self.number(p[key], f"process.{key}", nonneg=True)
        p["horizon"] = self.number(p["horizon"], "process.horizon", positive=True)
        return p

    def sampler(self, raw):
        s = self.merge(raw, _SAMPLER, "sampler")
        s["integrator"] = self.choice(s["integrator"], "sampler.integrator", INTEGRATORS)
        s["n_steps"] = self.number(s["n_steps"], "sampler.n_steps", positive=True, integer=True)
        s["time_grid"] = self.vector(s["time_grid"], "sampler.time_grid")
        s["t_min_fraction"] = self.number(s["t_min_fraction"], "sampler.t_min_fraction", nonneg=True)
        s["t_start_fraction"] = self.number(s["t_start_fraction"], "sampler.t_start_fraction", positive=True)
        if s["state_every"] is not None:
            s["state_every"] = self.number(s["state_every"], "sampler.state_every", positive=True, integer=True)
        init = self.merge(s["init"], _SAMPLER["init"], "sampler.init")
        init["mean"] = self.vector(init["mean"], "sampler.init.mean")
        if init["std"] is not None:
            init["std"] = self.number(init["std"], "sampler.init.std", nonneg=True)
        s["init"] = init
        return s

    def oracle(self, raw):
        raw = self.mapping(raw, "oracle", ("kind",) + tuple(_SPIRAL) + ("components", "dim", "n_components",
                                                                        "spread", "variance", "seed"))
        kind = self.choice(raw.get("kind", "spiral"), "oracle.kind", ("spiral", "gmm", "random_gmm"))
        if kind == "spiral":
            o = self.merge(raw, _SPIRAL, "oracle")
            for key in ("a", "b", "tube_std"):
                o[key] = self.number(o[key], f"oracle.{key}", positive=True)
            for key in ("theta_start", "theta_end"):
                o[key] = self.number(o[key], f"oracle.{key}")
            o["condition_fraction"] = self.number(o["condition_fraction"], "oracle.condition_fraction", positive=True)
            for key in ("n_anchors", "grid_resolution"):
                o[key] = self.number(o[key], f"oracle.{key}", positive=True, integer=True)
            o["condition_label"] = str(o["condition_label"])
            return o
        if kind == "random_gmm":
            defaults = {"kind": "random_gmm", "dim": 16, "n_components": 4, "spread": 3.0, "variance": 0.25,
                        "seed": 0}
            o = self.merge(raw, defaults, "oracle")
            o["dim"] = self.number(o["dim"], "oracle.dim", positive=True, integer=True)
            o["n_components"] = self.number(o["n_components"], "oracle.n_components", positive=True, integer=True)
            o["spread"] = self.number(o["spread"], "oracle.spread", nonneg=True)
            o["variance"] = self.number(o["variance"], "oracle.variance", positive=True)
            o["seed"] = self.number(o["seed"], "oracle.seed", nonneg=True, integer=True)
            return o
        o = self.merge(raw, {"kind": "gmm", "components": None}, "oracle")
        comps = o["components"]
        if not isinstance(comps, list) or not comps:
            raise self.error("oracle.components", "gmm oracle needs a non-empty component list")
        out = []
        for i, c in enumerate(comps):
            path = f"oracle.components.{i}"
            c = self.mapping(c, path, ("weight", "mean", "variance", "label"))
            for key in ("weight", "mean", "variance", "label"):
                if key not in c:
                    raise self.error(f"{path}.{key}", "missing required key")
            var = c["variance"]
            var = self.vector(var, f"{path}.variance") if isinstance(var, list) else self.number(
                var, f"{path}.variance", positive=True)
            out.append({"weight": self.number(c["weight"], f"{path}.weight", positive=True),
                        "mean": self.vector(c["mean"], f"{path}.mean", allow_none=False),
                        "variance": var, "label": str(c["label"])})
        o["components"] = out
        return o

    def metric(self, raw, path, base):
        defaults = dict(_METRIC)
        defaults.update(base)
        raw = self.mapping(raw, path, tuple(_METRIC) + ("lambda_normal",))
        m = {k: raw.get(k, copy.deepcopy(v)) for k, v in defaults.items()}
        m["kind"] = self.choice(m["kind"], f"{path}.kind",
                                ("identity", "score", "radial", "score_aligned", "diagonal", "composite"))
        m["lambda_tangent"] = self.number(m["lambda_tangent"], f"{path}.lambda_tangent", positive=True)
        if "lambda_normal" in raw:
            if "rho" in raw:
                raise self.error(f"{path}.lambda_normal", "give either rho or lambda_normal, not both")
            ln = self.number(raw["lambda_normal"], f"{path}.lambda_normal", positive=True)
            m["rho"] = ln / m["lambda_tangent"]
        m["rho"] = self.number(m["rho"], f"{path}.rho", positive=True)
        m["lam"] = self.number(m["lam"], f"{path}.lam", nonneg=True, allow_inf=True)
        m["weights"] = self.vector(m["weights"], f"{path}.weights")
        m["epsilon"] = self.number(m["epsilon"], f"{path}.epsilon", nonneg=True)
        m["diag_epsilon"] = self.number(m["diag_epsilon"], f"{path}.diag_epsilon", nonneg=True)
        return m

    def rule(self, raw, path):
        raw = self.mapping(raw, path, ("kind", "name", "w", "beta", "gamma", "epsilon", "beta_clamp", "metric",
                                       "w_start", "w_end"))
        kind = self.choice(raw.get("kind"), f"{path}.kind", tuple(_RULES))
        defaults = _RULES[kind]
        r = self.merge({k: v for k, v in raw.items() if k not in ("kind", "name")}, defaults, path)
        out = {"kind": kind, "name": str(raw.get("name", kind))}
        for key, val in r.items():
            kp = f"{path}.{key}"
            if key == "metric":
                out[key] = self.metric(val, kp, defaults["metric"])
            elif key == "beta_clamp":
                pair = self.vector(val, kp, allow_none=False)
                if len(pair) != 2 or not 0 <= pair[0] <= pair[1]:
                    raise self.error(kp, "expected [lower, upper] with 0 <= lower <= upper")
                out[key] = pair
            elif key == "gamma":
                out[key] = self.number(val, kp, positive=True)
            else:
                out[key] = self.number(val, kp, nonneg=True)
        return out

    def calibration(self, raw):
        if raw is None:
            return None
        c = self.merge(raw, _CALIBRATION, "calibration")
        if c["target_energy"] is not None:
            c["target_energy"] = self.number(c["target_energy"], "calibration.target_energy", nonneg=True)
        c["target_fraction"] = self.number(c["target_fraction"], "calibration.target_fraction", positive=True)
        c["tolerance"] = self.number(c["tolerance"], "calibration.tolerance", positive=True)
        br = self.vector(c["bracket"], "calibration.bracket", allow_none=False)
        if len(br) != 2 or not 0 <= br[0] < br[1]:
            raise self.error("calibration.bracket", "expected [lo, hi] with 0 <= lo < hi")
        c["bracket"] = br
        c["scan_points"] = self.number(c["scan_points"], "calibration.scan_points", positive=True, integer=True)
        c["max_iter"] = self.number(c["max_iter"], "calibration.max_iter", positive=True, integer=True)
        if c["rules"] is not None:
            if not isinstance(c["rules"], list):
                raise self.error("calibration.rules", "expected a list of rule names")
            c["rules"] = [str(r) for r in c["rules"]]
        return c

    def sweep(self, raw):
        if raw is None:
            return None
        s = self.merge(raw, {"parameter": None, "values": None}, "sweep")
        s["parameter"] = self.choice(s["parameter"], "sweep.parameter", SWEEPABLE)
        s["values"] = self.vector(s["values"], "sweep.values", allow_none=False)
        return s

    def resolve(self, raw):
        raw = self.mapping(raw, "", _TOP)
        out = {}
        out["seed"] = self.number(raw.get("seed", 0), "seed", nonneg=True, integer=True)
        out["oracle"] = self.oracle(raw.get("oracle"))
        default_cond = out["oracle"].get("condition_label") if out["oracle"]["kind"] == "spiral" else None
        cond = raw.get("condition", default_cond)
        if cond is None:
            raise self.error("condition", "a condition label is required for this oracle")
        out["condition"] = str(cond)
        out["batch_size"] = self.number(raw.get("batch_size", 8), "batch_size", positive=True, integer=True)
        out["jobs"] = self.number(raw.get("jobs", 1), "jobs", positive=True, integer=True)
        od = raw.get("output_dir")
        out["output_dir"] = None if od is None else str(od)
        ep = raw.get("emit_plots", True)
        if not isinstance(ep, bool):
            raise self.error("emit_plots", "expected true or false")
        out["emit_plots"] = ep
        out["process"] = self.process(raw.get("process"))
        out["sampler"] = self.sampler(raw.get("sampler"))
        rules = raw.get("rules")
        if not isinstance(rules, list) or not rules:
            raise self.error("rules", "expected a non-empty list of guidance rules")
        out["rules"] = [self.rule(r, f"rules.{i}") for i, r in enumerate(rules)]
        names = [r["name"] for r in out["rules"]]
        dup = next((n for n in names if names.count(n) > 1), None)
        if dup is not None:
            raise self.error("rules", f"duplicate rule name {dup!r}")
        out["calibration"] = self.calibration(raw.get("calibration"))
        if out["calibration"] and out["calibration"]["rules"]:
            missing = [n for n in out["calibration"]["rules"] if n not in names]
            if missing:
                raise self.error("calibration.rules", f"unknown rule names {missing}")
        out["sweep"] = self.sweep(raw.get("sweep"))
        return out


def resolve(raw, text=None):
    """Validate ``raw`` and return the fully defaulted config tree."""
    r = _Resolver(line_map(text) if text else None)
    resolved = r.resolve(raw)
    build(resolved, _resolver=r)  # surfaces constructor-level errors with key paths
    return resolved


def apply_override(raw, assignment):
    """Apply ``a.b.0.c=value`` to a raw config tree (value parsed as YAML)."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} must look like key=value")
    key, _, text = assignment.partition("=")
    key = key.strip()
    try:
        value = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value: {exc}", key=key) from None
    parts = key.split(".")
    node = raw
    for i, part in enumerate(parts[:-1]):
        node = _descend(node, part, ".".join(parts[: i + 1]), create=True)
    last = parts[-1]
    if isinstance(node, list):
        node[_index(node, last, key)] = value
    elif isinstance(node, dict):
        node[last] = value
    else:
        raise ConfigError("cannot assign into a scalar", key=key)
    return raw


def _index(seq, part, key):
    if part.lstrip("-").isdigit():
        i = int(part)
        if not -len(seq) <= i < len(seq):
            raise ConfigError(f"index {i} out of range", key=key)
        return i
    for i, item in enumerate(seq):
        if isinstance(item, dict) and str(item.get("name", item.get("kind"))) == part:
            return i
    raise ConfigError(f"no list entry named {part!r}", key=key)


def _descend(node, part, key, create=False):
    if isinstance(node, list):
        return node[_index(node, part, key)]
    if isinstance(node, dict):
        if part not in node or node[part] is None:
            if not create:
                raise ConfigError("missing key", key=key)
            node[part] = {}
        return node[part]
    raise ConfigError("cannot descend into a scalar", key=key)


def load_text(text, overrides=()):
    try:
        raw = yaml.load(text, Loader=_Loader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ConfigError(f"invalid YAML: {exc}", line=None if mark is None else mark.line + 1) from None
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping", line=1)
    for ov in overrides:
        apply_override(raw, ov)
    return resolve(raw, None if overrides else text)


def load_file(path, overrides=()):
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    if overrides:
        # Validate the file alone first so line numbers point into it.
        raw = yaml.load(text, Loader=_Loader) or {}
        _Resolver(line_map(text)).mapping(raw, "", _TOP)
    return load_text(text, overrides)


def dump(resolved, header=None):
    body = yaml.safe_dump(resolved, sort_keys=False, default_flow_style=None, allow_unicode=True, width=100)
    if header:
        body = "".join(f"# {line}\n" for line in header.splitlines()) + body
    return body


# -- object construction -----------------------------------------------------


@dataclass
class RunSpec:
    resolved: dict
    oracle: object
    sampler: SamplerConfig
    rules: list
    condition: str


def _process(p):
    return ForwardProcess(kind=p["kind"], beta_min=p["beta_min"], beta_max=p["beta_max"],
                          sigma_min=p["sigma_min"], sigma_max=p["sigma_max"], horizon=p["horizon"])


def build_oracle(o, process):
    if o["kind"] == "spiral":
        kw = {k: v for k, v in o.items() if k != "kind"}
        return SpiralManifoldOracle(process=process, **kw)
    if o["kind"] == "random_gmm":
        rng = np.random.default_rng(o["seed"])
        k, d = o["n_components"], o["dim"]
        means = o["spread"] * rng.standard_normal((k, d)) / np.sqrt(d)
        labels = [f"c{i}" for i in range(k)]
        return GaussianMixtureOracle(np.full(k, 1.0 / k), means, o["variance"], labels, process)
    comps = o["components"]
    dims = {len(c["mean"]) for c in comps}
    if len(dims) != 1:
        raise ConfigError("all component means must have the same length", key="oracle.components")
    weights = np.array([c["weight"] for c in comps])
    d = dims.pop()
    variances = [c["variance"] if isinstance(c["variance"], list) else [c["variance"]] * d for c in comps]
    return GaussianMixtureOracle(weights / weights.sum(), [c["mean"] for c in comps], variances,
                                 [c["label"] for c in comps], process)


def build_metric_spec(m):
    return MetricSpec(kind=m["kind"], lambda_tangent=m["lambda_tangent"], rho=m["rho"], lam=m["lam"],
                      weights=m["weights"], epsilon=m["epsilon"], diag_epsilon=m["diag_epsilon"])


def build_rule(r):
    kind, name = r["kind"], r["name"]
    if kind == "cfg":
        return CFG(w=r["w"], name=name)
    if kind == "linear_decay_cfg":
        return LinearDecayCFG(w_start=r["w_start"], w_end=r["w_end"], name=name)
    metric = build_metric_spec(r["metric"])
    if kind == "fixed_mog":
        return FixedMOG(beta=r["beta"], metric=metric, name=name)
    if kind == "quadratic_penalty":
        return QuadraticPenalty(beta=r["beta"], metric=metric, name=name)
    assert kind in RULE_TYPES
    return AutoMOG(gamma=r["gamma"], metric=metric, epsilon=r["epsilon"], beta_clamp=tuple(r["beta_clamp"]),
                   name=name)


def build(resolved, _resolver=None) -> RunSpec:
    res = _resolver or _Resolver()
    try:
        process = _process(resolved["process"])
    except RGuideError as exc:
        raise res.error("process", str(exc)) from None
    try:
        oracle = build_oracle(resolved["oracle"], process)
    except ConfigError:
        raise
    except RGuideError as exc:
        raise res.error("oracle", str(exc)) from None
    s = resolved["sampler"]
    try:
        sampler = SamplerConfig(integrator=s["integrator"], n_steps=s["n_steps"], time_grid=s["time_grid"],
                                process=process, seed=resolved["seed"], t_min_fraction=s["t_min_fraction"],
                                t_start_fraction=s["t_start_fraction"], state_every=s["state_every"],
                                init_mean=s["init"]["mean"], init_std=s["init"]["std"])
    except ValueError as exc:
        raise res.error("sampler", str(exc)) from None
    if s["init"]["mean"] is not None and len(s["init"]["mean"]) != oracle.dim:
        raise res.error("sampler.init.mean", f"length {len(s['init']['mean'])} != oracle dimension {oracle.dim}")
    rules = []
    for i, r in enumerate(resolved["rules"]):
        try:
            rules.append(build_rule(r))
        except RGuideError as exc:
            raise res.error(f"rules.{i}", str(exc)) from None
        w = r.get("metric", {}).get("weights")
        if w is not None and len(w) != oracle.dim:
            raise res.error(f"rules.{i}.metric.weights", f"length {len(w)} != oracle dimension {oracle.dim}")
    if resolved["condition"] not in oracle.condition_labels:
        raise res.error("condition", f"unknown label; oracle labels are {', '.join(oracle.condition_labels)}")
    return RunSpec(resolved, oracle, sampler, rules, resolved["condition"])


def with_parameter(resolved, parameter, value):
    """Copy of ``resolved`` with a sweep parameter set wherever it applies."""
    out = copy.deepcopy(resolved)
    if parameter == "n_steps":
        out["sampler"]["n_steps"] = int(value)
        return out
    if parameter == "tube_std":
        if out["oracle"]["kind"] != "spiral":
            raise ConfigError("tube_std sweeps need the spiral oracle", key="sweep.parameter")
        out["oracle"]["tube_std"] = float(value)
        return out
    touched = False
    for r in out["rules"]:
        if parameter == "rho" and r.get("metric", {}).get("kind") in ("score", "composite"):
            r["metric"]["rho"] = float(value)
            touched = True
        elif parameter in r and parameter != "metric":
            r[parameter] = float(value)
            touched = True
    if not touched:
        raise ConfigError(f"no rule in this config has parameter {parameter!r}", key="sweep.parameter")
    return out
