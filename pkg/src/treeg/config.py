"""Experiment configuration: YAML loading, validation and task construction.

A config has five blocks::

    task:      id, core (continuous-gmm | discrete-tabular), D, S, data
    schedule:  kind, T
    objective: kind and its parameters
    guidance:  GuidanceConfig fields
    search:    A, K, seeds, workers
    output:    dir, csv, traces

Unknown keys are rejected.  Errors carry the dotted field path and, when
the value came from a file, its line number.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from .continuous import ContinuousCore, GaussianMixtureData, GMMDenoiser
from .discrete import DiscreteCore, TabularDataDistribution, TabularDenoiser
from .guidance import GuidanceConfig
from .objectives import (
    LinearOnehotPredictor,
    PredictorObjective,
    SoftCountPredictor,
    SoftmaxClassifier,
    TabularObjective,
    TokenCountPredictor,
    count_above_threshold_rule,
    token_count_rule,
)
from .rng import stream
from .schedules import build_schedule


class ConfigError(ValueError):
    def __init__(self, path: str, msg: str, line: int | None = None):
        self.path = path
        self.line = line
        where = path if line is None else f"{path} (line {line})"
        super().__init__(f"{where}: {msg}")


BLOCK_KEYS = {
    "task": {"id", "core", "D", "S", "data"},
    "schedule": {"kind", "T"},
    "objective": {"kind", "token", "target", "sigma", "epsilon", "temperature",
                  "n_classes", "target_class", "scale", "seed", "weights"},
    "guidance": {f.name for f in dataclasses.fields(GuidanceConfig)},
    "search": {"A", "K", "seeds", "workers"},
    "output": {"dir", "csv", "traces"},
}
DATA_KEYS = {
    "count-weighted": {"family", "token_logits", "pair_coupling"},
    "table": {"family", "table"},
    "gmm": {"family", "weights", "means", "variances"},
}
OBJECTIVES = {
    "token-count": ("discrete", {"token", "target"}),
    "classifier": ("discrete", {"n_classes", "target_class"}),
    "linear": ("discrete", {"weights"}),
    "count-above-threshold": ("continuous", {"epsilon", "target"}),
}
SHIPPED = ("toy-continuous-count", "toy-discrete-count", "toy-discrete-classifier", "toy-discrete-linear")


def _line_map(text: str) -> dict[str, int]:
    """Dotted key path -> 1-based line number, from the YAML node tree."""
    out: dict[str, int] = {}

    def walk(node, prefix):
        if isinstance(node, yaml.MappingNode):
            for k, v in node.value:
                p = f"{prefix}.{k.value}" if prefix else str(k.value)
                out[p] = k.start_mark.line + 1
                walk(v, p)
    try:
        walk(yaml.compose(text), "")
    except yaml.YAMLError:
        pass
    return out


@dataclass
class ExperimentConfig:
    task: dict
    schedule: dict
    objective: dict
    guidance: GuidanceConfig
    search: dict
    output: dict
    source: str | None = None
    lines: dict = field(default_factory=dict, repr=False)

    @property
    def task_id(self) -> str:
        return self.task.get("id", "task")

    def seeds(self) -> list[int]:
        s = self.search.get("seeds", 10)
        if isinstance(s, int):
            return list(range(s))
        if isinstance(s, dict):
            return list(range(int(s.get("start", 0)), int(s.get("start", 0)) + int(s["count"])))
        return [int(v) for v in s]

    def with_search(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, search={**self.search, **kw})

    def with_guidance(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, guidance=self.guidance.with_(**kw))


def _err(lines, path, msg):
    return ConfigError(path, msg, lines.get(path))


def parse_config(raw: dict, lines: dict | None = None, source: str | None = None) -> ExperimentConfig:
    lines = lines or {}
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a mapping")
    for k in raw:
        if k not in BLOCK_KEYS:
            raise _err(lines, str(k), f"unknown block; expected one of {sorted(BLOCK_KEYS)}")
    for b in ("task", "schedule", "objective"):
        if b not in raw:
            raise ConfigError(b, "required block is missing")
    blocks = {}
    for b, allowed in BLOCK_KEYS.items():
        blk = raw.get(b) or {}
        if not isinstance(blk, dict):
            raise _err(lines, b, "block must be a mapping")
        for k in blk:
            if k not in allowed:
                raise _err(lines, f"{b}.{k}", f"unknown key; allowed: {sorted(allowed)}")
        blocks[b] = dict(blk)

    task = blocks["task"]
    core = task.get("core")
    if core not in ("continuous-gmm", "discrete-tabular"):
        raise _err(lines, "task.core", "must be 'continuous-gmm' or 'discrete-tabular'")
    for k in ("D",) + (("S",) if core == "discrete-tabular" else ()):
        v = task.get(k)
        if not isinstance(v, int) or v < 1:
            raise _err(lines, f"task.{k}", "must be a positive integer")
    data = task.get("data")
    if not isinstance(data, dict) or data.get("family") not in DATA_KEYS:
        raise _err(lines, "task.data.family", f"must be one of {sorted(DATA_KEYS)}")
    if (data["family"] == "gmm") != (core == "continuous-gmm"):
        raise _err(lines, "task.data.family", f"family {data['family']!r} does not fit core {core!r}")
    for k in data:
        if k not in DATA_KEYS[data["family"]]:
            raise _err(lines, f"task.data.{k}", f"unknown key for family {data['family']!r}")

    sched = blocks["schedule"]
    T = sched.get("T")
    if not isinstance(T, int) or T < 2:
        raise _err(lines, "schedule.T", "must be an integer >= 2")
    if sched.get("kind", "linear-alphabar") not in ("linear-alphabar", "cosine"):
        raise _err(lines, "schedule.kind", "must be 'linear-alphabar' or 'cosine'")

    obj = blocks["objective"]
    kind = obj.get("kind")
    if kind not in OBJECTIVES:
        raise _err(lines, "objective.kind", f"must be one of {sorted(OBJECTIVES)}")
    need_core, required = OBJECTIVES[kind]
    if not core.startswith(need_core):
        raise _err(lines, "objective.kind", f"objective {kind!r} needs a {need_core} core, got {core!r}")
    for k in required:
        if k not in obj:
            raise _err(lines, f"objective.{k}", "required for this objective kind")
    if "sigma" in obj and not obj["sigma"] > 0:
        raise _err(lines, "objective.sigma", "must be positive")

    g = blocks["guidance"]
    if "window" in g:
        g["window"] = tuple(g["window"])
    try:
        guidance = GuidanceConfig(**g)
    except (TypeError, ValueError) as e:
        raise ConfigError("guidance", str(e), lines.get("guidance")) from None

    search = blocks["search"]
    for k in ("A", "K"):
        v = search.setdefault(k, 1)
        if not isinstance(v, int) or v < 1:
            raise _err(lines, f"search.{k}", "must be a positive integer")
    if "workers" in search and (not isinstance(search["workers"], int) or search["workers"] < 1):
        raise _err(lines, "search.workers", "must be a positive integer")
    cfg = ExperimentConfig(task, sched, obj, guidance, search, blocks["output"], source, lines)
    try:
        cfg.seeds()
    except (TypeError, ValueError, KeyError):
        raise _err(lines, "search.seeds", "must be a count, a list, or {start, count}") from None
    return cfg


def shipped_config_path(name: str) -> Path:
    return Path(str(resources.files("treeg") / "configs" / f"{name}.yaml"))


def load_config(path_or_name) -> ExperimentConfig:
    """Load a YAML file, or one of the shipped configs by name."""
    p = Path(path_or_name)
    if not p.exists() and str(path_or_name) in SHIPPED:
        p = shipped_config_path(str(path_or_name))
    if not p.exists():
        raise ConfigError("<file>", f"config file {str(path_or_name)!r} not found")
    text = p.read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigError("<file>", f"invalid YAML: {e}", None if mark is None else mark.line + 1) from None
    return parse_config(raw, _line_map(text), str(p))


# ---------------------------------------------------------------------------
# task construction


@dataclass
class Task:
    id: str
    core: object
    objective: object
    predictor: object | None
    kind: str


def build_data(cfg: ExperimentConfig):
    t, data = cfg.task, cfg.task["data"]
    fam = data["family"]
    if fam == "gmm":
        D = t["D"]
        w = np.asarray(data["weights"], dtype=np.float64)
        means = np.stack([np.broadcast_to(np.asarray(m, dtype=np.float64), (D,)) for m in data["means"]])
        try:
            return GaussianMixtureData(w, means, np.asarray(data["variances"], dtype=np.float64))
        except ValueError as e:
            raise ConfigError("task.data", str(e), cfg.lines.get("task.data")) from None
    D, S = t["D"], t["S"]
    try:
        if fam == "count-weighted":
            return TabularDataDistribution.count_weighted(D, S, data["token_logits"], data.get("pair_coupling", 0.0))
        arr = np.asarray(data["table"], dtype=np.float64)
        if arr.shape != (S,) * D:
            raise ValueError(f"table must have shape {(S,) * D}")
        return TabularDataDistribution(arr)
    except ValueError as e:
        raise ConfigError("task.data", str(e), cfg.lines.get("task.data")) from None


def build_task(cfg: ExperimentConfig) -> Task:
    data = build_data(cfg)
    T = cfg.schedule["T"]
    o = cfg.objective
    if cfg.task["core"] == "continuous-gmm":
        sched = build_schedule(cfg.schedule.get("kind", "linear-alphabar"), T)
        core = ContinuousCore(sched, GMMDenoiser(data, sched))
        objective = count_above_threshold_rule(o["epsilon"], o["target"])
        predictor = SoftCountPredictor(o["epsilon"], o["target"], o.get("temperature", 0.1))
        return Task(cfg.task_id, core, objective, predictor, "continuous")
    core = DiscreteCore(T, TabularDenoiser(data))
    D, S = cfg.task["D"], cfg.task["S"]
    kind = o["kind"]
    sigma = float(o.get("sigma", 1.0))
    if kind == "token-count":
        objective = token_count_rule(o["token"], o["target"], sigma)
        predictor = TokenCountPredictor(o["token"], o["target"], sigma)
    elif kind == "classifier":
        predictor = SoftmaxClassifier.random(D, S, o["n_classes"], o["target_class"],
                                             stream(int(o.get("seed", 0)), "classifier"),
                                             scale=float(o.get("scale", 1.0)))
        objective = TabularObjective(predictor.log_prob_table(D, S))
    else:
        w = np.asarray(o["weights"], dtype=np.float64)
        if w.shape != (D, S):
            raise ConfigError("objective.weights", f"must have shape {(D, S)}", cfg.lines.get("objective.weights"))
        predictor = LinearOnehotPredictor(w)
        objective = PredictorObjective(predictor, S)
    return Task(cfg.task_id, core, objective, predictor, "discrete")
