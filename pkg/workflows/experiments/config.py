"""Declarative experiment configuration.

A config is one YAML file validated into frozen dataclasses. Unknown keys and
values of the wrong type are reported with their dotted field path and, when
the value came from the file, its line number. Every field has a default, and
`--set dotted.key=value` overrides are applied on top of the file before
validation.
"""

from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Optional, Tuple, Union, get_args, get_origin, get_type_hints

import yaml

from ..flynn.errors import ConfigError

EXPERIMENTS = ("bench", "hp-sweep", "scale", "dp-sweep", "train", "infer")
METHODS = ("flynn", "knn", "1nn", "sbfc")
SOURCES = ("synth", "csv", "url")
SWEEP_AXES = ("m", "s", "rho", "gamma")
SCHEMA_VERSION = 1


@dataclass(frozen=True)
class DatasetConfig:
    source: str = "synth"
    n: int = 1000
    d: int = 50
    n_classes: int = 5
    clusters_per_class: int = 3
    class_sep: float = 2.0
    n_informative: Optional[int] = None
    binarize: Optional[int] = None
    path: Optional[str] = None
    url: Optional[str] = None
    label_column: Union[int, str] = -1
    has_header: bool = True
    minmax: bool = False
    test_size: int = 1000


@dataclass(frozen=True)
class GridConfig:
    """Search space of the benchmark; m is given relative to d."""

    settings: int = 15
    m_over_d: Tuple[float, ...] = (2.0, 2048.0)
    s_min: int = 2
    s_max_fraction: float = 0.5
    rho: Tuple[int, ...] = (8, 256)
    gamma: Tuple[float, ...] = (0.0, 0.2, 0.5, 0.8)
    knn_k: Tuple[int, ...] = (1, 2, 3, 4, 6, 8, 12, 16, 24, 32, 48, 64)
    sbfc_m_over_d: Tuple[float, ...] = (0.125, 0.25, 0.5, 1.0, 2.0, 8.0, 32.0, 128.0, 512.0, 2048.0)


@dataclass(frozen=True)
class SweepConfig:
    """One-at-a-time hyper-parameter study.

    Each axis in `axes` runs its own values against every combination of the
    `base_*` values of the other three; m and s are given relative to d.
    """

    axes: Tuple[str, ...] = SWEEP_AXES
    m_over_d: Tuple[float, ...] = (4.0, 8.0, 16.0, 32.0, 64.0, 128.0, 256.0, 512.0, 1024.0, 4096.0)
    s_over_d: Tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)
    rho: Tuple[int, ...] = (4, 8, 16, 32, 64, 128, 256)
    gamma: Tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)
    base_m: Tuple[int, ...] = (256, 1024)
    base_s_over_d: Tuple[float, ...] = (0.1, 0.3)
    base_rho: Tuple[int, ...] = (8, 32)
    base_gamma: Tuple[float, ...] = (0.0, 0.5)


@dataclass(frozen=True)
class FlyNNConfig:
    """Fixed hyper-parameters for train, scale and dp-sweep."""

    m: Tuple[int, ...] = (600,)
    s: int = 3
    rho: Tuple[int, ...] = (15,)
    gamma: str = "0.9"


@dataclass(frozen=True)
class FederationConfig:
    parties: Tuple[int, ...] = (2,)
    shard_policy: str = "round-robin"
    transport: str = "inprocess"
    backend: str = "thread"
    timeout: float = 300.0


@dataclass(frozen=True)
class DPConfig:
    epsilon: Tuple[float, ...] = (0.25, 0.5, 1.0, 2.0)
    T: Tuple[int, ...] = (4, 8, 16, 32, 64, 128, 256, 600)


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "bench"
    seed: int = 0
    repetitions: int = 1
    output: str = "results/results.csv"
    workers: int = 1
    folds: int = 10
    methods: Tuple[str, ...] = METHODS
    dry_run: bool = False
    record_timings: bool = False
    model_path: str = "model.flynn"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    flynn: FlyNNConfig = field(default_factory=FlyNNConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    dp: DPConfig = field(default_factory=DPConfig)

    def as_dict(self) -> dict:
        return asdict(self)


# Defaults per experiment kind, applied underneath the file contents.
EXPERIMENT_DEFAULTS = {
    "bench": {
        "repetitions": 30,
        "output": "results/bench.csv",
        "dataset": {"n": 1000, "d": 50, "n_classes": 5, "clusters_per_class": 3, "binarize": 10},
    },
    "hp-sweep": {
        "repetitions": 1,
        "output": "results/hp_sweep.csv",
        "dataset": {"n": 1000, "d": 50, "n_classes": 5, "clusters_per_class": 3},
    },
    "scale": {
        "repetitions": 10,
        "output": "results/scale.csv",
        "record_timings": True,
        "dataset": {"n": 50000, "d": 784, "n_classes": 10, "clusters_per_class": 3, "n_informative": 64},
        "flynn": {"m": [8192], "s": 20, "rho": [32], "gamma": "0.5"},
        "federation": {"parties": [1, 2, 4, 8, 16], "transport": "tcp", "backend": "process"},
    },
    "dp-sweep": {
        "repetitions": 10,
        "output": "results/dp_sweep.csv",
        "dataset": {"n": 100000, "d": 30, "n_classes": 2, "clusters_per_class": 5},
        "flynn": {"m": [300, 600], "s": 3, "rho": [15, 30], "gamma": "0.9"},
        "federation": {"parties": [2]},
    },
    "train": {"federation": {"parties": [1]}},
    "infer": {"output": "results/predictions.csv"},
}


def _line_index(node, prefix: str = "", lines: dict = None) -> dict:
    """Map dotted key paths to 1-based YAML line numbers."""
    lines = {} if lines is None else lines
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = f"{prefix}.{key_node.value}" if prefix else str(key_node.value)
            lines[path] = key_node.start_mark.line + 1
            _line_index(value_node, path, lines)
    return lines


def _merge(base: dict, update: dict) -> dict:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _coerce(value, hint, path: str, lines: dict):
    origin = get_origin(hint)
    line = lines.get(path)
    if origin is Union:
        options = get_args(hint)
        if value is None and type(None) in options:
            return None
        for option in options:
            if option is type(None):
                continue
            try:
                return _coerce(value, option, path, lines)
            except ConfigError:
                continue
        raise ConfigError(f"value {value!r} does not match {hint}", field=path, line=line)
    if origin in (tuple, Tuple):
        items = value if isinstance(value, (list, tuple)) else [value]
        if not items:
            raise ConfigError("list must not be empty", field=path, line=line)
        return tuple(_coerce(item, get_args(hint)[0], path, lines) for item in items)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", field=path, line=line)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", field=path, line=line)
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", field=path, line=line)
        return float(value)
    if hint is str:
        if isinstance(value, bool) or not isinstance(value, (str, int, float)):
            raise ConfigError(f"expected a string, got {value!r}", field=path, line=line)
        return value if isinstance(value, str) else repr(value)
    raise ConfigError(f"unsupported field type {hint}", field=path, line=line)


def _build(cls, data, prefix: str, lines: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping, got {type(data).__name__}", field=prefix or None, line=lines.get(prefix))
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    values = {}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else str(key)
        if key not in known:
            raise ConfigError("unknown field", field=path, line=lines.get(path))
        hint = hints[key]
        if is_dataclass(hint):
            values[key] = _build(hint, value, path, lines)
        else:
            values[key] = _coerce(value, hint, path, lines)
    return cls(**values)


def _positive(value, path: str, lines: dict, allow_zero: bool = False):
    ok = value >= 0 if allow_zero else value > 0
    if not ok:
        raise ConfigError(f"must be {'nonnegative' if allow_zero else 'positive'}, got {value}", field=path, line=lines.get(path))


def validate(config: ExperimentConfig, lines: dict = None):
    """Cross-field checks that the type coercion cannot express."""
    lines = lines or {}

    def fail(message: str, path: str):
        raise ConfigError(message, field=path, line=lines.get(path))

    if config.experiment not in EXPERIMENTS:
        fail(f"unknown experiment '{config.experiment}', expected one of {EXPERIMENTS}", "experiment")
    if not 0 <= config.seed < 2**64:
        fail("must be a 64-bit unsigned integer", "seed")
    for name in ("repetitions", "workers"):
        _positive(getattr(config, name), name, lines)
    if config.folds < 2:
        fail(f"need at least 2 folds, got {config.folds}", "folds")
    for method in config.methods:
        if method not in METHODS:
            fail(f"unknown method '{method}', expected one of {METHODS}", "methods")

    dataset = config.dataset
    if dataset.source not in SOURCES:
        fail(f"unknown source '{dataset.source}', expected one of {SOURCES}", "dataset.source")
    if dataset.source == "csv" and not dataset.path:
        fail("a csv source needs a path", "dataset.path")
    if dataset.source == "url" and not dataset.url:
        fail("a url source needs a url", "dataset.url")
    for name in ("n", "d", "n_classes", "clusters_per_class", "class_sep", "test_size"):
        _positive(getattr(dataset, name), f"dataset.{name}", lines)

    grid = config.grid
    _positive(grid.settings, "grid.settings", lines)
    _positive(grid.s_min, "grid.s_min", lines)
    for name in ("m_over_d", "rho", "sbfc_m_over_d", "knn_k"):
        for value in getattr(grid, name):
            _positive(value, f"grid.{name}", lines)
    for name in ("m_over_d", "rho"):
        if len(getattr(grid, name)) != 2 or getattr(grid, name)[0] > getattr(grid, name)[1]:
            fail("expected a [low, high] range", f"grid.{name}")
    if not 0 < grid.s_max_fraction <= 1:
        fail("must be in (0, 1]", "grid.s_max_fraction")
    for gamma in grid.gamma:
        if not 0 <= gamma < 1:
            fail(f"gamma must be in [0, 1), got {gamma}", "grid.gamma")

    sweep = config.sweep
    for axis in sweep.axes:
        if axis not in SWEEP_AXES:
            fail(f"unknown axis '{axis}', expected one of {SWEEP_AXES}", "sweep.axes")
    for name in ("m_over_d", "rho", "base_m", "base_rho"):
        for value in getattr(sweep, name):
            _positive(value, f"sweep.{name}", lines)
    for name in ("s_over_d", "base_s_over_d"):
        for value in getattr(sweep, name):
            if not 0 < value <= 1:
                fail(f"must be in (0, 1], got {value}", f"sweep.{name}")
    for name in ("gamma", "base_gamma"):
        for value in getattr(sweep, name):
            if not 0 <= value < 1:
                fail(f"gamma must be in [0, 1), got {value}", f"sweep.{name}")

    for value in config.flynn.m + config.flynn.rho + (config.flynn.s,):
        _positive(value, "flynn", lines)
    for parties in config.federation.parties:
        _positive(parties, "federation.parties", lines)
    if config.federation.shard_policy not in ("round-robin", "by-class"):
        fail("expected 'round-robin' or 'by-class'", "federation.shard_policy")
    if config.federation.transport not in ("inprocess", "tcp"):
        fail("expected 'inprocess' or 'tcp'", "federation.transport")
    if config.federation.backend not in ("thread", "process"):
        fail("expected 'thread' or 'process'", "federation.backend")
    if config.federation.backend == "process" and config.federation.transport != "tcp":
        fail("the process backend needs the tcp transport", "federation.backend")
    _positive(config.federation.timeout, "federation.timeout", lines)
    for value in config.dp.epsilon + config.dp.T:
        _positive(value, "dp", lines)
    if config.experiment == "dp-sweep" and min(config.federation.parties) < 2:
        fail("the DP sweep needs at least two parties", "federation.parties")


def parse_overrides(assignments) -> dict:
    """Turn ['a.b=1', 'c=[1, 2]'] into a nested dict; values are parsed as YAML."""
    tree = {}
    for assignment in assignments or ():
        if "=" not in assignment:
            raise ConfigError(f"override '{assignment}' is not of the form key=value")
        key, raw = assignment.split("=", 1)
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse override value {raw!r}: {e}", field=key.strip()) from e
        node = tree
        parts = key.strip().split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return tree


def load_config(path=None, overrides=(), experiment: str = None) -> ExperimentConfig:
    """Load and validate a config file.

    Parameters:
    path : str or Path, optional
        YAML file; when omitted only the defaults and overrides are used.
    overrides : list of str, optional
        `dotted.key=value` assignments applied over the file.
    experiment : str, optional
        Experiment kind whose defaults sit under the file; taken from the
        file's `experiment` key when omitted.

    Returns:
    ExperimentConfig
        The validated configuration.

    Raises:
    ConfigError
        On YAML syntax errors, unknown fields, type errors or invalid values.
    """
    raw, lines = {}, {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text()
        try:
            raw = yaml.safe_load(text) or {}
            node = yaml.compose(text)
        except yaml.YAMLError as e:
            mark = getattr(e, "problem_mark", None)
            raise ConfigError(f"invalid YAML: {getattr(e, 'problem', e)}", line=mark.line + 1 if mark else None) from e
        if not isinstance(raw, dict):
            raise ConfigError("top level of the config must be a mapping", line=1)
        lines = _line_index(node)

    raw = _merge(raw, parse_overrides(overrides))
    kind = experiment or raw.get("experiment", "bench")
    if kind not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment '{kind}', expected one of {EXPERIMENTS}", field="experiment", line=lines.get("experiment"))
    raw = _merge(EXPERIMENT_DEFAULTS.get(kind, {}), raw)
    raw["experiment"] = kind
    config = _build(ExperimentConfig, raw, "", lines)
    validate(config, lines)
    return config
