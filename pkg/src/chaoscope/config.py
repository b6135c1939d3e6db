"""Run configuration: a versioned TOML document describing one probe run.

Example::

    schema_version = 1
    output_dir = "out/sweep"
    plot = true

    [model]
    seed = 1
    precision = "fp32"

    [point]
    seed = 0

    [probe]
    kind = "directional_sweep"
    directions = "random:5"
    eps_min = 1e-14
    eps_max = 0.1
    n_eps = 40
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace
from pathlib import Path

import tomli
import tomli_w

from .model import ModelConfig
from .numerics import PrecisionMode, ReductionOrder

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    """Malformed or incomplete run configuration."""


# Per-probe parameters and defaults; symbolic strings are resolved at run time.
PROBE_DEFAULTS: dict[str, dict] = {
    "directional_sweep": {
        "directions": "random:20", "direction_seed": 0,
        "eps_min": 1e-14, "eps_max": 1e-1, "n_eps": 120,
        "chaos": 10.0, "signal_low": 0.1, "signal_high": 10.0,
    },
    "layerwise_gain": {"directions": "spanning:8", "direction_seed": 0, "eps": 1e-3},
    "instability_sweep": {
        "direction": "v1", "direction_seed": 0, "start": "boundary", "delta": 1e-13, "n_points": 1000,
    },
    "micro_continuity": {
        "direction": "v1", "direction_seed": 0, "start": "boundary", "delta": 1e-13, "n_steps": 1000,
    },
    "decision_map": {"plane": [1, 2], "eps_range": 1e-8, "step": 2e-10, "tie_tolerance": 1e-4},
    "angular_boundary": {"plane": [1, 2], "n_angles": 360, "s_init": 1e-14, "s_cap": 1.0},
    "spectrum_boundary": {"indices": "all", "s_init": 1e-14, "s_cap": 1.0},
    "noise_averaged_kappa": {
        "direction": "v1", "direction_seed": 0, "eps": "chaotic", "n_samples": [1, 10, 100],
        "repeats": 10, "noise_mag": 1e-9,
    },
}

PROBE_KINDS = tuple(PROBE_DEFAULTS)

_MODEL_KEYS = {f for f in ModelConfig.__dataclass_fields__}
_TOP_KEYS = {"schema_version", "output_dir", "plot", "model", "point", "probe"}


@dataclass(frozen=True)
class PointConfig:
    seed: int = 0
    scale: float = 0.02
    perturb_position: int = -1

    def to_dict(self) -> dict:
        return {"seed": self.seed, "scale": self.scale, "perturb_position": self.perturb_position}


@dataclass(frozen=True)
class ProbeConfig:
    kind: str
    params: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.params[key]

    def to_dict(self) -> dict:
        return {"kind": self.kind, **copy.deepcopy(self.params)}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    probe: ProbeConfig
    output_dir: str
    point: PointConfig = field(default_factory=PointConfig)
    plot: bool = True
    schema_version: int = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "output_dir": self.output_dir,
            "plot": self.plot,
            "model": self.model.to_dict(),
            "point": self.point.to_dict(),
            "probe": self.probe.to_dict(),
        }

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def with_precision(self, precision) -> RunConfig:
        return replace(self, model=replace(self.model, precision=PrecisionMode.parse(precision)))


def _check_type(name, value, types):
    if isinstance(value, bool) and bool not in types:
        raise ConfigError(f"field '{name}' has type bool, expected {types[0].__name__}")
    if not isinstance(value, types):
        raise ConfigError(f"field '{name}' has type {type(value).__name__}, expected {types[0].__name__}")
    return value


def _unknown(section: str, keys, allowed):
    extra = sorted(set(keys) - set(allowed))
    if extra:
        where = f"{section}." if section else ""
        raise ConfigError(f"unknown field '{where}{extra[0]}'")


def _table(doc, name) -> dict:
    if name not in doc:
        raise ConfigError(f"missing required table '[{name}]'")
    if not isinstance(doc[name], dict):
        raise ConfigError(f"field '{name}' must be a table")
    return doc[name]


def _parse_model(raw: dict) -> ModelConfig:
    _unknown("model", raw, _MODEL_KEYS)
    if "seed" not in raw:
        raise ConfigError("missing required field 'model.seed'")
    kw = {}
    for key, value in raw.items():
        name = f"model.{key}"
        if key in ("precision", "reduction"):
            _check_type(name, value, (str,))
            try:
                kw[key] = PrecisionMode.parse(value) if key == "precision" else ReductionOrder.parse(value)
            except ValueError as exc:
                raise ConfigError(f"field '{name}': {exc}") from None
        else:
            kw[key] = _check_type(name, value, (int,))
    try:
        return ModelConfig(**kw)
    except ValueError as exc:
        raise ConfigError(f"[model]: {exc}") from None


def _parse_point(raw: dict) -> PointConfig:
    _unknown("point", raw, PointConfig.__dataclass_fields__)
    out = PointConfig()
    if "seed" in raw:
        out = replace(out, seed=_check_type("point.seed", raw["seed"], (int,)))
    if "scale" in raw:
        scale = float(_check_type("point.scale", raw["scale"], (float, int)))
        if not scale > 0:
            raise ConfigError("field 'point.scale' must be positive")
        out = replace(out, scale=scale)
    if "perturb_position" in raw:
        out = replace(out, perturb_position=_check_type("point.perturb_position", raw["perturb_position"], (int,)))
    return out


def _coerce_param(name, value, default):
    number = isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, str):
        # symbolic defaults ("boundary", "chaotic", "all", "random:20") accept
        # another keyword, a number, or an explicit list
        if isinstance(value, str) or isinstance(value, list):
            return value
        if number:
            return float(value)
    elif isinstance(default, float):
        if number:
            return float(value)
    elif isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, list):
        if isinstance(value, list):
            return value
    raise ConfigError(f"field '{name}' has type {type(value).__name__}, expected {type(default).__name__}")


def _parse_probe(raw: dict) -> ProbeConfig:
    if "kind" not in raw:
        raise ConfigError("missing required field 'probe.kind'")
    kind = _check_type("probe.kind", raw["kind"], (str,))
    if kind not in PROBE_DEFAULTS:
        raise ConfigError(f"field 'probe.kind': unknown probe {kind!r} (expected one of {', '.join(PROBE_KINDS)})")
    defaults = PROBE_DEFAULTS[kind]
    params = {k: v for k, v in raw.items() if k != "kind"}
    _unknown("probe", params, defaults)
    merged = copy.deepcopy(defaults)
    for key, value in params.items():
        merged[key] = _coerce_param(f"probe.{key}", value, defaults[key])
    return ProbeConfig(kind, merged)


def config_from_dict(doc: dict) -> RunConfig:
    _unknown("", doc, _TOP_KEYS)
    if "schema_version" not in doc:
        raise ConfigError("missing required field 'schema_version'")
    version = _check_type("schema_version", doc["schema_version"], (int,))
    if version != SCHEMA_VERSION:
        raise ConfigError(f"field 'schema_version': unsupported version {version} (this build reads {SCHEMA_VERSION})")
    if "output_dir" not in doc:
        raise ConfigError("missing required field 'output_dir'")
    output_dir = _check_type("output_dir", doc["output_dir"], (str,))
    plot = _check_type("plot", doc.get("plot", True), (bool,))
    model = _parse_model(_table(doc, "model"))
    point = _parse_point(doc.get("point", {}))
    probe = _parse_probe(_table(doc, "probe"))
    return RunConfig(model, probe, output_dir, point, plot, version)


def loads(text: str) -> RunConfig:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"syntax error: {exc}") from None
    return config_from_dict(doc)


def load(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        return loads(text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def dumps(config: RunConfig) -> str:
    return config.to_toml()
