"""Typed INI run configuration.

Each section maps to a dataclass; values are parsed by the field's type
(lists and optional values as JSON).  ``dump`` followed by ``load`` gives back
an equal ``RunConfig``.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .datagen import DEFAULT_PALETTE
from .model import ACTIVATIONS, Activation

STRATEGIES = ("erm", "cb", "gb", "spare", "jtt", "gdro")
THEORY_CHECKS = ("phase1", "separability", "phase2", "assumption")


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


@dataclass
class DatasetSection:
    source: str = "synthetic"
    # synthetic
    d: int = 100
    core_magnitude: float = 1.0
    spurious_magnitude: float = 2.0
    core_sigma: float = 0.1
    spurious_sigma: float = 0.1
    ambient_sigma: float = 1.0
    majority: int = 950
    minority: int = 50
    balanced_spurious: bool = False
    rotate: bool = False
    test_per_group: int = 200
    # cmnist
    mnist_dir: str = ""
    p_corr: float = 0.995
    test_p_corr: float = 0.2
    palette: list = field(default_factory=lambda: list(DEFAULT_PALETTE))
    subset: int | None = None
    test_fraction: float = 0.2


@dataclass
class ModelSection:
    m: int = 2000
    activation: str = "relu"
    o: int = 0  # 0: one output for two classes (l2), else one per class


@dataclass
class TrainSection:
    eta: float = 0.05
    epochs: int = 20
    steps: int = 0
    batch_size: int = 0  # 0 means full batch
    loss: str = "l2"
    weight_decay: float = 0.0
    parametrization: str = "ntk"


@dataclass
class SpareSection:
    T_init: int = 2
    layer_tag: str = "last_layer_outputs"
    k_range: list = field(default_factory=lambda: [2, 3, 4, 5])
    lambda_override: int | None = None
    output_norm: str = "none"
    class_mix: str = "frequency"
    normalization: str = "per_class"
    reinit: bool = True
    jtt_factor: int = 20
    jtt_flags: str = "misclassified"
    gdro_eta_q: float = 0.01
    gdro_groups: str = "true"


@dataclass
class TheorySection:
    checks: list = field(default_factory=lambda: list(THEORY_CHECKS))
    net_seed: int = 1
    alpha: float = 0.1
    c2: float = 1.0
    slope_tolerance: float = 0.15
    separability_step: int | None = None
    separability_min: float = 0.95
    domination_min: float = 5.0
    bound_slack: float = 0.1
    assumption_steps: int = 100
    gap_tolerance: float = 0.01


@dataclass
class RunSection:
    strategy: str = "erm"
    seed: int = 0
    strict_determinism: bool = False


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    spare: SpareSection = field(default_factory=SpareSection)
    theory: TheorySection = field(default_factory=TheorySection)

    def validate(self) -> "RunConfig":
        ds, mo, tr, sp, ru = self.dataset, self.model, self.train, self.spare, self.run
        if ds.source not in ("synthetic", "cmnist"):
            raise ConfigError(f"dataset.source must be 'synthetic' or 'cmnist', got {ds.source!r}")
        if ru.strategy not in STRATEGIES:
            raise ConfigError(f"run.strategy must be one of {STRATEGIES}, got {ru.strategy!r}")
        if mo.m < 2 or mo.m % 2:
            raise ConfigError(f"model.m must be a positive even number (symmetric init), got {mo.m}")
        try:
            Activation.parse(mo.activation)
        except ValueError as exc:
            raise ConfigError(f"model.activation: {exc}") from None
        if tr.eta <= 0:
            raise ConfigError(f"train.eta must be positive, got {tr.eta}")
        if tr.loss not in ("l2", "cross_entropy"):
            raise ConfigError(f"train.loss must be 'l2' or 'cross_entropy', got {tr.loss!r}")
        if tr.parametrization not in ("ntk", "standard"):
            raise ConfigError(f"train.parametrization must be 'ntk' or 'standard', got {tr.parametrization!r}")
        if tr.batch_size < 0:
            raise ConfigError("train.batch_size must be >= 0")
        if ru.strategy in ("spare", "jtt", "gdro", "cb", "gb") and tr.batch_size == 0:
            raise ConfigError(f"train.batch_size must be positive for strategy {ru.strategy!r}")
        if ds.source == "cmnist" and not 0 < ds.p_corr <= 1:
            raise ConfigError(f"dataset.p_corr must be in (0, 1], got {ds.p_corr}")
        if ds.source == "cmnist" and len(ds.palette) != 5:
            raise ConfigError("dataset.palette needs 5 colors")
        if not sp.k_range or min(sp.k_range) < 1:
            raise ConfigError("spare.k_range must be a nonempty list of positive integers")
        if sp.layer_tag not in ("last_layer_outputs", "penultimate_features"):
            raise ConfigError(f"spare.layer_tag unknown: {sp.layer_tag!r}")
        if sp.output_norm not in ("none", "l2"):
            raise ConfigError(f"spare.output_norm must be 'none' or 'l2', got {sp.output_norm!r}")
        if sp.normalization not in ("per_class", "global"):
            raise ConfigError(f"spare.normalization must be 'per_class' or 'global', got {sp.normalization!r}")
        if sp.class_mix not in ("frequency", "uniform"):
            raise ConfigError(f"spare.class_mix must be 'frequency' or 'uniform', got {sp.class_mix!r}")
        if sp.jtt_factor < 1:
            raise ConfigError("spare.jtt_factor must be >= 1")
        if sp.jtt_flags not in ("misclassified", "clusters"):
            raise ConfigError(f"spare.jtt_flags must be 'misclassified' or 'clusters', got {sp.jtt_flags!r}")
        if sp.gdro_groups not in ("true", "inferred"):
            raise ConfigError(f"spare.gdro_groups must be 'true' or 'inferred', got {sp.gdro_groups!r}")
        if sp.T_init < 0:
            raise ConfigError("spare.T_init must be >= 0")
        bad = set(self.theory.checks) - set(THEORY_CHECKS)
        if bad:
            raise ConfigError(f"theory.checks has unknown entries {sorted(bad)}")
        if not 0 < self.theory.alpha < 0.25:
            raise ConfigError(f"theory.alpha must lie in (0, 1/4), got {self.theory.alpha}")
        return self


_SECTIONS = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _coerce(section: str, key: str, raw: str, tp):
    origin = typing.get_origin(tp)
    try:
        if tp is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if tp is str:
            return raw
        if tp is list or origin is list:
            val = json.loads(raw)
            if not isinstance(val, list):
                raise ValueError("expected a JSON list")
            return val
        if origin is typing.Union or str(origin) == "<class 'types.UnionType'>":
            args = [a for a in typing.get_args(tp) if a is not type(None)]
            if raw.strip().lower() in ("", "none", "null"):
                return None
            return _coerce(section, key, raw, args[0])
    except (ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"{section}.{key}: {exc}") from None
    raise ConfigError(f"{section}.{key}: unsupported type {tp}")


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return json.dumps(value)
    return str(value)


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    cfg = RunConfig()
    for name in cp.sections():
        if name not in _SECTIONS:
            raise ConfigError(f"unknown section [{name}]")
        sec = getattr(cfg, name)
        hints = typing.get_type_hints(type(sec))
        for key, raw in cp.items(name):
            if key not in hints:
                raise ConfigError(f"{name}.{key}: unknown field")
            setattr(sec, key, _coerce(name, key, raw, hints[key]))
    return cfg.validate()


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def dump_config(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for name in _SECTIONS:
        sec = getattr(cfg, name)
        cp[name] = {f.name: _format(getattr(sec, f.name)) for f in dataclasses.fields(sec)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def activations_help() -> str:
    return ", ".join(ACTIVATIONS)
