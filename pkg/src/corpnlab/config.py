"""INI-style lab configuration with strict keys, overrides and a stable hash.

Sections map onto the config dataclasses::

    [world]       WorldConfig fields
    [train]       TrainConfig fields (its ``seed`` is set per run, not here)
    [loss]        LossConfig fields
    [experiment]  method, n_rpns, shots, seed, n_seeds, n_train_scenes, n_test_scenes, phase2
    [ablate]      phis, ns, methods

Unknown sections or keys are errors that name the offending key and line.
All randomness derives from ``experiment.seed``: the run seeds are
``seed, seed + 1, ..., seed + n_seeds - 1``.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields, replace

from .corpn import LossConfig
from .harness import METHODS, ExperimentSpec
from .simworld import WorldConfig
from .train import TrainConfig

FROZEN_TRAIN_KEYS = ("seed",)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    method: str = "corpn"
    n_rpns: int = 5
    shots: int = 1
    seed: int = 0
    n_seeds: int = 20
    n_train_scenes: int = 100
    n_test_scenes: int = 60
    phase2: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be >= 1")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")


@dataclass(frozen=True)
class AblateConfig:
    phis: tuple = (0.1, 0.3, 0.5, 0.7, 0.9)
    ns: tuple = (1, 2, 3, 5, 8)
    methods: tuple = METHODS


@dataclass(frozen=True)
class LabConfig:
    world: WorldConfig = field(default_factory=WorldConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def spec(self, **changes) -> ExperimentSpec:
        e = self.experiment
        spec = ExperimentSpec(method=e.method, n_rpns=e.n_rpns, loss=self.loss, shots=e.shots,
                              seeds=tuple(range(e.seed, e.seed + e.n_seeds)), world=self.world,
                              train=self.train, n_train_scenes=e.n_train_scenes,
                              n_test_scenes=e.n_test_scenes)
        return replace(spec, **changes) if changes else spec

    def resolved(self) -> dict:
        """Every value, defaults included, as ``section.key -> text``."""
        out = {}
        for section in SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                if section == "train" and f.name in FROZEN_TRAIN_KEYS:
                    continue
                out[f"{section}.{f.name}"] = format_value(getattr(obj, f.name))
        return out

    def dumps(self) -> str:
        """Resolved config as an INI file that loads back to an equal config."""
        lines = []
        current = None
        for key, value in self.resolved().items():
            section, name = key.split(".", 1)
            if section != current:
                if current is not None:
                    lines.append("")
                lines.append(f"[{section}]")
                current = section
            lines.append(f"{name} = {value}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        text = "\n".join(f"{k}={v}" for k, v in sorted(self.resolved().items()))
        return hashlib.sha256(text.encode()).hexdigest()


SECTIONS = ("world", "train", "loss", "experiment", "ablate")
_CLASSES = {"world": WorldConfig, "train": TrainConfig, "loss": LossConfig,
            "experiment": ExperimentConfig, "ablate": AblateConfig}


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(format_value(x) for x in v)
    return str(v)


def _parse_scalar(text: str, like):
    text = text.strip()
    if isinstance(like, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(like, int):
        return int(text)
    if isinstance(like, float):
        return float(text)
    return text


def parse_value(text: str, default):
    if isinstance(default, tuple):
        items = [t for t in text.split(",") if t.strip()]
        like = default[0] if default else ""
        return tuple(_parse_scalar(t, like) for t in items)
    return _parse_scalar(text, default)


def _defaults(section: str) -> dict:
    cls = _CLASSES[section]
    obj = cls()
    return {f.name: getattr(obj, f.name) for f in fields(cls)
            if not (section == "train" and f.name in FROZEN_TRAIN_KEYS)}


def _locate(text: str, section: str | None, key: str | None) -> int:
    """Line number (1-based) of a section header or of a key inside a section."""
    current = None
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if key is None and current == section:
                return n
            continue
        if key is not None and current == section and line and line[0] not in "#;":
            name = line.split("=", 1)[0].split(":", 1)[0].strip().lower()
            if name == key:
                return n
    return 0


def _build(values: dict) -> LabConfig:
    parts = {}
    for section in SECTIONS:
        try:
            parts[section] = _CLASSES[section](**values.get(section, {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid [{section}] config: {exc}") from exc
    return LabConfig(**parts)


def loads_config(text: str, overrides=(), source: str = "<config>") -> LabConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    values: dict = {}
    for section in parser.sections():
        if section not in _CLASSES:
            raise ConfigError(f"{source}:{_locate(text, section, None)}: unknown section [{section}]")
        known = _defaults(section)
        for key, raw in parser.items(section):
            line = _locate(text, section, key)
            if key not in known:
                raise ConfigError(f"{source}:{line}: unknown key {key!r} in [{section}]")
            try:
                values.setdefault(section, {})[key] = parse_value(raw, known[key])
            except ValueError as exc:
                raise ConfigError(f"{source}:{line}: bad value for {section}.{key}: {exc}") from exc
    for item in overrides:
        key, sep, raw = item.partition("=")
        key = key.strip()
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        if section not in _CLASSES or name not in _defaults(section):
            raise ConfigError(f"--set: unknown key {key!r}")
        try:
            values.setdefault(section, {})[name] = parse_value(raw, _defaults(section)[name])
        except ValueError as exc:
            raise ConfigError(f"--set: bad value for {key}: {exc}") from exc
    return _build(values)


def load_config(path=None, overrides=()) -> LabConfig:
    if path is None:
        return loads_config("", overrides)
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror or exc}") from exc
    return loads_config(text, overrides, source=str(path))


def from_resolved(resolved: dict) -> LabConfig:
    """Rebuild a config from :meth:`LabConfig.resolved` output."""
    items = [f"{k}={v}" for k, v in resolved.items()]
    return loads_config("", items)
