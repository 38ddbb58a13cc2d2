"""Run configuration: training settings, both architectures, seed and threshold.

A TOML file maps onto :class:`RunConfig` like this::

    seed = 0
    threshold = 0.5

    [train]
    lr = 5e-4
    batch_size = 128

    [teacher]
    gat_layers = 5

    [student]
    gat_layers = 2

Missing keys keep their defaults; unknown keys are rejected. The effective
config and its hash travel with every artifact the CLI writes.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, InvalidArch
from .model import STUDENT, TEACHER, ArchConfig
from .train import TrainConfig

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

SECTIONS = {"train": TrainConfig, "teacher": ArchConfig, "student": ArchConfig}
SCALARS = ("seed", "threshold")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threshold: float = 0.5
    train: TrainConfig = field(default_factory=TrainConfig)
    teacher: ArchConfig = TEACHER
    student: ArchConfig = STUDENT

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigError(f"threshold must be in [0, 1], got {self.threshold}")

    @property
    def train_config(self) -> TrainConfig:
        """Training settings with the run seed applied."""
        return dataclasses.replace(self.train, seed=self.seed)

    def to_dict(self) -> dict:
        train = self.train.to_dict()
        train.pop("seed")
        return {"seed": self.seed, "threshold": self.threshold, "train": train,
                "teacher": self.teacher.to_dict(), "student": self.student.to_dict()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def to_toml(self) -> str:
        d = self.to_dict()
        lines = [f"seed = {_toml_value(d['seed'])}", f"threshold = {_toml_value(d['threshold'])}"]
        for section in SECTIONS:
            lines += ["", f"[{section}]"]
            lines += [f"{k} = {_toml_value(v)}" for k, v in d[section].items() if v is not None]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        unknown = set(doc) - set(SECTIONS) - set(SCALARS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {k: doc[k] for k in SCALARS if k in doc}
        base = cls()
        for section, klass in SECTIONS.items():
            table = doc.get(section, {})
            if not isinstance(table, dict):
                raise ConfigError(f"[{section}] must be a table")
            names = {f.name for f in dataclasses.fields(klass)}
            bad = set(table) - names - ({"seed"} if section == "train" else set())
            if bad or (section == "train" and "seed" in table):
                raise ConfigError(f"unknown keys in [{section}]: {sorted(bad | ({'seed'} & set(table)))}")
            try:
                kw[section] = dataclasses.replace(getattr(base, section), **table)
            except (TypeError, ValueError, InvalidArch) as exc:
                raise ConfigError(f"[{section}]: {exc}") from None
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def with_overrides(self, overrides: dict[str, object]) -> "RunConfig":
        """Apply ``{"section.key" or "key": value}`` overrides; ``None`` values are ignored."""
        doc = self.to_dict()
        for dotted, value in overrides.items():
            if value is None:
                continue
            section, _, key = dotted.rpartition(".")
            if section:
                if section not in SECTIONS:
                    raise ConfigError(f"unknown config section {section!r}")
                doc[section][key] = value
            else:
                doc[key] = value
        return RunConfig.from_dict(doc)


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    return repr(v)


def parse_assignment(text: str) -> tuple[str, object]:
    """``"train.lr=1e-3"`` -> ``("train.lr", 0.001)``; values use TOML syntax, bare words are strings."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"expected KEY=VALUE, got {text!r}")
    try:
        value = tomllib.loads(f"v = {raw.strip()}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw.strip()
    return key.strip(), value


def load_config(path: Path | str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return RunConfig.from_dict(doc)


def bundled_config(name: str) -> Path:
    path = Path(__file__).with_name("configs") / f"{name}.toml"
    if not path.exists():
        raise ConfigError(f"no bundled config {name!r}")
    return path
