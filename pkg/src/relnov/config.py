"""Flat ``key = value`` config files with sections, mapped onto dataclasses.

Example::

    [model]
    num_blocks = 4

    [train]
    iterations = 2000
    optimizer = sgd
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .model import ModelConfig
from .training import TrainConfig


class ConfigFileError(ValueError):
    pass


@dataclass
class DataConfig:
    setting: str = "intra"
    dims: int = 16
    known_classes: int = 5
    unknown_classes: int = 5
    samples_per_class: int = 100
    class_sep: float = 6.0
    rotation: float = 20.0
    translation: float = 0.5
    seed: int = 0


@dataclass
class BenchConfig:
    seeds: int = 3
    settings: str = "intra,single-source,multi-source"

    @property
    def setting_list(self):
        return [s.strip() for s in self.settings.split(",") if s.strip()]


@dataclass
class RunConfig:
    """Command name, file locations and thread count for one invocation."""
    command: str = ""
    support: str = ""
    test: str = ""
    checkpoint: str = ""
    scores_a: str = ""
    scores_b: str = ""
    metric: str = "relational"
    normalize: bool = False
    out: str = "."
    threads: int = 1


SECTIONS = {
    "run": RunConfig,
    "data": DataConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "bench": BenchConfig,
}


def _coerce(value, typ, where):
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        if typ == "bool":
            low = str(value).lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        return str(value)
    except ValueError:
        raise ConfigFileError(f"{where}: cannot parse {value!r} as {typ}") from None


def read_config_file(path):
    """Parse a config file into {section: {key: raw string}}; unknown names rejected."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise ConfigFileError(f"{path}: {exc}") from None
    out = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigFileError(f"{path}: unknown section [{section}]")
        known = {f.name for f in dataclasses.fields(SECTIONS[section])}
        for key in parser[section]:
            if key not in known:
                raise ConfigFileError(f"{path}: unknown key {key!r} in [{section}]")
        out[section] = dict(parser[section])
    return out


def build_section(section, raw=None, overrides=None):
    """Instantiate the dataclass for ``section`` from raw strings plus overrides."""
    cls = SECTIONS[section]
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    values = {}
    for key, val in (raw or {}).items():
        values[key] = _coerce(val, types[key], f"[{section}] {key}")
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in types:
            raise ConfigFileError(f"unknown key {key!r} for [{section}]")
        values[key] = val
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigFileError(f"[{section}]: {exc}") from None


def format_config(sections):
    """Render {name: dataclass instance} back to the file format (stable order)."""
    lines = []
    for name, obj in sections.items():
        lines.append(f"[{name}]")
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {getattr(obj, f.name)}")
        lines.append("")
    return "\n".join(lines)


def write_resolved(sections, outdir, filename="config.resolved.cfg"):
    path = Path(outdir) / filename
    path.write_text(format_config(sections))
    return path


def as_dict(sections):
    return {name: dataclasses.asdict(obj) for name, obj in sections.items()}
