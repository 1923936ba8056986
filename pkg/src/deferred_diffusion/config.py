"""Sectioned key-value run configuration.

A run file looks like::

    [scene]
    num_cameras = 8
    image_size = 64

    [train]
    steps = 20000
    channel_mult = 1, 2, 2

    [eval]
    steps = 50

    [paths]
    corpus = runs/corpus
    checkpoint = runs/avatar.ckpt

``[scene]`` and ``[train]`` keys are the fields of :class:`SceneConfig` and
:class:`TrainConfig`; unknown keys are errors.  Overrides of the form
``section.key=value`` are applied on top of the file.
"""

from __future__ import annotations

import configparser
import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .pipeline import SceneConfig, TrainConfig

SECTIONS = ("scene", "train", "eval", "paths")


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    steps: int = 50
    seed: int = 0
    splits: tuple[str, ...] = ("holdout-view", "holdout-expression")
    camera: int | None = None  # animation camera; default is the held-out one


@dataclass
class RunConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: dict[str, str] = field(default_factory=dict)

    def path(self, key: str, given=None) -> Path:
        value = given if given is not None else self.paths.get(key)
        if value is None:
            raise ConfigError(f"no path given for {key!r} (flag or [paths] {key})")
        return Path(value)

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for name, obj in (("scene", self.scene), ("train", self.train), ("eval", self.eval)):
            cp[name] = {f.name: _format(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        cp["paths"] = dict(self.paths)
        lines = []
        for sec in cp.sections():
            lines.append(f"[{sec}]")
            lines += [f"{k} = {v}" for k, v in cp[sec].items()]
            lines.append("")
        return "\n".join(lines)


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return str(value)


_BOOLS = {"1": True, "yes": True, "true": True, "on": True, "0": False, "no": False, "false": False, "off": False}


def _convert(text: str, tp):
    """Parse ``text`` into the annotated field type ``tp``."""
    text = text.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType) and type(None) in args:
        if text.lower() in ("none", ""):
            return None
        return _convert(text, next(a for a in args if a is not type(None)))
    if origin is tuple:
        item = args[0] if args else str
        return tuple(_convert(t, item) for t in text.split(",") if t.strip())
    if tp is bool:
        if text.lower() not in _BOOLS:
            raise ValueError(f"not a boolean: {text!r}")
        return _BOOLS[text.lower()]
    if tp in (int, float, str):
        return tp(text)
    raise TypeError(f"unsupported field type {tp}")


def _build(cls, values: dict[str, str], section: str):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, text in values.items():
        if key not in known:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        try:
            kwargs[key] = _convert(text, hints[key])
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[{section}] {key}: {e}") from e
    try:
        return cls(**kwargs)
    except ValueError as e:
        raise ConfigError(f"[{section}] {e}") from e


def parse_override(text: str) -> tuple[str, str, str]:
    key, sep, value = text.partition("=")
    section, dot, name = key.strip().partition(".")
    if not sep or not dot or not name:
        raise ConfigError(f"override must look like section.key=value, got {text!r}")
    if section not in SECTIONS:
        raise ConfigError(f"unknown section {section!r} in override {text!r}")
    return section, name, value.strip()


def load_config(path=None, overrides=()) -> RunConfig:
    """Read an optional config file and apply ``section.key=value`` overrides."""
    cp = configparser.ConfigParser(interpolation=None)
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} does not exist")
        try:
            cp.read(path)
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from e
    for sec in cp.sections():
        if sec not in SECTIONS:
            raise ConfigError(f"unknown section [{sec}]")
    values = {s: dict(cp[s]) if cp.has_section(s) else {} for s in SECTIONS}
    for item in overrides:
        section, name, value = parse_override(item)
        values[section][name] = value
    return RunConfig(
        scene=_build(SceneConfig, values["scene"], "scene"),
        train=_build(TrainConfig, values["train"], "train"),
        eval=_build(EvalConfig, values["eval"], "eval"),
        paths=values["paths"],
    )
