"""Experiment configuration.

Text format: ``key = value`` lines, ``#`` comments, and optional
``[iter N]`` sections overriding stage-2 settings for iteration N::

    seed = 3
    n_iterations = 3
    n_pseudo = 60

    [iter 3]
    margin_variant = angular
    margin = 0.3
    init_from_previous = false
    concat_labels = true

Top-level keys are the fields of :class:`SynthConfig`, :class:`Stage1Config`,
:class:`IterationConfig` (defaults for every iteration), the cohort keys
``cohort_size``/``cohort_seed``/``drop_top``/``use_top``, and ``seed``,
``n_iterations``, ``n_pseudo``, ``kmeans_k``, ``fusion``.
"""

from __future__ import annotations

import configparser
import dataclasses
import importlib.resources
import typing
from dataclasses import dataclass, field
from typing import Optional

from ..scoring import CohortConfig
from .synth import SynthConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Stage1Config:
    emb_dim: int = 256
    hidden_dim: int = 0
    chunk_frames: int = 40
    stage1_epochs: int = 20
    stage1_batch: int = 64
    stage1_lr: float = 0.0125
    contrastive_scale: float = 10.0
    queue_capacity: int = 65536
    moco_momentum: float = 0.999


@dataclass(frozen=True)
class IterationConfig:
    """Stage-2 settings; every field can be overridden per iteration."""

    nominal_lr: float = 0.0125
    epochs: int = 10
    batch_size: int = 64
    loss: str = "bitempered"
    margin_variant: str = "subtractive"
    margin: float = 0.2
    scale: float = 40.0
    t1: float = 0.9
    t2: float = 1.1
    init_from_previous: bool = True
    concat_labels: bool = False
    chunk_scale: float = 1.0
    agreement_downweight: float = 1.0


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    n_iterations: int = 3
    n_pseudo: int = 60
    kmeans_k: Optional[int] = None
    n_copies: int = 3
    iteration: IterationConfig = field(default_factory=IterationConfig)
    overrides: tuple = ()  # ((iteration, ((key, value), ...)), ...)
    cohort: CohortConfig = field(default_factory=lambda: CohortConfig(size=300))
    fusion: tuple = ()

    def __post_init__(self):
        if self.n_iterations < 0:
            raise ConfigError("n_iterations must be >= 0")
        for it, _ in self.overrides:
            if not 1 <= it <= self.n_iterations:
                raise ConfigError(f"override for iteration {it} outside 1..{self.n_iterations}")
        for name in self.fusion:
            _parse_system_name(name, self.n_iterations)

    def for_iteration(self, it: int) -> IterationConfig:
        cfg = self.iteration
        for i, items in self.overrides:
            if i == it:
                cfg = dataclasses.replace(cfg, **dict(items))
        return cfg

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Same experiment under another master seed (data and cohort follow)."""
        return dataclasses.replace(self, seed=seed, synth=dataclasses.replace(self.synth, seed=seed),
                                   cohort=dataclasses.replace(self.cohort, seed=seed))

    def to_text(self) -> str:
        lines = [f"seed = {self.seed}"]
        for obj in (self.synth, self.stage1, self.iteration):
            for f in dataclasses.fields(obj):
                if obj is self.synth and f.name == "seed":
                    continue  # always the top-level seed
                lines.append(f"{f.name} = {_fmt(getattr(obj, f.name))}")
        lines += [f"n_iterations = {self.n_iterations}", f"n_pseudo = {self.n_pseudo}",
                  f"kmeans_k = {_fmt(self.kmeans_k)}", f"n_copies = {self.n_copies}",
                  f"cohort_size = {self.cohort.size}", f"cohort_seed = {self.cohort.seed}",
                  f"drop_top = {self.cohort.drop_top}", f"use_top = {self.cohort.use_top}",
                  f"fusion = {' '.join(self.fusion)}"]
        for it, items in self.overrides:
            lines.append(f"[iter {it}]")
            lines += [f"{k} = {_fmt(v)}" for k, v in items]
        return "\n".join(lines) + "\n"


def _parse_system_name(name: str, n_iterations: int):
    """``iter<N><A|B>`` -> (N, network)."""
    if not (name.startswith("iter") and name[-1:] in ("A", "B") and name[4:-1].isdigit()):
        raise ConfigError(f"bad fusion system name {name!r} (expected e.g. iter3A)")
    it = int(name[4:-1])
    if not 1 <= it <= n_iterations:
        raise ConfigError(f"fusion system {name!r} refers to a missing iteration")
    return it, name[-1]


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _convert(key: str, raw: str, typ):
    raw = raw.strip()
    origin = typing.get_origin(typ)
    if origin is typing.Union:
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if raw.lower() == "none":
            return None
        typ = args[0]
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _fields(cls):
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


_COHORT_KEYS = {"cohort_size": "size", "cohort_seed": "seed", "drop_top": "drop_top",
                "use_top": "use_top"}


def parse_config(text: str) -> PipelineConfig:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#",),
                                       inline_comment_prefixes=("#",), delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string("[__top__]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    groups = {"synth": _fields(SynthConfig), "stage1": _fields(Stage1Config),
              "iteration": _fields(IterationConfig)}
    top_types = {"seed": int, "n_iterations": int, "n_pseudo": int,
                 "kmeans_k": Optional[int], "n_copies": int}
    values = {g: {} for g in groups}
    top, cohort = {}, {}
    fusion = ()
    for key, raw in parser["__top__"].items():
        if key == "fusion":
            fusion = tuple(raw.split())
        elif key in _COHORT_KEYS:
            cohort[_COHORT_KEYS[key]] = _convert(key, raw, int)
        elif key in top_types:
            top[key] = _convert(key, raw, top_types[key])
        else:
            for g, types in groups.items():
                if key in types:
                    values[g][key] = _convert(key, raw, types[key])
                    break
            else:
                raise ConfigError(f"unknown config key {key!r}")
    overrides = []
    for section in parser.sections():
        if section == "__top__":
            continue
        parts = section.split()
        if len(parts) != 2 or parts[0] != "iter" or not parts[1].isdigit():
            raise ConfigError(f"bad section [{section}] (expected [iter N])")
        items = []
        for key, raw in parser[section].items():
            if key not in groups["iteration"]:
                raise ConfigError(f"key {key!r} cannot be overridden per iteration")
            items.append((key, _convert(key, raw, groups["iteration"][key])))
        overrides.append((int(parts[1]), tuple(items)))
    seed = top.pop("seed", 0)
    values["synth"]["seed"] = seed
    cohort.setdefault("seed", seed)
    cohort.setdefault("size", 300)
    try:
        return PipelineConfig(seed=seed, synth=SynthConfig(**values["synth"]),
                              stage1=Stage1Config(**values["stage1"]),
                              iteration=IterationConfig(**values["iteration"]),
                              overrides=tuple(sorted(overrides)),
                              cohort=CohortConfig(**cohort), fusion=fusion, **top)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> PipelineConfig:
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())


def default_config_text() -> str:
    """Text of the shipped desk-scale experiment."""
    return importlib.resources.files(__package__).joinpath("default.cfg").read_text("utf-8")


def default_config() -> PipelineConfig:
    return parse_config(default_config_text())
