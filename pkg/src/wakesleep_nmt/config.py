"""Flat ``section.key = value`` experiment configuration.

Example::

    seed = 7
    run_dir = runs/a1
    task.n_mono = 5000
    model.hidden = 64
    train.lr = 0.002
    wakesleep.iterations = 3

Later assignments win, and command-line overrides are applied last.  A run
manifest (``manifest.json``) is also accepted: its ``config`` object holds
the same flat keys.
"""
from __future__ import annotations

import dataclasses
import json
import os
import typing
from dataclasses import dataclass, field

from .autodiff import TrainHyper
from .seq2seq import ModelConfig
from .synthdata import TaskSpec


class ConfigError(ValueError):
    pass


# keys filled in from the run seed rather than set by hand
_DERIVED = {("task", "seed")}


@dataclass
class DataConfig:
    dir: str | None = None


@dataclass
class BpeConfig:
    enabled: bool = True
    merges: int = 1000


@dataclass
class PhaseConfig:
    iterations: int = 3
    dream_count: int | None = None
    wake_mode: str = "greedy"
    sleep_mode: str = "greedy"
    symmetric: bool = True
    sleep_includes_bitext: bool = True
    temperature: float = 1.0
    epochs: int | None = None  # max epochs per iteration; none -> train.max_epochs


@dataclass
class EvalConfig:
    alpha: float = 0.05
    trials: int = 10000
    lowercase: bool = False
    beam_width: int = 10


def desk_train_hyper():
    """Desk-scale training defaults (published values except batch, lr and dropout)."""
    return TrainHyper(batch_size=32, dropout_prob=0.1, lr=3e-3, max_len=30)


@dataclass
class ExperimentConfig:
    seed: int | None = None
    run_dir: str = "run"
    workers: int = 1
    task: TaskSpec = field(default_factory=TaskSpec)
    data: DataConfig = field(default_factory=DataConfig)
    bpe: BpeConfig = field(default_factory=BpeConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainHyper = field(default_factory=desk_train_hyper)
    wakesleep: PhaseConfig = field(default_factory=PhaseConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    _SECTIONS = ("task", "data", "bpe", "model", "train", "wakesleep", "eval")

    def validate(self):
        if self.seed is None:
            raise ConfigError("seed is mandatory")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.wakesleep.iterations < 0:
            raise ConfigError("wakesleep.iterations must be >= 0")
        if self.wakesleep.epochs is not None and self.wakesleep.epochs < 1:
            raise ConfigError("wakesleep.epochs must be >= 1")
        if self.data.dir is not None and not os.path.isdir(self.data.dir):
            raise ConfigError(f"data.dir {self.data.dir} is not a directory")
        if self.eval.trials < 1000:
            raise ConfigError("eval.trials must be >= 1000")
        for mode in (self.wakesleep.wake_mode, self.wakesleep.sleep_mode):
            if mode not in ("greedy", "sample"):
                raise ConfigError(f"phase decode mode must be greedy or sample, not {mode!r}")
        try:
            # re-run dataclass checks after overrides
            TrainHyper(**dataclasses.asdict(self.train))
            TaskSpec(**dataclasses.asdict(self.task))
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return self

    def flat(self):
        out = {"seed": self.seed, "run_dir": self.run_dir, "workers": self.workers}
        for sec in self._SECTIONS:
            for k, v in dataclasses.asdict(getattr(self, sec)).items():
                if (sec, k) not in _DERIVED:
                    out[f"{sec}.{k}"] = v
        return out


def _coerce(raw, hint, key):
    if isinstance(raw, str):
        text = raw.strip()
    else:
        text = raw
    args = typing.get_args(hint)
    if args and type(None) in args:
        if text is None or (isinstance(text, str) and text.lower() in ("none", "null", "")):
            return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            if isinstance(text, bool):
                return text
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            if isinstance(text, float) and not text.is_integer():
                raise ValueError(text)
            return int(text)
        if hint is float:
            return float(text)
        return str(text)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value {raw!r} for {key}") from e


def _hints(obj):
    return typing.get_type_hints(type(obj))


def set_key(cfg, key, value):
    if "." in key:
        sec, name = key.split(".", 1)
        if sec not in ExperimentConfig._SECTIONS:
            raise ConfigError(f"unknown config section {sec!r}")
        target = getattr(cfg, sec)
        if (sec, name) in _DERIVED:
            raise ConfigError(f"{key} is derived from the run seed and cannot be set")
    else:
        target, name = cfg, key
        if name in ExperimentConfig._SECTIONS or name.startswith("_"):
            raise ConfigError(f"unknown config key {key!r}")
    hints = _hints(target)
    if name not in hints or name.startswith("_"):
        raise ConfigError(f"unknown config key {key!r}")
    setattr(target, name, _coerce(value, hints[name], key))


def parse_text(text):
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs


def load_config(path=None, overrides=()):
    """Build a config from an optional file plus ``(key, value)`` overrides."""
    cfg = ExperimentConfig()
    pairs = []
    if path is not None:
        try:
            with open(path, encoding="utf-8") as f:
                text = f.read()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from e
        if text.lstrip().startswith("{"):
            data = json.loads(text)
            pairs = list(data.get("config", data).items())
        else:
            pairs = parse_text(text)
    for k, v in list(pairs) + list(overrides):
        set_key(cfg, k, v)
    return cfg


def dump_config(cfg):
    lines = []
    for k, v in cfg.flat().items():
        lines.append(f"{k} = {'none' if v is None else v}")
    return "\n".join(lines) + "\n"
