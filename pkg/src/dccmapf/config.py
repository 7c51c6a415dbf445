"""Run configuration: defaults < INI file < command-line overrides.

The file is flat ``key = value`` pairs grouped in ``[model]``,
``[training]``, ``[curriculum]`` and ``[evaluation]`` sections. Unknown
sections or keys are errors.
"""
from __future__ import annotations

import configparser
import dataclasses
import json
from dataclasses import dataclass, field, fields
from typing import Any, Mapping

from .model import ModelConfig


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class TrainingConfig:
    seed: int = 0
    runners: int = 16
    mode: str = "dcc"
    batch_size: int = 128
    seq_len: int = 20
    gamma: float = 0.99
    nstep: int = 2
    lr: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 40.0
    alpha: float = 0.6
    beta_start: float = 0.4
    beta_end: float = 1.0
    priority_floor: float = 1e-4
    capacity: int = 2 ** 15
    eps_start: float = 1.0
    eps_end: float = 0.02
    eps_anneal_fraction: float = 0.5
    total_steps: int = 100_000
    target_sync: int = 2000
    snapshot_interval: int = 100
    double_q: bool = True
    burn_in: int = 0
    step_limit: int = 256
    actor_steps_per_update: int = 100
    checkpoint_every: int = 1000
    time_budget: float = 0.0
    log_every: int = 1


@dataclass
class CurriculumConfig:
    start_size: int = 10
    start_agents: int = 1
    size_step: int = 5
    max_size: int = 40
    max_agents: int = 16
    window: int = 100
    threshold: float = 0.9
    # optional early stop: "SIZExAGENTS:RATE", e.g. "10x2:0.8"
    stop_when: str = ""


@dataclass
class EvaluationConfig:
    seed: int = 0
    sizes: tuple[int, ...] = (10, 20, 40)
    agents: tuple[int, ...] = (1, 2, 4, 8)
    extra_agents_40: tuple[int, ...] = (16,)
    cases: int = 50
    density: float = 0.3


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)

    def to_dict(self) -> dict:
        out = {}
        for sec in ("model", "training", "curriculum", "evaluation"):
            d = dataclasses.asdict(getattr(self, sec))
            out[sec] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: Mapping[str, Mapping[str, Any]]) -> "RunConfig":
        cfg = cls()
        for sec, values in d.items():
            for key, value in values.items():
                cfg = _set(cfg, f"{sec}.{key}", value)
        return cfg


_SECTIONS = ("model", "training", "curriculum", "evaluation")


def _coerce(key: str, current: Any, value: Any) -> Any:
    if not isinstance(value, str):
        if isinstance(current, tuple):
            return tuple(int(v) for v in value)
        return type(current)(value)
    text = value.strip()
    try:
        if isinstance(current, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(current, int):
            return int(float(text)) if "e" in text.lower() else int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, tuple):
            return tuple(int(v) for v in text.replace(",", " ").split())
        return text
    except ValueError:
        raise ConfigError(key, f"cannot parse {value!r} as {type(current).__name__}") from None


def _set(cfg: RunConfig, dotted: str, value: Any) -> RunConfig:
    if "." not in dotted:
        raise ConfigError(dotted, "expected section.key")
    sec, key = dotted.split(".", 1)
    if sec not in _SECTIONS:
        raise ConfigError(dotted, f"unknown section {sec!r}")
    block = getattr(cfg, sec)
    names = {f.name for f in fields(block)}
    if key not in names:
        raise ConfigError(dotted, "unknown key")
    new = dataclasses.replace(block, **{key: _coerce(dotted, getattr(block, key), value)})
    return dataclasses.replace(cfg, **{sec: new})


def validate(cfg: RunConfig) -> None:
    t, m = cfg.training, cfg.model
    checks = [
        ("model.fov", m.fov % 2 == 1 and m.fov >= 3, "must be odd and >= 3"),
        ("model.hidden", m.hidden > 0, "must be positive"),
        ("model.heads", m.heads > 0, "must be positive"),
        ("training.mode", t.mode in ("dcc", "rr-n2"), "must be dcc or rr-n2"),
        ("training.batch_size", t.batch_size > 0, "must be positive"),
        ("training.seq_len", t.seq_len > 0, "must be positive"),
        ("training.nstep", t.nstep >= 1, "must be >= 1"),
        ("training.gamma", 0.0 <= t.gamma <= 1.0, "must lie in [0, 1]"),
        ("training.runners", t.runners >= 0, "must be >= 0"),
        ("training.capacity", t.capacity >= t.batch_size, "must be >= batch_size"),
        ("training.alpha", t.alpha >= 0, "must be >= 0"),
        ("training.target_sync", t.target_sync > 0, "must be positive"),
        ("training.snapshot_interval", t.snapshot_interval > 0, "must be positive"),
        ("training.lr", t.lr > 0, "must be positive"),
        ("training.burn_in", t.burn_in >= 0, "must be >= 0"),
        ("curriculum.threshold", 0.0 <= cfg.curriculum.threshold <= 1.0, "must lie in [0, 1]"),
        ("evaluation.cases", cfg.evaluation.cases > 0, "must be positive"),
    ]
    for key, ok, msg in checks:
        if not ok:
            raise ConfigError(key, msg)
    if cfg.curriculum.stop_when:
        parse_stop_when(cfg.curriculum.stop_when)


def parse_stop_when(text: str) -> list[tuple[tuple[int, int], float]]:
    out = []
    for part in text.replace(";", ",").split(","):
        part = part.strip()
        if not part:
            continue
        try:
            task, rate = part.split(":")
            size, agents = task.lower().split("x")
            out.append(((int(size), int(agents)), float(rate)))
        except ValueError:
            raise ConfigError("curriculum.stop_when", f"cannot parse {part!r}; want SIZExAGENTS:RATE") from None
    return out


def load_config(path: str | None = None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except configparser.Error as exc:
            raise ConfigError(str(path), f"malformed config: {exc}") from None
        if parser.defaults():
            raise ConfigError("DEFAULT", "keys outside a section are not allowed")
        for sec in parser.sections():
            for key, value in parser.items(sec):
                cfg = _set(cfg, f"{sec}.{key}", value)
    for key, value in (overrides or {}).items():
        cfg = _set(cfg, key, value)
    validate(cfg)
    return cfg
