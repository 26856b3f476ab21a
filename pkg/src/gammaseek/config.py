"""One key=value configuration file shared by every subcommand.

Keys are ``section.field`` where the section names a component config
(``env``, ``scan``, ``train``, ``eval``, ``ablation``, ``hybrid``) and the
field is one of its dataclass fields. Values are Python literals; bare words
are taken as strings. Blank lines and ``#`` comments are ignored.

    env.sigma = 50
    train.total_steps = 200000
    eval.sigmas = (30, 50, 70)
"""

from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .env import EnvConfig
from .policy import TrainConfig
from .scanner import ScanConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(message if line is None else f"line {line}: {message}")


@dataclass(frozen=True)
class EvalConfig:
    n_trials: int = 100
    seed: int = 0
    sigmas: tuple[float, ...] = (30.0, 50.0, 70.0)
    scan_max_steps: int = 1000  # scan-only runs have their own, longer budget
    scan_noise: str = "none"

    def __post_init__(self):
        if self.n_trials < 1:
            raise ValueError("n_trials must be at least 1")
        if not self.sigmas:
            raise ValueError("sigmas must not be empty")


@dataclass(frozen=True)
class AblationConfig:
    seeds: tuple[int, ...] = (0, 1, 2)
    variants: tuple[str, ...] = ("distance", "signal", "composite")
    final_window: int = 3  # curve points averaged for the final success rate
    phase1_init: bool = True  # train from emulated scan hand-offs, as the hybrid policy is

    def __post_init__(self):
        if len(self.seeds) < 3:
            raise ValueError("the ablation needs at least 3 seeds per variant")


@dataclass(frozen=True)
class HybridSettings:
    total_cap: int = 150


def desk_train_config() -> TrainConfig:
    """Training budget sized for a single CPU core (a few minutes per run)."""
    return TrainConfig(
        total_steps=200_000,
        n_envs=64,
        rollout_steps=128,
        minibatch_size=1024,
        epochs=10,
        entropy_coef=0.0,  # deterministic evaluation favours a policy that narrows quickly
        init_log_std=-1.0,
    )


@dataclass(frozen=True)
class RunConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    scan: ScanConfig = field(default_factory=ScanConfig)
    train: TrainConfig = field(default_factory=desk_train_config)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    hybrid: HybridSettings = field(default_factory=HybridSettings)

    def env_config(self, **overrides) -> EnvConfig:
        """Env config carrying this run's scan settings."""
        return replace(self.env, scan=self.scan, **overrides)

    def with_overrides(self, pairs: dict[str, object]) -> "RunConfig":
        out = self
        for key, value in pairs.items():
            out = _apply(out, key, value, None)
        return out


SECTIONS = tuple(f.name for f in fields(RunConfig))
# nested objects that are not plain values stay out of the file format
_OPAQUE = {("env", "params"), ("env", "arm"), ("env", "scan")}


def _parse_value(text: str, line: int | None):
    text = text.strip()
    if not text:
        raise ConfigError("missing value", line)
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        if any(c in text for c in "()[]{},'\""):
            raise ConfigError(f"unparseable value {text!r}", line) from None
        return text


def _coerce(value, current, key: str, line: int | None):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}", line)
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} expects an integer, got {value!r}", line)
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}", line)
        return float(value)
    if isinstance(current, tuple):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            value = (value,)
        if not isinstance(value, (tuple, list)):
            raise ConfigError(f"{key} expects a tuple, got {value!r}", line)
        kind = type(current[0]) if current else None
        if kind is float:
            return tuple(float(v) for v in value)
        return tuple(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} expects a string, got {value!r}", line)
        return value
    raise ConfigError(f"{key} cannot be set from a config file", line)


def _apply(cfg: RunConfig, key: str, value, line: int | None) -> RunConfig:
    section, _, name = key.partition(".")
    if section not in SECTIONS or not name:
        raise ConfigError(f"unknown key {key!r}; keys look like section.field with section in {SECTIONS}", line)
    sub = getattr(cfg, section)
    names = {f.name for f in fields(sub)}
    if name not in names or (section, name) in _OPAQUE:
        raise ConfigError(f"unknown key {key!r}", line)
    if isinstance(value, str) and not isinstance(getattr(sub, name), str):
        value = _parse_value(value, line)
    value = _coerce(value, getattr(sub, name), key, line)
    try:
        new_sub = replace(sub, **{name: value})
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{key}: {exc}", line) from None
    return replace(cfg, **{section: new_sub})


def parse_config(text: str) -> RunConfig:
    cfg = RunConfig()
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value, got {raw.strip()!r}", lineno)
        key, _, value = line.partition("=")
        key = key.strip()
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (first set on line {seen[key]})", lineno)
        seen[key] = lineno
        cfg = _apply(cfg, key, _parse_value(value, lineno), lineno)
    return cfg


def load_config(path) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text)


def dump_config(cfg: RunConfig) -> str:
    """Every settable key with its value; parses back to an equal config."""
    lines = []
    for section in SECTIONS:
        sub = getattr(cfg, section)
        for f in fields(sub):
            if (section, f.name) in _OPAQUE:
                continue
            lines.append(f"{section}.{f.name} = {getattr(sub, f.name)!r}")
    return "\n".join(lines) + "\n"


def as_dict(cfg: RunConfig) -> dict:
    return {s: {k: v for k, v in dataclasses.asdict(getattr(cfg, s)).items() if (s, k) not in _OPAQUE} for s in SECTIONS}
