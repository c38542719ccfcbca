"""Engine configuration: defaults, a flat ``key = value`` file format and
validation."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from typing import Optional

CORPUS_ENV = "AUGSEARCH_CORPUS"


class ConfigError(ValueError):
    pass


@dataclass
class EngineConfig:
    corpus_dir: Optional[str] = None
    delta: float = 0.02
    lam: float = 1e-4
    folds: int = 10
    tau_join: float = 0.7
    tau_union: float = 0.8
    minhash_k: int = 128
    one_hot_max: int = 20
    cache_schemas: int = 64
    cache_plans: int = 1
    candidate_cap: int = 200
    cost_model: Optional[str] = None
    safety_factor: float = 1.5
    trainings: int = 5
    search_fraction: Optional[float] = None
    seed: int = 0

    def validate(self) -> "EngineConfig":
        checks = [
            (0 <= self.delta < 1, "delta must be in [0, 1)"),
            (self.lam >= 0, "lam must be non-negative"),
            (self.folds >= 2, "folds must be at least 2"),
            (0 < self.tau_join <= 1, "tau_join must be in (0, 1]"),
            (0 < self.tau_union <= 1, "tau_union must be in (0, 1]"),
            (self.minhash_k >= 1, "minhash_k must be positive"),
            (self.one_hot_max >= 0, "one_hot_max must be non-negative"),
            (self.cache_schemas >= 0 and self.cache_plans >= 1, "cache sizes must be positive"),
            (self.candidate_cap >= 1, "candidate_cap must be positive"),
            (self.safety_factor >= 1, "safety_factor must be >= 1"),
            (self.trainings >= 1, "trainings must be positive"),
            (self.search_fraction is None or 0 < self.search_fraction <= 1, "search_fraction must be in (0, 1]"),
            (0 <= self.seed < 2 ** 64, "seed must be a 64-bit unsigned integer"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def with_overrides(self, **kw) -> "EngineConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        unknown = set(kw) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return dataclasses.replace(self, **kw).validate()


def _parse_value(raw: str):
    v = raw.strip()
    if len(v) >= 2 and v[0] == v[-1] and v[0] in "\"'":
        return v[1:-1]
    low = v.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null", ""):
        return None
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def _coerce(name: str, value, current):
    f = {f.name: f for f in fields(EngineConfig)}[name]
    typ = str(f.type)
    if value is None:
        if "Optional" not in typ:
            raise ConfigError(f"{name} may not be empty")
        return None
    try:
        if "int" in typ and "Optional" not in typ:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if "float" in typ:
            return float(value)
        if "str" in typ:
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {name}: {value!r}") from None
    return value


def parse_config(text: str, base: Optional[EngineConfig] = None) -> EngineConfig:
    """Parse ``key = value`` lines (``#`` comments, optional ``[section]``
    headers are ignored).  Unknown keys are rejected."""
    cfg = base or EngineConfig()
    known = {f.name for f in fields(EngineConfig)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line or (line.startswith("[") and line.endswith("]")):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, _, val = line.partition("=")
        key = key.strip().replace("-", "_")
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        updates[key] = _coerce(key, _parse_value(val), getattr(cfg, key))
    return dataclasses.replace(cfg, **updates).validate()


def load_config(path: Optional[str] = None, corpus_dir: Optional[str] = None) -> EngineConfig:
    cfg = EngineConfig()
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                cfg = parse_config(fh.read(), cfg)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
    corpus = corpus_dir or cfg.corpus_dir or os.environ.get(CORPUS_ENV)
    return dataclasses.replace(cfg, corpus_dir=corpus).validate()
