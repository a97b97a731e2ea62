"""Flat experiment configuration: one ``dotted.key = <JSON literal>`` per line.

Blank lines and ``#`` comments are ignored. Every key has a declared type;
unknown keys, duplicates and ill-typed values are rejected. ``dumps`` writes
every key in sorted order, so ``loads(dumps(cfg)) == cfg`` and
``dumps(loads(dumps(cfg)))`` is byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import math
from typing import Any, Mapping

from .errors import ConfigError

# key -> (type tag, default)
SCHEMA: dict[str, tuple[str, Any]] = {
    "seed": ("int", 0),
    "out": ("str", "runs/default"),
    "data.kind": ("str", "gaussian-mixture-8"),
    "data.size": ("int", 20000),
    "data.epsilon": ("float", 0.05),
    "data.split": ("bool", False),
    "data.modalities": ("list[str]", []),
    "model.kind": ("str", "mlp"),
    "model.width": ("int", 256),
    "model.depth": ("int", 8),
    "model.blocks": ("int", 2),
    "model.time_dim": ("int", 16),
    "model.time_slots": ("list[str]", []),
    "schedule.kind": ("str", "rf"),
    "schedule.parameterization": ("str", "velocity"),
    "schedule.time_sampler": ("str", "uniform"),
    "schedule.v_weight": ("str", "exp"),
    "train.lr": ("float", 1e-3),
    "train.warmup": ("int", 100),
    "train.total_steps": ("int", 1000),
    "train.batch_size": ("int", 256),
    "train.ema_decay": ("float", 0.999),
    "train.ema_interval": ("int", 1),
    "train.weight_decay": ("float", 0.0),
    "train.checkpoint_every": ("int", 0),
    "train.tasks": ("list[str]", ["joint"]),
    "train.task_weights": ("dict[str,float]", {}),
    "sample.steps": ("int", 50),
    "sample.shift": ("float", 3.0),
    "sample.count": ("int", 1000),
    "sample.task": ("str", "joint"),
    "sample.guidance": ("list[str]", []),
    "sample.chunk": ("int", 10000),
    "eval.threshold": ("float", 0.1),
    "bench.variants": ("list[str]", ["eps/linear", "v/cos", "v/linear", "rf/uniform", "rf/lognorm"]),
    "bench.heldout": ("int", 10000),
    "bench.sample_count": ("int", 10000),
    "bench.sample_steps": ("int", 100),
    "bench.sample_shift": ("float", 1.0),
}


def _check(key: str, value: Any) -> Any:
    tag = SCHEMA[key][0]
    bad = ConfigError(f"{key}: expected {tag}, got {value!r}")
    if tag == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise bad
        return value
    if tag == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise bad
        value = float(value)
        if not math.isfinite(value):
            raise bad
        return value
    if tag == "str":
        if not isinstance(value, str):
            raise bad
        return value
    if tag == "bool":
        if not isinstance(value, bool):
            raise bad
        return value
    if tag == "list[str]":
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise bad
        return list(value)
    if tag == "dict[str,float]":
        if not isinstance(value, dict):
            raise bad
        out = {}
        for k, v in value.items():
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise bad
            out[str(k)] = float(v)
        return out
    raise AssertionError(tag)


class ExperimentConfig:
    """Typed view over the flat key set in :data:`SCHEMA`."""

    def __init__(self, values: Mapping[str, Any] | None = None):
        self._values = {k: _check(k, d) for k, (_, d) in SCHEMA.items()}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value: Any) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        self._values[key] = _check(key, value)

    def __getitem__(self, key: str) -> Any:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        return self._values[key]

    def __eq__(self, other) -> bool:
        return isinstance(other, ExperimentConfig) and self._values == other._values

    def as_dict(self) -> dict[str, Any]:
        return dict(self._values)

    def identity(self) -> str:
        """Canonical text without ``out``: where a run is written does not change what it computes."""
        return "".join(ln + "\n" for ln in dumps(self).splitlines() if not ln.startswith("out ="))

    def digest(self) -> str:
        return hashlib.sha256(self.identity().encode()).hexdigest()[:16]

    def section(self, prefix: str) -> dict[str, Any]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self._values.items() if k.startswith(p)}


def dumps(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {json.dumps(v, sort_keys=True)}\n" for k, v in sorted(cfg.as_dict().items()))


def loads(text: str) -> ExperimentConfig:
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, literal = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        try:
            values[key] = json.loads(literal.strip())
        except json.JSONDecodeError as e:
            raise ConfigError(f"line {lineno}: {key}: value is not a JSON literal ({e.msg})") from None
    return ExperimentConfig(values)


def load(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as f:
            return loads(f.read())
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None


def save(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dumps(cfg))
