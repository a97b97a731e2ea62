"""Modalities and task paths through the per-modality time cube.

A task is a straight segment in ``[0, 1]^n``: ``end`` is the data side
(``t = 0`` along the path) and ``start`` the noise side (``t = 1``).
Coordinates that are 0 at both ends are conditioning inputs, coordinates
that are 1 at both ends are ignored modalities held at pure noise.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, DomainError


@dataclass(frozen=True)
class ModalitySpec:
    name: str
    shape: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if not self.name or not re.fullmatch(r"[A-Za-z_][A-Za-z0-9_]*", self.name):
            raise ConfigError(f"invalid modality name {self.name!r}")
        if not 1 <= len(self.shape) <= 2 or any(s <= 0 for s in self.shape):
            raise ConfigError(f"modality {self.name}: shape must be (dim,) or (tokens, channels), got {self.shape}")

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def tokens(self) -> int:
        return 1 if len(self.shape) == 1 else self.shape[0]

    @property
    def channels(self) -> int:
        return self.shape[-1]


def check_specs(specs: Sequence[ModalitySpec]) -> list[ModalitySpec]:
    specs = list(specs)
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate modality names in {names}")
    if not specs:
        raise ConfigError("at least one modality is required")
    return specs


@dataclass(frozen=True)
class TaskPath:
    start: tuple[float, ...]
    end: tuple[float, ...]
    name: str = ""

    def __post_init__(self):
        start = tuple(float(v) for v in self.start)
        end = tuple(float(v) for v in self.end)
        object.__setattr__(self, "start", start)
        object.__setattr__(self, "end", end)
        if len(start) != len(end):
            raise ConfigError(f"path endpoints have different lengths: {start} vs {end}")
        if any(not 0.0 <= v <= 1.0 for v in start + end):
            raise ConfigError(f"path coordinates must lie in [0, 1]: {start} -> {end}")
        if not self.name:
            object.__setattr__(self, "name", format_path(start, end))

    @property
    def dim(self) -> int:
        return len(self.start)

    def moving(self) -> list[int]:
        return [i for i, (s, e) in enumerate(zip(self.start, self.end)) if s != e]

    def pinned_clean(self) -> list[int]:
        return [i for i, (s, e) in enumerate(zip(self.start, self.end)) if s == e == 0.0]

    def speed(self, i: int) -> float:
        """|d t_i / d t| along the path."""
        return abs(self.start[i] - self.end[i])


def path_eval(path: TaskPath, t):
    """Per-modality times at path parameter ``t``; a scalar ``t`` gives a tuple.

    An array of ``t`` gives a list with one array per coordinate.
    """
    arr = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(arr)) or np.any(arr < 0.0) or np.any(arr > 1.0):
        raise DomainError(f"path parameter must lie in [0, 1], got {t}")
    out = []
    for s, e in zip(path.start, path.end):
        if s == e:
            out.append(np.full_like(arr, e) if arr.ndim else e)
        else:
            out.append(e + arr * (s - e))
    if arr.ndim == 0:
        return tuple(float(v) for v in out)
    return out


def format_path(start, end) -> str:
    fmt = lambda xs: "[" + ",".join(f"{v:g}" for v in xs) + "]"  # noqa: E731
    return f"path(start={fmt(start)},end={fmt(end)})"


# Letters in named tasks refer to these modality names.
_LETTERS = {"i": "image", "t": "text", "a": "audio"}
NAMED_TASKS = ("t2i", "i2t", "t2a", "a2t", "a2i", "i2a", "joint", "t2ia")
_LITERAL = re.compile(r"^path\(\s*start\s*=\s*(\[[^\]]*\])\s*,\s*end\s*=\s*(\[[^\]]*\])\s*\)$")


def task_path(name: str, names: Sequence[str]) -> TaskPath:
    """Resolve a task name over an ordered list of modality names.

    ``joint`` generates every modality from noise. ``X2Y`` holds the modalities
    spelled by letters ``X`` clean, generates ``Y``, and keeps the rest at noise.
    A literal ``path(start=[..],end=[..])`` is taken verbatim.
    """
    names = list(names)
    n = len(names)
    name = name.strip()
    m = _LITERAL.match(name)
    if m:
        start, end = json.loads(m.group(1)), json.loads(m.group(2))
        if len(start) != n:
            raise ConfigError(f"{name} has {len(start)} coordinates, model has {n} modalities")
        return TaskPath(start, end)
    if name == "joint":
        return TaskPath([1.0] * n, [0.0] * n, "joint")
    if "2" not in name:
        raise ConfigError(f"unknown task {name!r}")
    src, dst = name.split("2", 1)

    def resolve(letters: str) -> list[int]:
        idx = []
        for ch in letters:
            mod = _LETTERS.get(ch)
            if mod is None or mod not in names:
                raise ConfigError(f"task {name!r} refers to modality {mod or ch!r} not in {names}")
            idx.append(names.index(mod))
        return idx

    cond, gen = resolve(src), resolve(dst)
    if not gen or set(cond) & set(gen):
        raise ConfigError(f"task {name!r} must generate at least one modality not used as input")
    start = [1.0] * n
    end = [1.0] * n
    for i in cond:
        start[i] = end[i] = 0.0
    for i in gen:
        end[i] = 0.0
    return TaskPath(start, end, name)


def subset_path(n: int, cond: Sequence[int], gen: Sequence[int], name: str = "") -> TaskPath:
    """Path generating ``gen`` given clean ``cond``, all other coordinates at noise."""
    start = [1.0] * n
    end = [1.0] * n
    for i in cond:
        start[i] = end[i] = 0.0
    for i in gen:
        end[i] = 0.0
    return TaskPath(start, end, name)


def compatible(path: TaskPath, present: Sequence[int]) -> bool:
    """A path fits a sample when every absent modality stays at pure noise
    and at least one present modality moves."""
    present = set(present)
    for i in range(path.dim):
        if i not in present and not (path.start[i] == path.end[i] == 1.0):
            return False
    return any(i in present for i in path.moving())
