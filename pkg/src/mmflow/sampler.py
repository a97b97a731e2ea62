"""Euler integration along task paths with multi-modal classifier-free guidance.

Models are anything exposing ``names`` and
``velocity(latents, times, only=None) -> {name: array}`` in the ``x0 - x1``
convention (see :class:`mmflow.training.FlowModel`).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, UsageError
from .paths import TaskPath, path_eval, subset_path
from .schedules import shift_time
from .tensor import DTYPE
from .training import MultiModalState, forward_interp


@dataclass
class GuidanceMatrix:
    """``alpha[i, j]``: strength of input ``j`` on output ``i``; 1 means no guidance."""

    alpha: np.ndarray

    def __post_init__(self):
        self.alpha = np.asarray(self.alpha, dtype=np.float64)
        if self.alpha.ndim != 2 or self.alpha.shape[0] != self.alpha.shape[1]:
            raise ConfigError(f"guidance matrix must be square, got {self.alpha.shape}")
        if np.any(self.alpha < 0):
            raise ConfigError("guidance scales must be non-negative")

    @classmethod
    def none(cls, n: int) -> GuidanceMatrix:
        return cls(np.ones((n, n)))

    @classmethod
    def from_entries(cls, n: int, entries: Mapping[tuple[int, int], float]) -> GuidanceMatrix:
        alpha = np.ones((n, n))
        for (i, j), a in entries.items():
            if not (0 <= i < n and 0 <= j < n) or i == j:
                raise ConfigError(f"guidance entry ({i + 1},{j + 1}) is invalid for {n} modalities")
            alpha[i, j] = a
        return cls(alpha)

    @property
    def n(self) -> int:
        return self.alpha.shape[0]


_GUIDANCE = re.compile(r"^\s*(\d+)\s*,\s*(\d+)\s*=\s*([-+0-9.eE]+)\s*$")


def parse_guidance(specs: Sequence[str], n: int) -> GuidanceMatrix:
    """Parse ``"i,j=alpha"`` strings with 1-based modality indices."""
    entries = {}
    for s in specs:
        m = _GUIDANCE.match(s)
        if m is None:
            raise ConfigError(f"cannot parse guidance {s!r}; expected 'i,j=alpha'")
        entries[(int(m.group(1)) - 1, int(m.group(2)) - 1)] = float(m.group(3))
    return GuidanceMatrix.from_entries(n, entries)


@dataclass
class SamplerConfig:
    steps: int = 50
    gamma: float = 3.0
    guidance: GuidanceMatrix | None = None
    seed: int = 0
    chunk: int = 10000

    def __post_init__(self):
        if self.steps < 1:
            raise ConfigError("sampler needs at least one step")
        if not self.gamma > 0:
            raise ConfigError("shift gamma must be positive")


def time_grid(steps: int, gamma: float) -> np.ndarray:
    """Descending path times ``shift(k / steps)`` for ``k = steps .. 0``."""
    k = np.arange(steps, -1, -1, dtype=np.float64)
    return np.asarray(shift_time(k / steps, gamma), dtype=np.float64)


# --- guidance -------------------------------------------------------------


def _noise_for(state: MultiModalState, names: Sequence[str], rng: np.random.Generator) -> dict[str, np.ndarray]:
    """One Gaussian stand-in per modality; modalities already at pure noise keep their latent."""
    out = {}
    for n in names:
        x = state.latents[n]
        if np.all(np.asarray(state.times[n]) == 1.0):
            out[n] = x
        else:
            out[n] = rng.standard_normal(x.shape).astype(DTYPE)
    return out


def _variant(state: MultiModalState, names, keep: Mapping[str, tuple[np.ndarray, object]],
             noise: Mapping[str, np.ndarray]) -> MultiModalState:
    latents, times = {}, {}
    for n in names:
        if n in keep:
            latents[n], times[n] = keep[n]
        else:
            latents[n], times[n] = noise[n], 1.0
    return MultiModalState(latents, times)


def _same(a: MultiModalState, b: MultiModalState) -> bool:
    return all(a.latents[n] is b.latents[n] and np.array_equal(a.times[n], b.times[n]) for n in a.latents)


def _clean(state: MultiModalState, name: str) -> bool:
    return bool(np.all(np.asarray(state.times[name]) == 0.0))


def delta_ij(model, state: MultiModalState, i: int, j: int, rng: np.random.Generator,
             noise: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
    """Prediction for modality ``i`` with ``j`` clean minus with ``j`` replaced by noise.

    Every modality other than ``i`` and ``j`` is set to pure noise in both
    evaluations, sharing one noise draw.
    """
    names = model.names
    if i == j:
        raise UsageError("delta_ij needs distinct modalities")
    ni, nj = names[i], names[j]
    if not _clean(state, nj):
        raise UsageError(f"modality {nj} has no clean data (time {state.times[nj]})")
    noise = noise if noise is not None else _noise_for(state, names, rng)
    own = (state.latents[ni], state.times[ni])
    cond = _variant(state, names, {ni: own, nj: (state.latents[nj], 0.0)}, noise)
    uncond = _variant(state, names, {ni: own}, noise)
    v_c = model.velocity(cond.latents, cond.times, only=[ni])[ni]
    v_u = model.velocity(uncond.latents, uncond.times, only=[ni])[ni]
    return v_c - v_u


def guided_velocities(model, state: MultiModalState, targets: Sequence[int], guidance: GuidanceMatrix | None,
                      rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Guided predictions for each target modality.

    One base evaluation on the full state, one unconditional evaluation per
    guided target, and one conditional evaluation per active (target, source)
    pair unless it coincides with the base state.
    """
    names = model.names
    target_names = [names[i] for i in targets]
    base = model.velocity(state.latents, state.times, only=target_names)
    if guidance is None:
        return base
    if guidance.n != len(names):
        raise ConfigError(f"guidance matrix is {guidance.n}x{guidance.n}, model has {len(names)} modalities")
    active = {i: [j for j in range(len(names)) if j != i and guidance.alpha[i, j] != 1.0 and _clean(state, names[j])]
              for i in targets}
    if not any(active.values()):
        return base
    noise = _noise_for(state, names, rng)
    out = {}
    for i in targets:
        ni = names[i]
        v = base[ni]
        if not active[i]:
            out[ni] = v
            continue
        own = (state.latents[ni], state.times[ni])
        uncond = _variant(state, names, {ni: own}, noise)
        v_u = model.velocity(uncond.latents, uncond.times, only=[ni])[ni]
        acc = v.astype(np.float64)
        for j in active[i]:
            nj = names[j]
            cond = _variant(state, names, {ni: own, nj: (state.latents[nj], 0.0)}, noise)
            v_c = base[ni] if _same(cond, state) else model.velocity(cond.latents, cond.times, only=[ni])[ni]
            acc = acc + (guidance.alpha[i, j] - 1.0) * (v_c.astype(np.float64) - v_u)
        out[ni] = acc.astype(v.dtype)
    return out


def guided_velocity(model, state: MultiModalState, i: int, guidance: GuidanceMatrix | None,
                    rng: np.random.Generator) -> np.ndarray:
    return guided_velocities(model, state, [i], guidance, rng)[model.names[i]]


# --- integration --------------------------------------------------------


def _batch_of(conditioning: Mapping[str, np.ndarray], count: int | None) -> int:
    sizes = {np.shape(v)[0] for v in conditioning.values()}
    if count is not None:
        sizes.add(count)
    if len(sizes) != 1:
        raise UsageError(f"cannot infer a single batch size from {sorted(sizes)}")
    return sizes.pop()


def euler_sample(model, path: TaskPath, conditioning: Mapping[str, np.ndarray], cfg: SamplerConfig,
                 rng: np.random.Generator, count: int | None = None) -> dict[str, np.ndarray]:
    """Integrate from the path's noise end to its data end.

    Moving modalities start from unit Gaussian noise; coordinates pinned at 0
    take their latents from ``conditioning`` and are returned unchanged.
    """
    names = model.names
    specs = {s.name: s for s in model.specs}
    if path.dim != len(names):
        raise ConfigError(f"path has {path.dim} coordinates, model has {len(names)} modalities")
    B = _batch_of(conditioning, count)
    latents: dict[str, np.ndarray] = {}
    for k, n in enumerate(names):
        s, e = path.start[k], path.end[k]
        if s == e == 0.0:
            if n not in conditioning:
                raise UsageError(f"modality {n} is pinned clean on {path.name} but has no conditioning")
            latents[n] = np.asarray(conditioning[n], dtype=DTYPE)
            continue
        noise = rng.standard_normal((B,) + specs[n].shape).astype(DTYPE)
        if s == 1.0:
            latents[n] = noise
        elif n in conditioning:
            latents[n] = forward_interp(conditioning[n], noise, s, getattr(model, "schedule", None))
        else:
            raise UsageError(f"modality {n} starts at time {s} on {path.name} and needs conditioning")
    moving = path.moving()
    grid = time_grid(cfg.steps, cfg.gamma)
    for t_hi, t_lo in zip(grid[:-1], grid[1:]):
        hi, lo = path_eval(path, t_hi), path_eval(path, t_lo)
        state = MultiModalState(dict(latents), {n: hi[k] for k, n in enumerate(names)})
        v = guided_velocities(model, state, moving, cfg.guidance, rng)
        for k in moving:
            n = names[k]
            latents[n] = (latents[n] + v[n] * DTYPE(hi[k] - lo[k])).astype(DTYPE)
    return latents


def sample_marginal(model, conditioning: Mapping[str, np.ndarray], target: str, cfg: SamplerConfig,
                    rng: np.random.Generator, count: int | None = None) -> np.ndarray:
    """Sample ``target`` given ``conditioning`` with every other modality held at pure noise."""
    names = model.names
    if target not in names:
        raise UsageError(f"unknown target modality {target!r}")
    if target in conditioning:
        raise UsageError(f"target {target} is also a conditioning modality")
    cond = [names.index(n) for n in conditioning]
    path = subset_path(len(names), cond, [names.index(target)])
    return euler_sample(model, path, conditioning, cfg, rng, count)[target]


def sample_chunked(model, path: TaskPath, count: int, cfg: SamplerConfig, rng: np.random.Generator,
                   conditioning: Mapping[str, np.ndarray] | None = None) -> dict[str, np.ndarray]:
    """``euler_sample`` over ``count`` draws in chunks of ``cfg.chunk`` rows."""
    conditioning = conditioning or {}
    parts: list[dict[str, np.ndarray]] = []
    for lo in range(0, count, cfg.chunk):
        hi = min(count, lo + cfg.chunk)
        cond = {k: v[lo:hi] for k, v in conditioning.items()}
        parts.append(euler_sample(model, path, cond, cfg, rng, count=hi - lo))
    if not parts:
        specs = {s.name: s for s in model.specs}
        return {n: np.zeros((0,) + specs[n].shape, dtype=DTYPE) for n in model.names}
    return {n: np.concatenate([p[n] for p in parts]) for n in model.names}
