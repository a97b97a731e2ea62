"""Multi-modal rectified-flow training: interpolation, task sampling, loss, EMA, LR."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import schedules as S
from . import tensor as T
from .errors import ConfigError, DimensionError, UsageError
from .paths import ModalitySpec, TaskPath, compatible, path_eval
from .tensor import Tensor


def forward_interp(x0: np.ndarray, x1: np.ndarray, t, schedule: S.ForwardSchedule | None = None) -> np.ndarray:
    """``a(t) x0 + b(t) x1``; rectified flow gives ``(1 - t) x0 + t x1``.

    ``t`` is a scalar or one time per leading-axis sample.
    """
    x0 = np.asarray(x0)
    x1 = np.asarray(x1)
    if x0.shape != x1.shape:
        raise DimensionError(f"interpolation endpoints differ in shape: {x0.shape} vs {x1.shape}")
    sched = schedule or S.ForwardSchedule()
    a, b = (S._bcast(c, x0) for c in S.alpha_beta(sched, t))
    if sched.kind == S.RECTIFIED_FLOW:
        tt = S._bcast(t, x0)
        if np.ndim(tt) == 0:
            if tt == 0.0:
                return x0.astype(T.DTYPE, copy=True)
            if tt == 1.0:
                return x1.astype(T.DTYPE, copy=True)
    return (a * x0 + b * x1).astype(T.DTYPE)


def target_velocity(x0: np.ndarray, x1: np.ndarray) -> np.ndarray:
    """Regression target ``x0 - x1``: the negated time derivative of the straight path."""
    x0 = np.asarray(x0)
    x1 = np.asarray(x1)
    if x0.shape != x1.shape:
        raise DimensionError(f"shapes differ: {x0.shape} vs {x1.shape}")
    return (x0 - x1).astype(T.DTYPE)


# --- data containers ----------------------------------------------------


@dataclass
class TrainSample:
    latents: dict[str, np.ndarray]

    @property
    def present(self) -> frozenset[str]:
        return frozenset(self.latents)


@dataclass
class Batch:
    """Clean latents for the present modalities, each shaped ``(batch, *spec.shape)``."""

    latents: dict[str, np.ndarray]

    @property
    def present(self) -> frozenset[str]:
        return frozenset(self.latents)

    @property
    def size(self) -> int:
        return next(iter(self.latents.values())).shape[0]


def collate(samples: Sequence[TrainSample]) -> Batch:
    if not samples:
        raise UsageError("empty batch")
    pattern = samples[0].present
    if not pattern:
        raise UsageError("a sample needs at least one modality")
    for s in samples[1:]:
        if s.present != pattern:
            raise UsageError("all samples in a batch must share a presence pattern")
    return Batch({n: np.stack([np.asarray(s.latents[n], dtype=T.DTYPE) for s in samples]) for n in sorted(pattern)})


@dataclass
class MultiModalState:
    latents: dict[str, np.ndarray]
    times: dict[str, object]


# --- model + variant ----------------------------------------------------


class FlowModel:
    """A network together with the forward process and target it was trained on.

    The network's velocity head predicts ``x0 - x1`` in the rectified-flow
    case, i.e. the negated time derivative of the forward process; the sampler
    works in that convention too.
    """

    def __init__(self, net, schedule: S.ForwardSchedule | None = None, parameterization: str = S.VELOCITY,
                 v_weight: str = "exp"):
        if parameterization not in S.PARAMETERIZATIONS:
            raise ConfigError(f"unknown parameterization {parameterization!r}")
        self.net = net
        self.schedule = schedule or S.ForwardSchedule()
        self.parameterization = parameterization
        self.v_weight = v_weight

    @property
    def specs(self) -> list[ModalitySpec]:
        return self.net.specs

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.net.specs]

    def __call__(self, latents, times) -> dict[str, Tensor]:
        return self.net(latents, times)

    def regression_target(self, x0: np.ndarray, x1: np.ndarray, t) -> np.ndarray:
        if self.parameterization == S.VELOCITY:
            if self.schedule.kind == S.RECTIFIED_FLOW:
                return target_velocity(x0, x1)
            return -S.make_target(S.VELOCITY, self.schedule, x0, x1, t)
        return S.make_target(self.parameterization, self.schedule, x0, x1, t)

    def velocity(self, latents: Mapping[str, np.ndarray], times: Mapping, only: Sequence[str] | None = None
                 ) -> dict[str, np.ndarray]:
        """Predictions converted to the ``x0 - x1`` convention, without recording a graph."""
        with T.no_grad():
            raw = self.net(latents, times)
        wanted = list(raw) if only is None else [n for n in only if n in raw]
        out = {}
        for n in wanted:
            pred = raw[n].data
            if self.parameterization == S.VELOCITY:
                out[n] = pred
                continue
            t = np.clip(np.asarray(times[n], dtype=np.float64), S.T_CLAMP, 1.0 - S.T_CLAMP)
            dxdt = S.convert_prediction(self.parameterization, S.VELOCITY, pred, latents[n], self.schedule, t)
            out[n] = -dxdt
        return out


# --- trainer ------------------------------------------------------------


@dataclass
class TrainerConfig:
    lr: float = 1e-3
    warmup: int = 100
    total_steps: int = 1000
    batch_size: int = 256
    ema_decay: float = 0.999
    ema_interval: int = 1
    ema_warmup: bool = True
    weight_decay: float = 0.0
    seed: int = 0
    time_sampler: S.TimestepSampler = field(default_factory=S.TimestepSampler)
    task_weights: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.warmup > self.total_steps:
            raise ConfigError(f"warmup {self.warmup} exceeds total steps {self.total_steps}")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError(f"EMA decay must lie in (0, 1), got {self.ema_decay}")
        if self.ema_interval < 1 or self.batch_size < 1 or self.total_steps < 1:
            raise ConfigError("ema_interval, batch_size and total_steps must be positive")


def lr_at(step: int, cfg: TrainerConfig) -> float:
    """Linear warmup to ``cfg.lr`` then cosine decay to zero at ``cfg.total_steps``."""
    if step < 0 or step > cfg.total_steps:
        raise ConfigError(f"step {step} outside [0, {cfg.total_steps}]")
    if cfg.warmup > 0 and step < cfg.warmup:
        return cfg.lr * step / cfg.warmup
    span = cfg.total_steps - cfg.warmup
    if span == 0:
        return cfg.lr
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * (step - cfg.warmup) / span))


def ema_decay_at(updates: int, cfg: TrainerConfig) -> float:
    """Effective decay for the next EMA update after ``updates`` earlier ones.

    With warmup the decay is capped at ``(1 + n) / (10 + n)`` so the shadow
    forgets the initial weights quickly on short runs.
    """
    if not cfg.ema_warmup:
        return cfg.ema_decay
    return min(cfg.ema_decay, (1.0 + updates) / (10.0 + updates))


def ema_update(ema: dict[str, np.ndarray], params: Mapping[str, Tensor | np.ndarray], decay: float
               ) -> dict[str, np.ndarray]:
    if set(ema) != set(params):
        raise ConfigError("EMA and parameter trees differ")
    d = T.DTYPE(decay)
    c = T.DTYPE(1.0 - decay)
    out = {}
    for k, p in params.items():
        arr = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=T.DTYPE)
        if arr.shape != ema[k].shape:
            raise ConfigError(f"EMA entry {k} has shape {ema[k].shape}, parameter has {arr.shape}")
        out[k] = d * ema[k] + c * arr
    return out


def pick_path(paths: Sequence[TaskPath], present_idx: Sequence[int], weights: Mapping[str, float],
              rng: np.random.Generator) -> TaskPath:
    options = [p for p in paths if compatible(p, present_idx)]
    if not options:
        raise ConfigError(f"no task path is compatible with present modalities {sorted(present_idx)}")
    if len(options) == 1:
        return options[0]
    w = np.array([weights.get(p.name, 1.0) for p in options], dtype=np.float64)
    if np.any(w < 0) or w.sum() <= 0:
        raise ConfigError("task weights must be non-negative with a positive total")
    return options[int(rng.choice(len(options), p=w / w.sum()))]


@dataclass
class StepResult:
    loss: Tensor
    path: TaskPath


def training_loss(model: FlowModel, batch: Batch, paths: Sequence[TaskPath], cfg: TrainerConfig,
                  rng: np.random.Generator) -> StepResult:
    """Build the recorded loss for one batch.

    Random draws, in order: task path (only when several fit), one path time
    per sample, then unit Gaussian noise for each modality in model order.
    """
    names = model.names
    unknown = batch.present - set(names)
    if unknown:
        raise ConfigError(f"batch has modalities {sorted(unknown)} unknown to the model")
    if not batch.present:
        raise UsageError("batch has no modalities")
    present_idx = [i for i, n in enumerate(names) if n in batch.present]
    path = pick_path(paths, present_idx, cfg.task_weights, rng)
    B = batch.size
    t = np.asarray(S.sample_timestep(cfg.time_sampler, rng, size=B), dtype=np.float64)
    coords = path_eval(path, t)
    latents, x0s, x1s = {}, {}, {}
    for i, spec in enumerate(model.specs):
        n = spec.name
        x0 = batch.latents[n] if n in batch.present else np.zeros((B,) + spec.shape, dtype=T.DTYPE)
        if x0.shape != (B,) + spec.shape:
            raise DimensionError(f"{n}: batch latents {x0.shape} do not match spec {spec.shape}")
        x1 = rng.standard_normal((B,) + spec.shape).astype(T.DTYPE)
        latents[n] = forward_interp(x0, x1, coords[i], model.schedule)
        x0s[n], x1s[n] = x0, x1
    times = {n: coords[i] for i, n in enumerate(names)}
    preds = model(latents, times)
    loss = None
    for i in path.moving():
        n = names[i]
        if n not in batch.present:
            continue
        ti = coords[i]
        target = model.regression_target(x0s[n], x1s[n], ti)
        weights = None
        if model.parameterization != S.VELOCITY:
            weights = np.asarray(S.target_weight(model.schedule, model.parameterization, ti, model.v_weight))
        speed = path.speed(i)
        if speed != 1.0:
            weights = np.full(B, speed) if weights is None else weights * speed
        term = T.mse_loss(preds[n], target, weights)
        loss = term if loss is None else T.add(loss, term)
    return StepResult(loss, path)


def training_step(model: FlowModel, batch: Batch, paths: Sequence[TaskPath], cfg: TrainerConfig,
                  rng: np.random.Generator) -> float:
    """Compute the loss for one batch and populate parameter gradients; returns the loss value."""
    result = training_loss(model, batch, paths, cfg, rng)
    T.backward(result.loss)
    return result.loss.item()


class Trainer:
    """Optimizer, EMA shadow and step counter around a :class:`FlowModel`."""

    def __init__(self, model: FlowModel, paths: Sequence[TaskPath], cfg: TrainerConfig):
        self.model = model
        self.paths = list(paths)
        self.cfg = cfg
        self.params = model.net.named_parameters()
        self.opt = T.AdamW(self.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.ema = {k: p.data.copy() for k, p in self.params.items()}
        self.step_count = 0

    def step(self, batch: Batch, rng: np.random.Generator) -> dict:
        if self.step_count >= self.cfg.total_steps:
            raise UsageError(f"training already reached {self.cfg.total_steps} steps")
        self.opt.zero_grad()
        result = training_loss(self.model, batch, self.paths, self.cfg, rng)
        T.backward(result.loss)
        for k, p in self.params.items():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        lr = lr_at(self.step_count + 1, self.cfg)
        self.opt.step(lr)
        self.step_count += 1
        if self.step_count % self.cfg.ema_interval == 0:
            updates = self.step_count // self.cfg.ema_interval - 1
            self.ema = ema_update(self.ema, self.params, ema_decay_at(updates, self.cfg))
        return {"step": self.step_count, "task": result.path.name, "loss": result.loss.item(), "lr": lr}

    def fit(self, source, rng: np.random.Generator, steps: int | None = None, callback=None) -> list[dict]:
        """Run ``steps`` (default: the remaining budget) steps drawing batches from ``source``."""
        steps = self.cfg.total_steps - self.step_count if steps is None else steps
        log = []
        for _ in range(steps):
            batch = source.batch(rng, self.cfg.batch_size)
            row = self.step(batch, rng)
            if not math.isfinite(row["loss"]):
                raise FloatingPointError(f"non-finite loss at step {row['step']}")
            log.append(row)
            if callback is not None:
                callback(row)
        return log

    def ema_model(self) -> FlowModel:
        """A copy of the model carrying the EMA weights."""
        from .models import build, describe

        net = build(describe(self.model.net))
        net.load_state_dict(self.ema)
        return FlowModel(net, self.model.schedule, self.model.parameterization, self.model.v_weight)
