"""Forward processes, log-SNR, loss weights and prediction conversions.

A forward process mixes clean data ``x0`` with Gaussian noise ``x1`` as
``x_t = a(t) x0 + b(t) x1``. Three targets can be regressed:

* ``velocity``: the time derivative ``dx_t/dt = a'(t) x0 + b'(t) x1``
  (for the rectified-flow schedule, ``x1 - x0``);
* ``eps``: the noise ``x1``;
* ``v``: the rotated target ``a(t) x1 - b(t) x0``.

All three are affine in ``(x0, x1)`` so any one, together with ``x_t``,
determines the others.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigError, DomainError
from .tensor import Tensor

RECTIFIED_FLOW = "rf"
COSINE = "cosine"
DDPM_LINEAR = "ddpm-linear"
SCHEDULE_KINDS = (RECTIFIED_FLOW, COSINE, DDPM_LINEAR)

VELOCITY = "velocity"
EPS = "eps"
V = "v"
PARAMETERIZATIONS = (VELOCITY, EPS, V)

T_CLAMP = 1e-5


@dataclass(frozen=True)
class ForwardSchedule:
    kind: str = RECTIFIED_FLOW
    beta_start: float = 0.00085
    beta_end: float = 0.012
    steps: int = 1000

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"unknown schedule {self.kind!r}; expected one of {SCHEDULE_KINDS}")
        if self.kind == DDPM_LINEAR and self.steps < 2:
            raise ConfigError("ddpm-linear needs at least 2 discrete steps")

    @cached_property
    def _ddpm_tables(self) -> dict[str, np.ndarray]:
        # betas interpolate linearly in sqrt-space; a' and b' are central
        # differences on the index grid (spacing 1 / (steps - 1)), and the
        # log-SNR slope is built from them so conversions stay exact inverses
        i = np.arange(self.steps, dtype=np.float64)
        root = math.sqrt(self.beta_start) + i / (self.steps - 1) * (math.sqrt(self.beta_end) - math.sqrt(self.beta_start))
        alpha_bar = np.exp(np.cumsum(np.log1p(-root ** 2)))
        a, b = np.sqrt(alpha_bar), np.sqrt(1.0 - alpha_bar)
        dt = 1.0 / (self.steps - 1)
        da, db = np.gradient(a, dt), np.gradient(b, dt)
        return {"a": a, "b": b, "da": da, "db": db, "dlam": 2.0 * (da / a - db / b)}

    def index(self, t):
        return np.rint(np.asarray(t, dtype=np.float64) * (self.steps - 1)).astype(np.int64)


def schedule_from_name(name: str) -> ForwardSchedule:
    return ForwardSchedule(kind=name)


def _check_closed(t) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if np.any(~np.isfinite(t)) or np.any(t < 0.0) or np.any(t > 1.0):
        raise DomainError(f"time must lie in [0, 1], got {t}")
    return t


def _check_open(t) -> np.ndarray:
    t = _check_closed(t)
    if np.any(t <= 0.0) or np.any(t >= 1.0):
        raise DomainError(f"time must lie strictly inside (0, 1), got {t}")
    return t


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


def alpha_beta(s: ForwardSchedule, t):
    """Return ``(a(t), b(t))``; arrays in, arrays out."""
    t = _check_closed(t)
    if s.kind == RECTIFIED_FLOW:
        a, b = 1.0 - t, t
    elif s.kind == COSINE:
        a, b = np.cos(0.5 * np.pi * t), np.sin(0.5 * np.pi * t)
        a = np.where(t == 1.0, 0.0, a)
    else:
        tab, idx = s._ddpm_tables, s.index(t)
        a, b = tab["a"][idx], tab["b"][idx]
    return _out(a), _out(b)


def alpha_beta_derivatives(s: ForwardSchedule, t):
    """Return ``(a'(t), b'(t))``.

    For the discrete schedule these are central differences over the index
    grid, one index step being a time increment of ``1 / (steps - 1)``.
    """
    t = _check_closed(t)
    if s.kind == RECTIFIED_FLOW:
        da, db = -np.ones_like(t), np.ones_like(t)
    elif s.kind == COSINE:
        h = 0.5 * np.pi
        da, db = -h * np.sin(h * t), h * np.cos(h * t)
    else:
        tab, idx = s._ddpm_tables, s.index(t)
        da, db = tab["da"][idx], tab["db"][idx]
    return _out(da), _out(db)


def snr_lambda(s: ForwardSchedule, t):
    """Log-SNR ``log(a^2 / b^2)``."""
    t = _check_open(t)
    a, b = alpha_beta(s, t)
    return _out(2.0 * (np.log(a) - np.log(b)))


def snr_lambda_derivative(s: ForwardSchedule, t):
    t = _check_open(t)
    if s.kind == RECTIFIED_FLOW:
        return _out(-2.0 / (t * (1.0 - t)))
    if s.kind == COSINE:
        return _out(-2.0 * np.pi / np.sin(np.pi * t))
    return _out(s._ddpm_tables["dlam"][s.index(t)])


# --- loss weighting -----------------------------------------------------

V_WEIGHTS = ("exp", "unit")


def loss_weight(s: ForwardSchedule, p: str, t, v_weight: str = "exp"):
    """Weight ``w(t)`` of the unified noise-space objective for a variant.

    * velocity: the conditional flow-matching weight ``-lambda'(t) b(t)^2 / 2``
      (``t / (1 - t)`` for rectified flow);
    * eps: ``-2 / lambda'(t)``, i.e. an unweighted noise regression;
    * v: ``exp(-lambda(t) / 2)`` (or the unweighted-v choice ``unit``).
    """
    t = _check_open(t)
    lam_d = np.asarray(snr_lambda_derivative(s, t))
    if p == VELOCITY:
        _, b = alpha_beta(s, t)
        return _out(-0.5 * lam_d * np.asarray(b) ** 2)
    if p == EPS:
        return _out(-2.0 / lam_d)
    if p == V:
        if v_weight == "exp":
            return _out(np.exp(-0.5 * np.asarray(snr_lambda(s, t))))
        if v_weight == "unit":
            a, b = alpha_beta(s, t)
            a, b = np.asarray(a), np.asarray(b)
            return _out(-2.0 / lam_d * (a * a + b * b) ** 2 / (a * a))
        raise ConfigError(f"unknown v weighting {v_weight!r}")
    raise ConfigError(f"unknown parameterization {p!r}")


def target_weight(s: ForwardSchedule, p: str, t, v_weight: str = "exp"):
    """Multiplier on the squared error of the variant's own target.

    Rewrites ``-w(t) lambda'(t) / 2 * |eps_hat - eps|^2`` in terms of the
    regressed target. For the velocity target this is identically 1.
    """
    t = _check_open(t)
    if p == VELOCITY:
        return _out(np.ones_like(t))
    w = np.asarray(loss_weight(s, p, t, v_weight))
    lam_d = np.asarray(snr_lambda_derivative(s, t))
    base = -0.5 * w * lam_d
    if p == EPS:
        return _out(base)
    a, b = alpha_beta(s, t)
    a, b = np.asarray(a), np.asarray(b)
    return _out(base * a * a / (a * a + b * b) ** 2)


# --- targets and conversions -------------------------------------------


def make_target(p: str, s: ForwardSchedule, x0: np.ndarray, x1: np.ndarray, t) -> np.ndarray:
    """The regression target of parameterization ``p`` (velocity in the dx/dt convention).

    ``t`` is a scalar or one time per leading-axis sample.
    """
    if p == VELOCITY:
        da, db = (_bcast(c, x0) for c in alpha_beta_derivatives(s, t))
        return (da * x0 + db * x1).astype(x0.dtype)
    if p == EPS:
        return x1.copy()
    if p == V:
        a, b = (_bcast(c, x0) for c in alpha_beta(s, t))
        return (a * x1 - b * x0).astype(x0.dtype)
    raise ConfigError(f"unknown parameterization {p!r}")


def _bcast(c, like: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    if c.ndim == 0:
        return c
    return c.reshape((-1,) + (1,) * (like.ndim - 1))


def _clean_and_noise(p, pred, x_t, a, b, da, db):
    if p == EPS:
        x1 = pred
        x0 = (x_t - b * pred) / a
    elif p == V:
        n = a * a + b * b
        x0 = (a * x_t - b * pred) / n
        x1 = (b * x_t + a * pred) / n
    else:
        det = a * db - b * da
        x0 = (db * x_t - b * pred) / det
        x1 = (a * pred - da * x_t) / det
    return x0, x1


def convert_prediction(p_from: str, p_to: str, pred, x_t, s: ForwardSchedule, t):
    """Re-express a prediction of one target as another, given ``x_t``.

    Accepts numpy arrays or :class:`~mmflow.tensor.Tensor` (data is read, a
    plain array is returned).
    """
    for p in (p_from, p_to):
        if p not in PARAMETERIZATIONS:
            raise ConfigError(f"unknown parameterization {p!r}")
    pred = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    x_t = x_t.data if isinstance(x_t, Tensor) else np.asarray(x_t)
    if pred.shape != x_t.shape:
        raise DomainError(f"prediction shape {pred.shape} differs from state shape {x_t.shape}")
    if p_from == p_to:
        return pred
    t = _check_closed(t)
    a, b = (_bcast(c, x_t) for c in alpha_beta(s, t))
    if np.any(a == 0.0) or np.any(b == 0.0):
        raise DomainError(f"conversion is singular at t={t} (a={a}, b={b})")
    da, db = (_bcast(c, x_t) for c in alpha_beta_derivatives(s, t))
    pred64, xt64 = pred.astype(np.float64), x_t.astype(np.float64)
    if p_from == VELOCITY and p_to == EPS:
        lam_d = _bcast(snr_lambda_derivative(s, t), x_t)
        out = -2.0 / (lam_d * b) * (pred64 - da / a * xt64)
        return out.astype(pred.dtype)
    x0, x1 = _clean_and_noise(p_from, pred64, xt64, a, b, da, db)
    if p_to == EPS:
        out = x1
    elif p_to == V:
        out = a * x1 - b * x0
    else:
        out = da * x0 + db * x1
    return out.astype(pred.dtype)


def estimate_clean(p: str, pred, x_t, s: ForwardSchedule, t) -> np.ndarray:
    """The clean-data estimate implied by a prediction."""
    a, b = (_bcast(c, x_t) for c in alpha_beta(s, t))
    da, db = (_bcast(c, x_t) for c in alpha_beta_derivatives(s, t))
    x0, _ = _clean_and_noise(p, np.asarray(pred, np.float64), np.asarray(x_t, np.float64), a, b, da, db)
    return x0.astype(np.asarray(pred).dtype)


# --- timestep priors and inference shift --------------------------------


@dataclass(frozen=True)
class TimestepSampler:
    kind: str = "uniform"
    location: float = 0.0
    scale: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform", "lognorm"):
            raise ConfigError(f"unknown timestep sampler {self.kind!r}")
        if self.kind == "lognorm" and self.scale <= 0:
            raise ConfigError("lognorm scale must be positive")

    @property
    def name(self) -> str:
        if self.kind == "uniform":
            return "uniform"
        return f"lognorm({self.location:g},{self.scale:g})"


_LOGNORM = re.compile(r"^lognorm(?:\(\s*([-+0-9.eE]+)\s*,\s*([-+0-9.eE]+)\s*\))?$")


def parse_sampler(name: str) -> TimestepSampler:
    name = name.strip()
    if name == "uniform":
        return TimestepSampler("uniform")
    m = _LOGNORM.match(name)
    if m is None:
        raise ConfigError(f"cannot parse timestep sampler {name!r}; use 'uniform' or 'lognorm(m,s)'")
    if m.group(1) is None:
        return TimestepSampler("lognorm")
    return TimestepSampler("lognorm", float(m.group(1)), float(m.group(2)))


def sample_timestep(ts: TimestepSampler, rng: np.random.Generator, size=None):
    """Draw training times, clamped ``T_CLAMP`` away from both endpoints."""
    if ts.kind == "uniform":
        t = rng.uniform(size=size)
    else:
        z = rng.normal(ts.location, ts.scale, size=size)
        t = 1.0 / (1.0 + np.exp(-z))
    return _out(np.clip(t, T_CLAMP, 1.0 - T_CLAMP))


def shift_time(t, gamma: float):
    """Endpoint-preserving shift ``gamma t / (1 + (gamma - 1) t)``.

    ``gamma > 1`` spends more of a uniform grid near ``t = 1``.
    """
    if not gamma > 0:
        raise DomainError(f"shift gamma must be positive, got {gamma}")
    t = _check_closed(t)
    return _out(np.where(t == 1.0, 1.0, gamma * t / (1.0 + (gamma - 1.0) * t)))
