"""Toy velocity networks.

Both networks take ``latents`` (modality name -> array of shape
``(batch, *spec.shape)``) and ``times`` (modality name -> scalar or
``(batch,)`` array) and return one prediction per modality with the latent's
shape. Modalities absent from ``latents`` are treated as excluded: the MLP
requires all of them, the Omni-Transformer drops their tokens from the joint
sequence and embeds their time as 1.
"""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .paths import ModalitySpec, check_specs
from .tensor import Tensor


class Module:
    """Parameter container; parameters are discovered by walking attributes."""

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, value in vars(self).items():
            _collect(value, f"{prefix}{key}", out)
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = sorted(set(params) - set(state))
        extra = sorted(set(state) - set(params))
        if missing or extra:
            raise ConfigError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for k, p in params.items():
            arr = np.asarray(state[k], dtype=T.DTYPE)
            if arr.shape != p.shape:
                raise DimensionError(f"{k}: stored shape {arr.shape} differs from parameter shape {p.shape}")
            p.data = arr.copy()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _collect(value, name: str, out: dict) -> None:
    if isinstance(value, Tensor):
        if value.requires_grad:
            out[name] = value
    elif isinstance(value, Module):
        for k, v in vars(value).items():
            _collect(v, f"{name}.{k}", out)
    elif isinstance(value, dict):
        for k, v in value.items():
            _collect(v, f"{name}.{k}", out)
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            _collect(v, f"{name}.{i}", out)


class Linear(Module):
    def __init__(self, fan_in: int, fan_out: int, rng: np.random.Generator, init: str = "normal", std: float = 0.02):
        if init == "normal":
            w = rng.normal(0.0, std, size=(fan_in, fan_out))
        elif init == "uniform":
            bound = 1.0 / math.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        elif init == "zeros":
            w = np.zeros((fan_in, fan_out))
        else:
            raise ConfigError(f"unknown init {init!r}")
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(fan_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(T.matmul(x, self.weight), self.bias)


# --- time embeddings ----------------------------------------------------


def sinusoidal_embed(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """``[sin(t f_k), cos(t f_k)]`` with geometric frequencies; ``t`` scaled by 1000.

    Scalar ``t`` gives shape ``(dim,)``, an array gives ``(len(t), dim)``.
    """
    if dim % 2:
        raise DimensionError(f"embedding dimension must be even, got {dim}")
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    t = np.asarray(t, dtype=np.float64)
    args = 1000.0 * t[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1).astype(T.DTYPE)


def _time_column(t, batch: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return np.full(batch, float(t))
    if t.shape != (batch,):
        raise DimensionError(f"times of shape {t.shape} do not match batch size {batch}")
    return t


class TimeEmbedding(Module):
    """Sinusoidal embedding of each modality time, concatenated and mixed by a 2-layer MLP."""

    def __init__(self, slots: int, freq_dim: int, width: int, rng: np.random.Generator):
        self.freq_dim = freq_dim
        self.fc1 = Linear(slots * freq_dim, width, rng, init="normal")
        self.fc2 = Linear(width, width, rng, init="normal")

    def __call__(self, times: Sequence[np.ndarray]) -> Tensor:
        feats = np.concatenate([sinusoidal_embed(t, self.freq_dim) for t in times], axis=-1)
        return self.fc2(T.silu(self.fc1(Tensor(feats))))


def unified_time_embed(embedding: TimeEmbedding, *times) -> Tensor:
    """A single embedding of all modality times; scalars give a ``(1, width)`` result."""
    cols = [np.atleast_1d(np.asarray(t, dtype=np.float64)) for t in times]
    return embedding(cols)


# --- MLP ---------------------------------------------------------------


class MLPVelocityNet(Module):
    """Flattened latents plus per-modality time features through ``depth`` silu layers,
    then one linear head per modality."""

    def __init__(self, specs: Sequence[ModalitySpec], rng: np.random.Generator,
                 width: int = 256, depth: int = 8, time_dim: int = 16):
        self.specs = check_specs(specs)
        self.time_dim = time_dim
        in_dim = sum(s.size for s in self.specs) + len(self.specs) * time_dim
        dims = [in_dim] + [width] * depth
        self.layers = [Linear(a, b, rng, init="uniform") for a, b in zip(dims[:-1], dims[1:])]
        self.heads = {s.name: Linear(width, s.size, rng, init="uniform") for s in self.specs}

    def __call__(self, latents: Mapping[str, np.ndarray], times: Mapping) -> dict[str, Tensor]:
        batch = _batch_size(latents)
        cols = []
        for s in self.specs:
            if s.name not in latents:
                raise DimensionError(f"MLP needs every modality; {s.name} is missing")
            x = np.asarray(_data(latents[s.name]), dtype=T.DTYPE)
            if x.shape[1:] != s.shape:
                raise DimensionError(f"{s.name}: latent shape {x.shape[1:]} differs from spec {s.shape}")
            cols.append(x.reshape(batch, -1))
        for s in self.specs:
            cols.append(sinusoidal_embed(_time_column(times[s.name], batch), self.time_dim))
        h = Tensor(np.concatenate(cols, axis=1))
        for layer in self.layers:
            h = T.silu(layer(h))
        return {s.name: T.reshape(self.heads[s.name](h), (batch,) + s.shape) for s in self.specs}


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def _batch_size(latents: Mapping) -> int:
    sizes = {np.shape(_data(v))[0] for v in latents.values()}
    if len(sizes) != 1:
        raise DimensionError(f"inconsistent batch sizes {sorted(sizes)}")
    return sizes.pop()


# --- Omni-Transformer --------------------------------------------------

MOD_KEYS = ("shift_attn", "scale_attn", "gate_attn", "shift_ffn", "scale_ffn", "gate_ffn")


def joint_attention(q_i: Tensor, K: Tensor, V: Tensor) -> Tensor:
    """Scaled dot-product attention of one modality's queries over the joint keys/values."""
    d = q_i.shape[-1]
    if K.shape[-1] != d or V.shape[-1] != d or K.shape != V.shape:
        raise DimensionError(f"attention shapes disagree: q {q_i.shape}, K {K.shape}, V {V.shape}")
    scores = T.scale(T.matmul(q_i, T.transpose(K)), 1.0 / math.sqrt(d))
    return T.matmul(T.softmax_rows(scores), V)


class Branch(Module):
    """Per-modality parameters of one block."""

    def __init__(self, width: int, rng: np.random.Generator, ffn_mult: int = 4):
        self.mod = {k: Linear(width, width, rng, init="zeros") for k in MOD_KEYS}
        self.q = Linear(width, width, rng)
        self.k = Linear(width, width, rng)
        self.v = Linear(width, width, rng)
        self.proj = Linear(width, width, rng)
        self.ff1 = Linear(width, ffn_mult * width, rng)
        self.ff2 = Linear(ffn_mult * width, width, rng)


def _modulate(x: Tensor, shift: Tensor, scale: Tensor) -> Tensor:
    rows = x.shape[-2]
    normed = T.layer_norm(x)
    return T.add(T.mul(normed, T.add(T.repeat_rows(scale, rows), 1.0)), T.repeat_rows(shift, rows))


class OmniBlock(Module):
    def __init__(self, names: Sequence[str], width: int, rng: np.random.Generator):
        self.branches = {n: Branch(width, rng) for n in names}

    def __call__(self, tokens: Mapping[str, Tensor], y: Tensor) -> dict[str, Tensor]:
        """Modulated norm -> per-modality q/k/v -> joint attention -> gated residual,
        then modulated norm -> FFN -> gated residual."""
        for n in tokens:
            if n not in self.branches:
                raise DimensionError(f"block has no branch for modality {n}")
        cy = T.silu(y)
        mods = {n: {k: self.branches[n].mod[k](cy) for k in MOD_KEYS} for n in tokens}
        qs, ks, vs = {}, [], []
        for n, x in tokens.items():
            br, m = self.branches[n], mods[n]
            h = _modulate(x, m["shift_attn"], m["scale_attn"])
            qs[n] = br.q(h)
            ks.append(br.k(h))
            vs.append(br.v(h))
        K = T.concat_rows(ks)
        V = T.concat_rows(vs)
        out = {}
        for n, x in tokens.items():
            br, m = self.branches[n], mods[n]
            rows = x.shape[-2]
            att = br.proj(joint_attention(qs[n], K, V))
            x = T.add(x, T.mul(T.repeat_rows(m["gate_attn"], rows), att))
            h = _modulate(x, m["shift_ffn"], m["scale_ffn"])
            ff = br.ff2(T.silu(br.ff1(h)))
            out[n] = T.add(x, T.mul(T.repeat_rows(m["gate_ffn"], rows), ff))
        return out


def omni_block_forward(block: OmniBlock, tokens: Mapping[str, Tensor], y: Tensor) -> dict[str, Tensor]:
    return block(tokens, y)


class OmniTransformer(Module):
    """Per-modality embed/output layers around ``blocks`` joint-attention blocks.

    ``time_slots`` fixes the modality order of the unified time embedding; it
    may name modalities that have no branch in this model (their time is
    always 1), which lets separately trained models share a slot layout.
    """

    def __init__(self, specs: Sequence[ModalitySpec], rng: np.random.Generator, width: int = 32,
                 blocks: int = 2, time_dim: int = 16, time_slots: Sequence[str] | None = None):
        self.specs = check_specs(specs)
        if blocks < 1:
            raise ConfigError("at least one block is required")
        names = [s.name for s in self.specs]
        self.time_slots = list(time_slots) if time_slots is not None else names
        missing = [n for n in names if n not in self.time_slots]
        if missing:
            raise ConfigError(f"time_slots {self.time_slots} lack modalities {missing}")
        self.width = width
        self.time = TimeEmbedding(len(self.time_slots), time_dim, width, rng)
        self.embed = {s.name: Linear(s.channels, width, rng) for s in self.specs}
        self.blocks = [OmniBlock(names, width, rng) for _ in range(blocks)]
        self.final_mod = {s.name: {k: Linear(width, width, rng, init="zeros") for k in ("shift", "scale")}
                          for s in self.specs}
        self.out = {s.name: Linear(width, s.channels, rng) for s in self.specs}

    @property
    def names(self) -> list[str]:
        return [s.name for s in self.specs]

    def __call__(self, latents: Mapping[str, np.ndarray], times: Mapping) -> dict[str, Tensor]:
        if not latents:
            raise DimensionError("at least one modality must be present")
        batch = _batch_size(latents)
        spec = {s.name: s for s in self.specs}
        tcols = [_time_column(times.get(n, 1.0) if n in latents else 1.0, batch) for n in self.time_slots]
        y = self.time(tcols)
        tokens = {}
        for n in self.names:
            if n not in latents:
                continue
            s = spec[n]
            x = np.asarray(_data(latents[n]), dtype=T.DTYPE)
            if x.shape[1:] != s.shape:
                raise DimensionError(f"{n}: latent shape {x.shape[1:]} differs from spec {s.shape}")
            tokens[n] = self.embed[n](Tensor(x.reshape(batch, s.tokens, s.channels)))
        for n in latents:
            if n not in spec:
                raise DimensionError(f"model has no branch for modality {n}")
        for block in self.blocks:
            tokens = block(tokens, y)
        cy = T.silu(y)
        out = {}
        for n, h in tokens.items():
            fm = self.final_mod[n]
            h = _modulate(h, fm["shift"](cy), fm["scale"](cy))
            out[n] = T.reshape(self.out[n](h), (batch,) + spec[n].shape)
        return out


def model_forward(model, latents, times) -> dict[str, Tensor]:
    return model(latents, times)


# --- architecture description and merging -------------------------------


def describe(model) -> dict:
    """JSON-able architecture record sufficient to rebuild ``model``."""
    specs = [{"name": s.name, "shape": list(s.shape)} for s in model.specs]
    if isinstance(model, MLPVelocityNet):
        return {"kind": "mlp", "specs": specs, "width": model.layers[0].weight.shape[1],
                "depth": len(model.layers), "time_dim": model.time_dim}
    if isinstance(model, OmniTransformer):
        return {"kind": "omni", "specs": specs, "width": model.width, "blocks": len(model.blocks),
                "time_dim": model.time.freq_dim, "time_slots": list(model.time_slots)}
    raise ConfigError(f"cannot describe {type(model).__name__}")


def build(arch: Mapping, rng: np.random.Generator | None = None):
    rng = rng if rng is not None else np.random.default_rng(0)
    specs = [ModalitySpec(s["name"], tuple(s["shape"])) for s in arch["specs"]]
    if arch["kind"] == "mlp":
        return MLPVelocityNet(specs, rng, width=arch["width"], depth=arch["depth"], time_dim=arch["time_dim"])
    if arch["kind"] == "omni":
        return OmniTransformer(specs, rng, width=arch["width"], blocks=arch["blocks"],
                               time_dim=arch["time_dim"], time_slots=arch.get("time_slots"))
    raise ConfigError(f"unknown model kind {arch['kind']!r}")


def branch_of(param_name: str, names: Sequence[str]) -> str | None:
    """The modality owning a parameter, or None for shared (time-embedding) parameters."""
    parts = param_name.split(".")
    if parts[0] in ("embed", "final_mod", "out"):
        owner = parts[1]
    elif parts[0] == "blocks" and len(parts) > 3:
        owner = parts[3]
    else:
        return None
    return owner if owner in names else None


def merge_architectures(a: Mapping, b: Mapping) -> dict:
    if a["kind"] != "omni" or b["kind"] != "omni":
        raise ConfigError("only Omni-Transformer checkpoints can be merged")
    for key in ("width", "blocks", "time_dim", "time_slots"):
        if a[key] != b[key]:
            raise ConfigError(f"architectures differ in {key}: {a[key]} vs {b[key]}")
    by_name = {s["name"]: s for s in a["specs"]}
    for s in b["specs"]:
        if s["name"] in by_name and by_name[s["name"]]["shape"] != s["shape"]:
            raise ConfigError(f"modality {s['name']} has shapes {by_name[s['name']]['shape']} and {s['shape']}")
        by_name.setdefault(s["name"], s)
    order = [n for n in a["time_slots"] if n in by_name]
    return {**a, "specs": [by_name[n] for n in order]}


def merge_states(arch_a: Mapping, state_a: Mapping[str, np.ndarray], arch_b: Mapping,
                 state_b: Mapping[str, np.ndarray], shared: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Union of branches; every parameter name present in both models is averaged.

    For models with disjoint exclusive branches those are the ``shared``
    modality's branch plus the time embedding; merging a model with itself
    therefore returns its parameters unchanged. Shape mismatches are errors.
    """
    bad = [k for k in set(state_a) & set(state_b) if np.shape(state_a[k]) != np.shape(state_b[k])]
    if bad:
        raise DimensionError("shape mismatch on tensors: " + ", ".join(
            f"{k} {np.shape(state_a[k])} vs {np.shape(state_b[k])}" for k in sorted(bad)))
    arch = merge_architectures(arch_a, arch_b)
    names_a = [s["name"] for s in arch_a["specs"]]
    names_b = [s["name"] for s in arch_b["specs"]]
    if shared not in names_a or shared not in names_b:
        raise ConfigError(f"shared modality {shared!r} must be in both models ({names_a}, {names_b})")
    all_names = [s["name"] for s in arch["specs"]]
    merged: dict[str, np.ndarray] = {}
    for k in sorted(set(state_a) | set(state_b)):
        if k in state_a and k in state_b:
            a = np.asarray(state_a[k], dtype=T.DTYPE)
            b = np.asarray(state_b[k], dtype=T.DTYPE)
            merged[k] = ((a + b) * T.DTYPE(0.5)).astype(T.DTYPE)
        else:
            owner = branch_of(k, all_names)
            if owner == shared or owner is None:
                raise ConfigError(f"tensor {k} of the shared part is missing from one model")
            merged[k] = np.asarray(state_a.get(k, state_b.get(k)), dtype=T.DTYPE).copy()
    return arch, merged


def merge_models(model_a: OmniTransformer, model_b: OmniTransformer, shared: str) -> OmniTransformer:
    arch, state = merge_states(describe(model_a), model_a.state_dict(), describe(model_b), model_b.state_dict(), shared)
    merged = build(arch)
    merged.load_state_dict(state)
    return merged
