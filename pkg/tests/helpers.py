"""Independent oracles shared by the unit and acceptance tests."""

import math

import numpy as np

from mmflow import tensor as T
from mmflow.models import OmniTransformer
from mmflow.paths import ModalitySpec
from mmflow.training import FlowModel

FD_STEP = 1e-3
FD_TOL = 1e-3

# one "PASS|FAIL name: detail" line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def report(name, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def _probe_loss(out, probe):
    return float(np.sum(out.astype(np.float64) * probe))


def fd_gradients(fn, arrays, rng, h=FD_STEP):
    """Analytic and central-difference gradients of ``sum(fn(*arrays) * R)`` for a random ``R``.

    The analytic side runs in float32; the difference quotients evaluate
    the same ops in float64 at the float32 point so that rounding does not
    swamp small gradients. Returns ``(analytic, numeric)`` pairs, one per
    input array.
    """
    leaves = [T.Tensor(a.astype(np.float32), requires_grad=True) for a in arrays]
    out = fn(*leaves)
    probe = rng.standard_normal(out.shape)
    loss = T.sum(T.mul(out, T.Tensor(probe.astype(np.float32))))
    T.backward(loss)
    pairs = []
    for k, leaf in enumerate(leaves):
        base = [x.data.astype(np.float64) for x in leaves]
        num = np.zeros(leaf.shape)
        flat = base[k].reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            vals = []
            for sign in (1, -1):
                flat[i] = old + sign * h
                with T.no_grad(), T.float64_oracle():
                    vals.append(_probe_loss(fn(*[T.Tensor(b) for b in base]).data, probe))
            flat[i] = old
            num.reshape(-1)[i] = (vals[0] - vals[1]) / (2 * h)
        analytic = leaf.grad if leaf.grad is not None else np.zeros(leaf.shape)
        pairs.append((analytic.astype(np.float64), num))
    return pairs


def rel_error(analytic, numeric):
    """Norm-wise relative error; exact zeros on both sides count as agreement."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def max_rel_error(fn, arrays, rng, h=FD_STEP):
    return max(rel_error(a, n) for a, n in fd_gradients(fn, arrays, rng, h))


# --- per-op gradient cases ------------------------------------------------

GRAD_CASES = 100


def _shape(rng, rank=None):
    rank = rank or int(rng.integers(1, 4))
    return tuple(int(v) for v in rng.integers(1, 5, size=rank))


def grad_cases(seed):
    rng = np.random.default_rng(seed)
    for _ in range(GRAD_CASES):
        yield rng


def _shape2(rng):
    return (int(rng.integers(1, 5)), int(rng.integers(2, 6)))


# one random case per call: (function, input arrays)
GRAD_OPS = {
    "add": lambda rng: (T.add, [rng.standard_normal(s := _shape(rng)), rng.standard_normal(s)]),
    "add_row": lambda rng: (T.add, [rng.standard_normal(s := _shape2(rng)), rng.standard_normal(s[-1])]),
    "sub": lambda rng: (T.sub, [rng.standard_normal(s := _shape(rng)), rng.standard_normal(s)]),
    "mul": lambda rng: (T.mul, [rng.standard_normal(s := _shape(rng)), rng.standard_normal(s)]),
    "mul_row": lambda rng: (T.mul, [rng.standard_normal(s := (2,) + _shape2(rng)), rng.standard_normal(s[-1])]),
    "scale": lambda rng: ((lambda a, c=float(rng.normal()): T.scale(a, c)), [rng.standard_normal(_shape(rng))]),
    "silu": lambda rng: (T.silu, [2 * rng.standard_normal(_shape(rng))]),
    "tanh": lambda rng: (T.tanh, [rng.standard_normal(_shape(rng))]),
    "matmul": lambda rng: (T.matmul, [rng.standard_normal((int(rng.integers(1, 5)), k := int(rng.integers(1, 5)))),
                                      rng.standard_normal((k, int(rng.integers(1, 5))))]),
    "matmul_batched_shared": lambda rng: (T.matmul, [rng.standard_normal((2, 3, k := int(rng.integers(1, 5)))),
                                                     rng.standard_normal((k, 3))]),
    "matmul_batched": lambda rng: (T.matmul, [rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 2))]),
    "transpose": lambda rng: (T.transpose, [rng.standard_normal(_shape(rng, int(rng.integers(2, 4))))]),
    "reshape": lambda rng: ((lambda a: T.reshape(a, (-1,))), [rng.standard_normal(_shape(rng))]),
    "softmax_rows": lambda rng: (T.softmax_rows, [rng.standard_normal(_shape(rng))]),
    # two-column rows normalize to +-1 whatever the input, leaving only rounding noise
    "layer_norm": lambda rng: ((lambda a, g, b: T.layer_norm(a, g, b)),
                               [rng.standard_normal(s := (int(rng.integers(1, 5)), int(rng.integers(3, 7)))), rng.standard_normal(s[-1]),
                                rng.standard_normal(s[-1])]),
    "concat_rows": lambda rng: ((lambda a, b: T.concat_rows([a, b])),
                                [rng.standard_normal((2, 3)), rng.standard_normal((int(rng.integers(1, 4)), 3))]),
    "slice_rows": lambda rng: ((lambda a: T.slice_rows(a, 1, 2)), [rng.standard_normal((2, 4, 3))]),
    "repeat_rows": lambda rng: ((lambda a: T.repeat_rows(a, 3)), [rng.standard_normal(_shape2(rng))]),
    "sum": lambda rng: (T.sum, [rng.standard_normal(_shape(rng))]),
    "mean": lambda rng: (T.mean, [rng.standard_normal(_shape(rng))]),
    "mse_loss": lambda rng: ((lambda p, t: T.mse_loss(p, t)),
                             [rng.standard_normal(s := _shape(rng)), rng.standard_normal(s)]),
    "mse_loss_weighted": lambda rng: ((lambda p, t, w=rng.random(3): T.mse_loss(p, t, w)),
                                      [rng.standard_normal((3, 2)), rng.standard_normal((3, 2))]),
}


# --- Omni-Transformer directional check ----------------------------------

TOY_SPECS = [ModalitySpec("image", (16, 4)), ModalitySpec("text", (8, 4)), ModalitySpec("audio", (16, 4))]


def toy_transformer(rng, jitter=0.05):
    """The 2-block toy model with every parameter (including zero-initialised modulation) perturbed."""
    net = OmniTransformer(TOY_SPECS, rng, width=32, blocks=2)
    for p in net.named_parameters().values():
        p.data = (p.data + jitter * rng.standard_normal(p.shape)).astype(np.float32)
    return net


def transformer_directional_error(net, rng, batch=2, h=FD_STEP, present=None):
    """Relative error between ``<grad, D>`` and the central difference along
    a random unit direction ``D`` over all parameters.

    The difference quotient is evaluated in float64 (see ``fd_gradients``).
    """
    names = present or net.names
    spec = {s.name: s for s in net.specs}
    lat = {n: rng.standard_normal((batch,) + spec[n].shape).astype(np.float32) for n in names}
    times = {n: rng.random(batch) for n in names}
    params = net.named_parameters()
    probes = {n: rng.standard_normal((batch,) + spec[n].shape) for n in names}

    for p in params.values():
        p.requires_grad = True
        p.grad = None
    out = net(lat, times)
    loss = None
    for n in names:
        term = T.sum(T.mul(out[n], T.Tensor(probes[n].astype(np.float32))))
        loss = term if loss is None else T.add(loss, term)
    T.backward(loss)
    grads = {k: (p.grad if p.grad is not None else np.zeros(p.shape)).astype(np.float64) for k, p in params.items()}

    direction = {k: rng.standard_normal(p.shape) for k, p in params.items()}
    d_norm = np.sqrt(sum(np.sum(d * d) for d in direction.values()))
    direction = {k: d / d_norm for k, d in direction.items()}

    def value(eps):
        saved = {k: p.data for k, p in params.items()}
        for k, p in params.items():
            p.data = saved[k].astype(np.float64) + eps * direction[k]
        with T.no_grad(), T.float64_oracle():
            out = net(lat, times)
        for k, p in params.items():
            p.data = saved[k]
        return sum(_probe_loss(out[n].data, probes[n]) for n in names)

    analytic = sum(float(np.sum(grads[k] * direction[k])) for k in params)
    numeric = (value(h) - value(-h)) / (2 * h)
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)


def parameter_fd_error(params, loss_fn, h=FD_STEP, per_tensor=None, rng=None):
    """Worst norm-wise relative error, over parameter tensors, between the
    analytic gradient of ``loss_fn()`` and element-wise central differences.

    ``loss_fn`` must rebuild the scalar loss from the current parameter
    values and be deterministic. Differences run in float64. With
    ``per_tensor`` only that many random entries of each tensor are probed.
    """
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    T.backward(loss_fn())
    grads = {k: (p.grad if p.grad is not None else np.zeros(p.shape)).astype(np.float64)
             for k, p in params.items()}
    saved = {k: p.data for k, p in params.items()}
    worst = 0.0
    try:
        for p in params.values():
            p.data = p.data.astype(np.float64)
        for k, p in params.items():
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size)
            if per_tensor is not None and flat.size > per_tensor:
                idx = np.sort(rng.choice(flat.size, per_tensor, replace=False))
            num = np.zeros(idx.size)
            for j, i in enumerate(idx):
                old = flat[i]
                vals = []
                for sign in (1, -1):
                    flat[i] = old + sign * h
                    with T.no_grad(), T.float64_oracle():
                        vals.append(loss_fn().data.item())
                flat[i] = old
                num[j] = (vals[0] - vals[1]) / (2 * h)
            worst = max(worst, rel_error(grads[k].reshape(-1)[idx], num))
    finally:
        for k, p in params.items():
            p.data = saved[k]
    return worst


# --- standalone single-modality rectified-flow trainer --------------------


def reference_lr(step, lr, warmup, total):
    if step < warmup:
        return lr * step / warmup
    return lr * 0.5 * (1 + math.cos(math.pi * (step - warmup) / (total - warmup)))


def reference_rf_losses(net, x_data, cond, batches, steps, lr, seed, warmup=10):
    """Plain single-modality flow matching, written without the multi-modal machinery.

    ``cond`` optionally names a second modality fed clean at time 0.
    """
    params = net.named_parameters()
    opt = T.AdamW(params, lr=lr, weight_decay=0.0)
    rng = np.random.default_rng(seed)
    out = []
    for step in range(steps):
        idx = batches[step]
        x0 = x_data[idx]
        B = x0.shape[0]
        t = np.clip(rng.uniform(size=B), 1e-5, 1 - 1e-5)
        noise = rng.standard_normal(x0.shape).astype(np.float32)
        if cond is not None:
            rng.standard_normal((B,) + cond[1].shape[1:])  # the pinned modality's unused noise draw
        x_t = ((1 - t)[:, None] * x0 + t[:, None] * noise).astype(np.float32)
        latents, times = {"x": x_t}, {"x": t}
        if cond is not None:
            latents[cond[0]] = cond[1][idx]
            times[cond[0]] = np.zeros(B)
        for p in params.values():
            p.grad = None
        pred = net(latents, times)["x"]
        loss = T.mse_loss(pred, x0 - noise)
        T.backward(loss)
        for p in params.values():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        opt.step(reference_lr(step + 1, lr, warmup, steps))
        out.append(loss.item())
    return out


# --- sampler oracles ------------------------------------------------------

PAIR = [ModalitySpec("image", (4, 4)), ModalitySpec("text", (3, 4))]


def pair_model(seed=0):
    rng = np.random.default_rng(seed)
    net = OmniTransformer(PAIR, rng, width=16, blocks=2, time_dim=8)
    for p in net.named_parameters().values():
        p.data = (p.data + 0.1 * rng.standard_normal(p.shape)).astype(np.float32)
    return FlowModel(net)


class AnalyticField:
    """Minimal sampler-facing model from a per-modality velocity function."""

    def __init__(self, specs, fn):
        self.specs = specs
        self.names = [s.name for s in specs]
        self.fn = fn
        self.calls = []

    def velocity(self, latents, times, only=None):
        self.calls.append(({n: np.copy(v) for n, v in latents.items()}, dict(times)))
        out = self.fn(latents, times)
        return {n: out[n] for n in (only or out)}


def reference_cfg(model, x_i, t_i, x_j, w, seed):
    """Textbook two-input classifier-free guidance: v_u + w (v_c - v_u).

    The unconditional branch replaces the condition by a Gaussian draw at
    time 1, consuming the generator in modality order as the sampler does.
    """
    rng = np.random.default_rng(seed)
    rng.standard_normal(x_i.shape)  # stand-in for the generated modality, unused
    noise_j = rng.standard_normal(x_j.shape).astype(np.float32)
    v_c = model.velocity({"image": x_i, "text": x_j}, {"image": t_i, "text": 0.0}, only=["image"])["image"]
    v_u = model.velocity({"image": x_i, "text": noise_j}, {"image": t_i, "text": 1.0}, only=["image"])["image"]
    v_c, v_u = v_c.astype(np.float64), v_u.astype(np.float64)
    return v_u + w * (v_c - v_u)


def gaussian_field(mu, sigma):
    """Exact marginal field of the straight path from N(mu, sigma^2) data to N(0, 1), as x0 - x1."""

    def fn(lat, times):
        t = float(times["x"])
        var = (1 - t) ** 2 * sigma ** 2 + t ** 2
        x = lat["x"].astype(np.float64)
        return {"x": (mu - (t - (1 - t) * sigma ** 2) / var * (x - (1 - t) * mu)).astype(np.float32)}

    return fn
