import numpy as np
import pytest

from mmflow.errors import ConfigError, UsageError
from mmflow.paths import ModalitySpec, task_path
from mmflow.sampler import (GuidanceMatrix, SamplerConfig, delta_ij, euler_sample, guided_velocity,
                            parse_guidance, sample_chunked, sample_marginal, time_grid)
from mmflow.training import FlowModel, MultiModalState

from helpers import AnalyticField, gaussian_field, pair_model, reference_cfg, toy_transformer

# --- grid and parsing -----------------------------------------------------


def test_time_grid():
    np.testing.assert_allclose(time_grid(4, 1.0), [1.0, 0.75, 0.5, 0.25, 0.0])
    g = time_grid(10, 3.0)
    assert g[0] == 1.0 and g[-1] == 0.0 and np.all(np.diff(g) < 0)
    # a shift above one packs the early (noisy) steps closer together
    assert g[0] - g[1] < g[-2] - g[-1]


def test_parse_guidance():
    g = parse_guidance(["1,2=4", " 1 , 3 = 8.5 "], 3)
    assert g.alpha[0, 1] == 4.0 and g.alpha[0, 2] == 8.5 and g.alpha[1, 0] == 1.0
    for bad in (["1,1=2"], ["4,1=2"], ["1-2=3"], ["1,2=-1"]):
        with pytest.raises(ConfigError):
            parse_guidance(bad, 3)


def test_sampler_config_validation():
    with pytest.raises(ConfigError):
        SamplerConfig(steps=0)
    with pytest.raises(ConfigError):
        SamplerConfig(gamma=0.0)


# --- guidance ---------------------------------------------------------------


def test_two_modality_guidance_is_classifier_free_guidance():
    model = pair_model()
    rng = np.random.default_rng(1)
    worst = 0.0
    for k in range(50):
        x_i = rng.standard_normal((3, 4, 4)).astype(np.float32)
        x_j = rng.standard_normal((3, 3, 4)).astype(np.float32)
        t_i = float(rng.uniform(0.01, 0.99))
        state = MultiModalState({"image": x_i, "text": x_j}, {"image": t_i, "text": 0.0})
        for w in (1.0, 2.0, 4.0, 8.0):
            g = GuidanceMatrix.from_entries(2, {(0, 1): w})
            ours = guided_velocity(model, state, 0, g, np.random.default_rng(k))
            ref = reference_cfg(model, x_i, t_i, x_j, w, k)
            worst = max(worst, float(np.max(np.abs(ours - ref))))
    assert worst < 1e-6


def test_unit_guidance_returns_base_prediction():
    model = pair_model()
    rng = np.random.default_rng(2)
    state = MultiModalState({"image": rng.standard_normal((2, 4, 4)).astype(np.float32),
                             "text": rng.standard_normal((2, 3, 4)).astype(np.float32)},
                            {"image": 0.4, "text": 0.0})
    base = model.velocity(state.latents, state.times, only=["image"])["image"]
    out = guided_velocity(model, state, 0, GuidanceMatrix.none(2), rng)
    np.testing.assert_array_equal(out, base)


def test_delta_vanishes_for_a_model_that_ignores_the_source():
    specs = [ModalitySpec("a", (2,)), ModalitySpec("b", (2,))]
    model = AnalyticField(specs, lambda lat, t: {"a": 2.0 * lat["a"], "b": lat["b"] - lat["a"]})
    state = MultiModalState({"a": np.ones((3, 2), np.float32), "b": np.full((3, 2), 5.0, np.float32)},
                            {"a": 0.3, "b": 0.0})
    np.testing.assert_array_equal(delta_ij(model, state, 0, 1, np.random.default_rng(0)), np.zeros((3, 2)))
    d1 = delta_ij(model, MultiModalState(state.latents, {"a": 0.0, "b": 0.5}), 1, 0, np.random.default_rng(4))
    d2 = delta_ij(model, MultiModalState(state.latents, {"a": 0.0, "b": 0.5}), 1, 0, np.random.default_rng(4))
    np.testing.assert_array_equal(d1, d2)
    with pytest.raises(UsageError):
        delta_ij(model, MultiModalState(state.latents, {"a": 0.3, "b": 0.2}), 0, 1, np.random.default_rng(0))


def test_only_active_sources_contribute():
    net = toy_transformer(np.random.default_rng(3))
    model = FlowModel(net)
    rng = np.random.default_rng(4)
    lat = {s.name: rng.standard_normal((2,) + s.shape).astype(np.float32) for s in net.specs}
    state = MultiModalState(lat, {"image": 0.6, "text": 0.0, "audio": 0.0})
    g = GuidanceMatrix.from_entries(3, {(0, 1): 2.0, (0, 2): 1.0})
    ours = guided_velocity(model, state, 0, g, np.random.default_rng(5))
    base = model.velocity(lat, state.times, only=["image"])["image"]
    d12 = delta_ij(model, state, 0, 1, np.random.default_rng(5))
    np.testing.assert_allclose(ours, base.astype(np.float64) + d12, atol=1e-6)


# --- integration ------------------------------------------------------------


def test_linear_gaussian_convergence():
    mu, sigma = 1.5, 0.5
    spec = [ModalitySpec("x", (1,))]
    path = task_path("path(start=[1],end=[0])", ["x"])
    errors = []
    for steps in (10, 100, 1000):
        model = AnalyticField(spec, gaussian_field(mu, sigma))
        rng = np.random.default_rng(0)
        out = euler_sample(model, path, {}, SamplerConfig(steps=steps, gamma=1.0), rng, count=2000)["x"]
        z = np.random.default_rng(0).standard_normal((2000, 1)).astype(np.float32)
        errors.append(float(np.mean(np.abs(out - (mu + sigma * z)))))
    assert errors[0] > errors[1] > errors[2]
    # first-order method: ten times the steps, roughly a tenth of the error
    assert 5 < errors[0] / errors[1] < 20
    assert 5 < errors[1] / errors[2] < 20


def test_one_step_with_exact_coupling_velocity_lands_on_data():
    rng = np.random.default_rng(1)
    x0 = (rng.standard_normal((100, 3)) @ np.array([[1.0, 0.5, 0], [0, 2.0, 0], [0, 0, 0.3]]) + 4.0).astype(np.float32)
    spec = [ModalitySpec("x", (3,))]
    model = AnalyticField(spec, lambda lat, t: {"x": x0 - lat["x"]})
    out = euler_sample(model, task_path("path(start=[1],end=[0])", ["x"]), {}, SamplerConfig(steps=1, gamma=1.0),
                       np.random.default_rng(2), count=100)["x"]
    np.testing.assert_allclose(out, x0, atol=1e-6)


def test_conditioning_is_returned_untouched():
    net = toy_transformer(np.random.default_rng(5))
    model = FlowModel(net)
    rng = np.random.default_rng(6)
    text = rng.standard_normal((2, 8, 4)).astype(np.float32)
    out = euler_sample(model, task_path("t2i", model.names), {"text": text}, SamplerConfig(steps=3), rng)
    np.testing.assert_array_equal(out["text"], text)
    with pytest.raises(UsageError):
        euler_sample(model, task_path("t2i", model.names), {}, SamplerConfig(steps=3), rng, count=2)


def test_unit_guidance_trajectory_matches_unguided():
    net = toy_transformer(np.random.default_rng(7))
    model = FlowModel(net)
    text = np.random.default_rng(8).standard_normal((2, 8, 4)).astype(np.float32)
    path = task_path("t2ia", model.names)
    a = euler_sample(model, path, {"text": text}, SamplerConfig(steps=4), np.random.default_rng(9))
    b = euler_sample(model, path, {"text": text}, SamplerConfig(steps=4, guidance=GuidanceMatrix.none(3)),
                     np.random.default_rng(9))
    for n in a:
        np.testing.assert_array_equal(a[n], b[n])


def test_marginal_sampling_holds_the_bystander():
    spec = [ModalitySpec("image", (2,)), ModalitySpec("text", (2,)), ModalitySpec("audio", (2,))]
    model = AnalyticField(spec, lambda lat, t: {n: 0.1 * lat["text"] - lat[n] for n in lat})
    text = np.ones((4, 2), np.float32)
    cfg = SamplerConfig(steps=5)
    out = sample_marginal(model, {"text": text}, "image", cfg, np.random.default_rng(0))
    bystander = [c[0]["audio"] for c in model.calls]
    assert all(np.array_equal(b, bystander[0]) for b in bystander)
    assert all(c[1]["audio"] == 1.0 for c in model.calls)
    explicit = euler_sample(model, task_path("path(start=[1,0,1],end=[0,0,1])", model.names), {"text": text}, cfg,
                            np.random.default_rng(0))["image"]
    np.testing.assert_array_equal(out, explicit)
    with pytest.raises(UsageError):
        sample_marginal(model, {"text": text}, "video", cfg, np.random.default_rng(0))
    with pytest.raises(UsageError):
        sample_marginal(model, {"text": text}, "text", cfg, np.random.default_rng(0))


def test_bystander_noise_influences_the_target():
    model = FlowModel(toy_transformer(np.random.default_rng(10)))
    text = np.random.default_rng(11).standard_normal((2, 8, 4)).astype(np.float32)
    cfg = SamplerConfig(steps=3)

    class ShiftedBystander:
        """Same model, same generator, but the held audio noise is offset."""

        names, specs = model.names, model.specs

        def velocity(self, latents, times, only=None):
            return model.velocity({**latents, "audio": latents["audio"] + 1.0}, times, only)

    a = sample_marginal(model, {"text": text}, "image", cfg, np.random.default_rng(12))
    b = sample_marginal(ShiftedBystander(), {"text": text}, "image", cfg, np.random.default_rng(12))
    assert np.max(np.abs(a - b)) > 1e-5


def test_chunked_sampling_shapes():
    spec = [ModalitySpec("x", (2,))]
    model = AnalyticField(spec, lambda lat, t: {"x": -lat["x"]})
    path = task_path("path(start=[1],end=[0])", ["x"])
    out = sample_chunked(model, path, 25, SamplerConfig(steps=2, chunk=10), np.random.default_rng(0))
    assert out["x"].shape == (25, 2)
    assert sample_chunked(model, path, 0, SamplerConfig(steps=2), np.random.default_rng(0))["x"].shape == (0, 2)
