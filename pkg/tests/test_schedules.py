import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmflow import schedules as S
from mmflow.errors import ConfigError, DomainError

RF = S.ForwardSchedule(S.RECTIFIED_FLOW)
COS = S.ForwardSchedule(S.COSINE)
DDPM = S.ForwardSchedule(S.DDPM_LINEAR)
ALL = [RF, COS, DDPM]


def _ddpm_product(idx, b0=0.00085, b1=0.012, T=1000):
    """Multiply out the cumulative product term by term in plain floats."""
    prod = 1.0
    for i in range(idx + 1):
        root = math.sqrt(b0) + i / (T - 1) * (math.sqrt(b1) - math.sqrt(b0))
        prod *= 1.0 - root * root
    return math.sqrt(prod), math.sqrt(1.0 - prod)


def test_endpoints():
    assert S.alpha_beta(RF, 0.0) == (1.0, 0.0)
    assert S.alpha_beta(COS, 0.0) == (1.0, 0.0)
    assert S.alpha_beta(RF, 1.0) == (0.0, 1.0)
    assert S.alpha_beta(COS, 1.0) == (0.0, 1.0)


def test_cosine_midpoint():
    a, b = S.alpha_beta(COS, 0.5)
    assert a == pytest.approx(math.sqrt(2) / 2, abs=1e-12)
    assert b == pytest.approx(math.sqrt(2) / 2, abs=1e-12)


@pytest.mark.parametrize("idx", [0, 1, 500, 998, 999])
def test_ddpm_matches_product_oracle(idx):
    a, b = S.alpha_beta(DDPM, idx / 999)
    ea, eb = _ddpm_product(idx)
    assert a == pytest.approx(ea, rel=1e-10)
    assert b == pytest.approx(eb, rel=1e-10)


def test_ddpm_start_is_nearly_clean_and_end_nearly_noise():
    a0, b0 = S.alpha_beta(DDPM, 0.0)
    a1, b1 = S.alpha_beta(DDPM, 1.0)
    assert a0 > 0.999 and b0 < 0.03
    assert a1 < 0.1 and b1 > 0.99


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 1.0))
def test_coefficient_identities(t):
    a, b = S.alpha_beta(RF, t)
    assert a + b == 1.0
    a, b = S.alpha_beta(COS, t)
    assert abs(a * a + b * b - 1.0) < 1e-6
    for s in ALL:
        a, b = S.alpha_beta(s, t)
        assert 0.0 <= a <= 1.0 and 0.0 <= b <= 1.0


def test_log_snr_values():
    assert S.snr_lambda(RF, 0.5) == 0.0
    assert abs(S.snr_lambda(COS, 0.5)) < 1e-12
    assert S.snr_lambda(RF, 0.25) == pytest.approx(math.log(9), rel=1e-12)


@pytest.mark.parametrize("s", [RF, COS], ids=["rf", "cosine"])
def test_log_snr_derivative_matches_central_difference(s):
    h = 1e-3
    for t in np.linspace(0.1, 0.9, 81):
        fd = (S.snr_lambda(s, t + h) - S.snr_lambda(s, t - h)) / (2 * h)
        assert abs(S.snr_lambda_derivative(s, t) - fd) <= 1e-3 * abs(fd)


def test_ddpm_log_snr_derivative_matches_index_difference():
    dt = 1 / 999
    for idx in range(100, 900, 10):
        t = idx * dt
        fd = (S.snr_lambda(DDPM, t + dt) - S.snr_lambda(DDPM, t - dt)) / (2 * dt)
        assert abs(S.snr_lambda_derivative(DDPM, t) - fd) <= 1e-3 * abs(fd)


@pytest.mark.parametrize("t", [0.0, 1.0, -0.1, 1.5])
def test_log_snr_domain(t):
    with pytest.raises(DomainError):
        S.snr_lambda(RF, t)


def test_alpha_beta_domain():
    with pytest.raises(DomainError):
        S.alpha_beta(RF, 1.01)
    with pytest.raises(DomainError):
        S.alpha_beta(COS, float("nan"))


def test_weights_at_midpoint():
    assert S.loss_weight(RF, S.VELOCITY, 0.5) == pytest.approx(1.0, abs=1e-12)
    assert S.loss_weight(COS, S.V, 0.5) == pytest.approx(1.0, abs=1e-12)


def test_rf_weight_closed_forms_agree():
    for t in np.round(np.arange(0.1, 0.95, 0.1), 10):
        _, b = S.alpha_beta(RF, t)
        w = -0.5 * S.snr_lambda_derivative(RF, t) * b * b
        assert w == pytest.approx(t / (1 - t), rel=1e-12)
        assert S.loss_weight(RF, S.VELOCITY, t) == pytest.approx(t / (1 - t), rel=1e-12)


def test_weight_domain_and_names():
    with pytest.raises(DomainError):
        S.loss_weight(RF, S.VELOCITY, 1.0)
    with pytest.raises(ConfigError):
        S.loss_weight(RF, "x0", 0.5)
    with pytest.raises(ConfigError):
        S.loss_weight(COS, S.V, 0.5, v_weight="snr")


def test_velocity_target_needs_no_reweighting():
    t = np.linspace(0.05, 0.95, 7)
    np.testing.assert_array_equal(S.target_weight(RF, S.VELOCITY, t), np.ones(7))


@pytest.mark.parametrize("t", [0.2, 0.5, 0.8])
def test_rf_velocity_to_eps_recovers_noise(t):
    rng = np.random.default_rng(1)
    x0, x1 = rng.standard_normal((2, 5, 3))
    x_t = (1 - t) * x0 + t * x1
    eps = S.convert_prediction(S.VELOCITY, S.EPS, x1 - x0, x_t, RF, t)
    np.testing.assert_allclose(eps, x1, rtol=1e-12, atol=1e-12)


def test_same_parameterization_is_identity():
    pred = np.arange(6.0).reshape(2, 3)
    assert S.convert_prediction(S.V, S.V, pred, pred, COS, 0.3) is pred


@pytest.mark.parametrize("s", ALL, ids=lambda s: s.kind)
def test_exact_targets_convert_into_each_other(s):
    rng = np.random.default_rng(2)
    x0, x1 = rng.standard_normal((2, 4, 3))
    for t in (0.1, 0.37, 0.9):
        a, b = S.alpha_beta(s, t)
        x_t = a * x0 + b * x1
        targets = {p: S.make_target(p, s, x0, x1, t) for p in S.PARAMETERIZATIONS}
        for src in S.PARAMETERIZATIONS:
            for dst in S.PARAMETERIZATIONS:
                out = S.convert_prediction(src, dst, targets[src], x_t, s, t)
                np.testing.assert_allclose(out, targets[dst], rtol=1e-8, atol=1e-8)


@settings(max_examples=100, deadline=None)
@given(st.floats(0.05, 0.95), st.integers(0, 2**31), st.sampled_from(["rf", "cosine", "ddpm-linear"]),
       st.sampled_from(["velocity", "eps", "v"]), st.sampled_from(["velocity", "eps", "v"]))
def test_conversion_round_trip(t, seed, kind, p, q):
    s = S.ForwardSchedule(kind)
    rng = np.random.default_rng(seed)
    pred = rng.standard_normal((3, 4)).astype(np.float32)
    x_t = rng.standard_normal((3, 4)).astype(np.float32)
    back = S.convert_prediction(q, p, S.convert_prediction(p, q, pred, x_t, s, t), x_t, s, t)
    np.testing.assert_allclose(back, pred, rtol=1e-5, atol=1e-5)


def test_conversion_errors():
    x = np.zeros((2, 2))
    with pytest.raises(DomainError):
        S.convert_prediction(S.VELOCITY, S.EPS, x, x, RF, 0.0)
    with pytest.raises(DomainError):
        S.convert_prediction(S.VELOCITY, S.EPS, np.zeros(3), x, RF, 0.5)
    with pytest.raises(ConfigError):
        S.convert_prediction("score", S.EPS, x, x, RF, 0.5)


def test_per_sample_times_broadcast_over_rows():
    rng = np.random.default_rng(3)
    x0, x1 = rng.standard_normal((2, 4, 3))
    t = np.array([0.1, 0.4, 0.6, 0.9])
    v = S.make_target(S.V, COS, x0, x1, t)
    for k in range(4):
        np.testing.assert_allclose(v[k], S.make_target(S.V, COS, x0[k], x1[k], t[k]))


def test_logit_normal_is_centred():
    draws = S.sample_timestep(S.parse_sampler("lognorm(0,1)"), np.random.default_rng(0), 10**6)
    assert abs(draws.mean() - 0.5) < 0.01


def test_uniform_sampler_ks_distance():
    draws = np.sort(S.sample_timestep(S.parse_sampler("uniform"), np.random.default_rng(0), 10**5))
    n = draws.size
    ks = max(np.max(np.arange(1, n + 1) / n - draws), np.max(draws - np.arange(n) / n))
    assert ks < 0.01


@pytest.mark.parametrize("name", ["uniform", "lognorm", "lognorm(0,1)", "lognorm(-3,0.5)", "lognorm(4,2)"])
def test_samples_inside_open_interval(name):
    draws = S.sample_timestep(S.parse_sampler(name), np.random.default_rng(5), 10**5)
    assert np.all(draws > 0.0) and np.all(draws < 1.0)
    assert draws.min() >= S.T_CLAMP and draws.max() <= 1 - S.T_CLAMP


def test_sampler_names():
    assert S.parse_sampler("lognorm(0.5, 2)") == S.TimestepSampler("lognorm", 0.5, 2.0)
    assert S.parse_sampler("lognorm(0.5,2)").name == "lognorm(0.5,2)"
    for bad in ("gauss", "lognorm(1)", "lognorm(0,-1)"):
        with pytest.raises(ConfigError):
            S.parse_sampler(bad)


def test_shift_values():
    assert S.shift_time(0.5, 3.0) == pytest.approx(0.75, abs=1e-15)
    grid = np.linspace(0, 1, 11)
    np.testing.assert_array_equal(S.shift_time(grid, 1.0), grid)
    for g in (0.2, 1.0, 3.0, 10.0):
        assert S.shift_time(0.0, g) == 0.0 and S.shift_time(1.0, g) == 1.0


@settings(max_examples=50, deadline=None)
@given(st.floats(1e-3, 1e3))
def test_shift_is_strictly_increasing(gamma):
    y = S.shift_time(np.linspace(0, 1, 1000), gamma)
    assert np.all(np.diff(y) > 0)


def test_shift_errors():
    for g in (0.0, -1.0):
        with pytest.raises(DomainError):
            S.shift_time(0.5, g)
    with pytest.raises(DomainError):
        S.shift_time(1.5, 2.0)


def test_unknown_schedule():
    with pytest.raises(ConfigError):
        S.ForwardSchedule("edm")
