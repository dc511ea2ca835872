from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from carfl.dp import (
    DpConfig,
    DpConfigError,
    DpState,
    adapt_threshold,
    clip_update,
    dp_active,
    dp_transform,
    flat_norm,
    init_dp,
    noise_multiplier_delta,
    noise_variance,
    sample_noise,
)
from carfl.rng import Stream

finite = st.floats(-1e3, 1e3, allow_nan=False)


@given(arrays(np.float64, st.integers(1, 20), elements=finite),
       arrays(np.float64, (2, 3), elements=finite),
       st.floats(1e-3, 1e3))
def test_clip_norm_law(a, b, C):
    delta = [a, b]
    norm = flat_norm(delta)
    out = clip_update(delta, C)
    assert flat_norm(out) == pytest.approx(min(norm, C), rel=1e-12, abs=1e-300)
    if norm > 0:
        cos = sum(np.sum(x * y) for x, y in zip(out, delta)) / (flat_norm(out) * norm)
        assert cos == pytest.approx(1.0, abs=1e-9)


def test_clip_below_threshold_is_identity_and_zero_is_kept():
    d = [np.array([0.3, 0.4])]
    assert np.array_equal(clip_update(d, 0.5)[0], d[0])
    assert np.array_equal(clip_update([np.zeros(3)], 1.0)[0], np.zeros(3))
    with pytest.raises(ValueError):
        clip_update(d, 0.0)


def test_noise_multiplier_hand_calculation():
    # sigma_b = 0.1, so z_delta = (1/0.01 - 1/0.04)^-1/2 = 75^-1/2.
    z_delta, sigma_b = noise_multiplier_delta(0.1, 2)
    assert sigma_b == 0.1
    assert z_delta == pytest.approx(0.115470, abs=1e-6)
    assert z_delta == pytest.approx(1 / math.sqrt(75), rel=1e-15)


@pytest.mark.parametrize("z,m", [(0.2, 2), (0.25, 2), (0.1, 1)])
def test_noise_multiplier_undefined_region(z, m):
    with pytest.raises(DpConfigError):
        noise_multiplier_delta(z, m)


def test_fixed_and_adaptive_calibration():
    s = init_dp(DpConfig(mode="fixed", c0=2.0, sigma0=0.3), m=4)
    assert (s.C, s.sigma0_sq, s.sigma1_sq) == (2.0, pytest.approx(0.36), 0.0)
    cfg = DpConfig(mode="adaptive", c0=1.5, beta=0.2, gamma=0.8, z=0.1)
    a = init_dp(cfg, m=2)
    zd2 = 1 / 75
    assert a.sigma0_sq == pytest.approx(2 * zd2 * 0.8 ** 2 * 1.5 ** 2, rel=1e-12)
    assert a.sigma1_sq == pytest.approx(2 * zd2 * 0.2 ** 2 * 0.8 ** 2, rel=1e-12)


def test_noise_variance_matches_calibration_at_a_million_samples():
    state = DpState(C=1.0, sigma0_sq=0.04, sigma1_sq=0.5)
    norm_sq = 0.3
    target = noise_variance(state, norm_sq)
    assert target == pytest.approx(0.19)
    n = 1_000_000
    noise = sample_noise([(n // 2,), (n // 2,)], state, norm_sq, Stream(123))
    x = np.concatenate(noise)
    var = float(np.mean(x ** 2))
    se = target * math.sqrt(2.0 / n)
    assert abs(var - target) < 4 * se
    assert abs(float(np.mean(x))) < 4 * math.sqrt(target / n)


def test_zero_variance_noise_is_exact_zero():
    out = sample_noise([(2, 2)], DpState(1.0, 0.0, 0.0), 5.0, Stream(0))
    assert np.array_equal(out[0], np.zeros((2, 2)))


def test_off_mode_returns_plain_sum_without_touching_rng():
    rng = Stream(9)
    p, d = [np.array([1.0, 2.0])], [np.array([10.0, -5.0])]
    out, clipped = dp_transform(p, d, init_dp(DpConfig(), 1), DpConfig(), rng)
    assert np.array_equal(out[0], p[0] + d[0]) and not clipped
    assert rng.counter == 0


def test_transform_clips_then_adds_seeded_noise():
    cfg = DpConfig(mode="fixed", c0=1.0, sigma0=0.5)
    state = init_dp(cfg, 1)
    p, d = [np.zeros(3)], [np.array([3.0, 0.0, 4.0])]
    out, clipped = dp_transform(p, d, state, cfg, Stream(4))
    expected = np.array([0.6, 0.0, 0.8]) + 0.5 * Stream(4).normal(3)
    np.testing.assert_allclose(out[0], expected, atol=1e-15)
    assert clipped
    with pytest.raises(ValueError):
        dp_transform(p, [np.zeros(2)], state, cfg, Stream(4))


def test_threshold_converges_to_gamma_times_norm():
    cfg = DpConfig(mode="adaptive", c0=1.0, beta=0.1, gamma=0.9, z=0.1)
    state = init_dp(cfg, 2)
    d = 0.5
    for step in range(1, 201):
        state = adapt_threshold(state, cfg, d)
        if abs(state.C - 0.9 * d) <= 0.01 * 0.9 * d:
            break
    assert step <= 200
    # Closed form: C_t = gamma d + (1 - beta)^t (C_0 - gamma d).
    assert state.C == pytest.approx(0.45 + 0.9 ** step * 0.55, rel=1e-12)
    assert state.sigma0_sq == pytest.approx(2 * state.z_delta ** 2 * 0.81 * state.C ** 2)


def test_adapt_threshold_rejects_other_modes():
    with pytest.raises(RuntimeError):
        adapt_threshold(init_dp(DpConfig(mode="fixed"), 1), DpConfig(mode="fixed"), 1.0)


def test_warmup_and_config_validation():
    cfg = DpConfig(mode="fixed", warmup_rounds=2)
    assert [dp_active(cfg, t) for t in range(4)] == [False, False, True, True]
    assert not dp_active(DpConfig(), 10)
    for bad in (dict(mode="nope"), dict(mode="fixed", c0=0.0), dict(mode="adaptive", beta=0.0),
                dict(mode="adaptive", beta=1.5), dict(mode="adaptive", z=-1.0),
                dict(warmup_rounds=-1)):
        with pytest.raises(DpConfigError):
            DpConfig(**bad)
