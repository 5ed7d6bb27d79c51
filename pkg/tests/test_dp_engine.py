"""DP engine: clipping, noisy averaging, momentum, closed-form calibration."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from privfl.dp_engine import (
    DpConfig,
    MomentumState,
    clip_gradient,
    gaussian_mechanism_variance,
    hospital_view_epsilon,
    calibrated_noise_variance,
    momentum_step,
    noise_share,
    noisy_average,
    noisy_average_calibrated,
    sgd_update,
)
from privfl.errors import EmptyBatchError
from privfl.model_core import ModelParams, PerSampleGradient


def grad(values):
    return PerSampleGradient(values=np.asarray(values, dtype=np.float64))


def test_clip_halves_norm_four_at_bound_two():
    g = grad([0.0, 4.0])
    out = clip_gradient(g, 2.0)
    assert np.allclose(out.values, [0.0, 2.0])
    assert math.isclose(out.l2_norm(), 2.0)


def test_clip_identity_inside_ball_and_on_zero():
    g = grad([0.6, 0.8])
    assert clip_gradient(g, 2.0) is g
    z = grad([0.0, 0.0])
    assert np.array_equal(clip_gradient(z, 1.0).values, z.values)


def test_clip_rejects_non_finite():
    with pytest.raises(ValueError):
        clip_gradient(grad([np.nan, 1.0]), 1.0)
    with pytest.raises(ValueError):
        clip_gradient(grad([1.0]), 0.0)


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=8),
       st.floats(min_value=0.01, max_value=100.0))
@settings(max_examples=200)
def test_clip_property(values, c):
    out = clip_gradient(grad(values), c)
    norm = np.linalg.norm(values)
    assert out.l2_norm() <= c * (1 + 1e-12)
    if norm <= c:
        assert np.array_equal(out.values, np.asarray(values))
    elif norm > 0:
        # direction preserved
        cos = np.dot(out.values, values) / (out.l2_norm() * norm)
        assert cos == pytest.approx(1.0, abs=1e-9)


def test_noisy_average_zero_noise_is_plain_mean():
    gs = [grad([1.0, 0.0]), grad([0.0, 1.0])]
    out = noisy_average(gs, 0.0, 1.0, 1, np.random.default_rng(0))
    assert np.allclose(out, [0.5, 0.5])


def test_noisy_average_empty_batch_signals():
    with pytest.raises(EmptyBatchError):
        noisy_average([], 1.0, 1.0, 10, np.random.default_rng(0))


def test_noisy_average_rejects_unclipped_input():
    with pytest.raises(ValueError, match="clip"):
        noisy_average([grad([3.0, 4.0])], 1.0, 1.0, 10, np.random.default_rng(0))
    with pytest.raises(ValueError):
        noisy_average([grad([1.0]), grad([1.0, 0.0])], 1.0, 2.0, 10, np.random.default_rng(0))


def test_noise_share_variance_scales_with_hospitals():
    rng = np.random.default_rng(5)
    sigma, c, k = 1.3, 0.7, 10
    draws = noise_share(200_000, sigma, c, k, rng)
    assert np.var(draws) == pytest.approx(sigma**2 * c**2 / k, rel=0.05)
    assert np.array_equal(noise_share(4, 0.0, 1.0, 1, rng), np.zeros(4))


def test_sum_of_hospital_shares_has_effective_variance():
    rng = np.random.default_rng(6)
    sigma, c, k = 1.0, 1.0, 10
    total = sum(noise_share(50_000, sigma, c, k, rng) for _ in range(k))
    assert np.var(total) == pytest.approx(sigma**2 * c**2, rel=0.05)


def test_momentum_recursion_matches_closed_form():
    rng = np.random.default_rng(7)
    beta = 0.9
    grads = [rng.standard_normal(5) for _ in range(12)]
    state = MomentumState.zeros(5)
    for g in grads:
        state = momentum_step(state, g, beta)
    closed = sum(beta**i * grads[-1 - i] for i in range(len(grads)))
    np.testing.assert_allclose(state.buffer, closed, rtol=0, atol=1e-12)
    assert state.step == 12


def test_average_of_momenta_equals_momentum_of_averages():
    rng = np.random.default_rng(8)
    beta, k, rounds, dim = 0.9, 5, 10, 7
    per_hospital = [MomentumState.zeros(dim) for _ in range(k)]
    avg_state = MomentumState.zeros(dim)
    for _ in range(rounds):
        gs = [rng.standard_normal(dim) for _ in range(k)]
        per_hospital = [momentum_step(s, g, beta) for s, g in zip(per_hospital, gs)]
        avg_state = momentum_step(avg_state, np.mean(gs, axis=0), beta)
        mean_buffer = np.mean([s.buffer for s in per_hospital], axis=0)
        np.testing.assert_allclose(mean_buffer, avg_state.buffer, rtol=0, atol=1e-12)


def test_sgd_update_arithmetic():
    params = ModelParams(values=np.array([1.0]), shapes=(("w", (1,)),))
    state = MomentumState(buffer=np.array([2.0]), step=1)
    out = sgd_update(params, state, 0.1)
    assert np.allclose(out.values, [0.8])
    same = sgd_update(params, state, 0.0)
    assert np.array_equal(same.values, params.values)
    zero = sgd_update(params, MomentumState.zeros(1), 0.5)
    assert np.array_equal(zero.values, params.values)


def test_calibrated_variance_closed_form_value():
    # 2 ln(1.25/1e-4) / (1 * 100^2 * 10), evaluated in high precision.
    got = calibrated_noise_variance(1.0, 1e-4, 1.0, 100, 10)
    assert got == pytest.approx(1.8866967846580785e-4, abs=1e-9)


def test_calibrated_variance_scaling_structure():
    base = calibrated_noise_variance(1.0, 1e-4, 1.0, 100, 10)
    assert calibrated_noise_variance(1.0, 1e-4, 1.0, 100, 20) == pytest.approx(base / 2, rel=1e-12)
    assert calibrated_noise_variance(1.0, 1e-4, 2.0, 100, 10) == pytest.approx(base * 4, rel=1e-12)
    with pytest.raises(ValueError):
        calibrated_noise_variance(1.0, 1.25, 1.0, 100, 10)
    assert calibrated_noise_variance(1.0, 1.2, 1.0, 100, 10) > 0


def test_gaussian_mechanism_closed_form_value():
    # 2 ln(1.25/1e-5): high-precision evaluation of the stated closed form
    # gives 23.4721380...; tested against the formula, not a rounded print.
    got = gaussian_mechanism_variance(1.0, 1e-5, 1.0)
    assert got == pytest.approx(23.472138032568876, abs=1e-9)
    assert gaussian_mechanism_variance(1.0, 1e-5, 3.0) == pytest.approx(9 * got, rel=1e-12)
    assert gaussian_mechanism_variance(2.0, 1e-5, 1.0) == pytest.approx(got / 4, rel=1e-12)
    with pytest.raises(ValueError):
        gaussian_mechanism_variance(1.0, 1.3, 1.0)


def test_hospital_view_bound():
    assert hospital_view_epsilon(1.0, 2) == pytest.approx(math.sqrt(2.0), rel=1e-12)
    assert hospital_view_epsilon(0.5, 10) == pytest.approx(0.5270462766947299, abs=1e-6)
    assert 1.0 < hospital_view_epsilon(1.0, 10_000) < 1.0001
    with pytest.raises(ValueError):
        hospital_view_epsilon(1.0, 1)


def test_calibrated_average_variance():
    rng = np.random.default_rng(9)
    eps, delta, c, k = 1.0, 1e-4, 1.0, 10
    gs = [grad(np.zeros(100_000)) for _ in range(4)]
    out = noisy_average_calibrated(gs, eps, delta, c, k, rng)
    expected = calibrated_noise_variance(eps, delta, c, len(gs), k)
    assert np.var(out) == pytest.approx(expected, rel=0.05)
    with pytest.raises(EmptyBatchError):
        noisy_average_calibrated([], eps, delta, c, k, rng)


def test_dp_config_validation():
    DpConfig()  # defaults are valid
    with pytest.raises(ValueError):
        DpConfig(sampling_prob=0.0)
    with pytest.raises(ValueError):
        DpConfig(sampling_prob=1.1)
    with pytest.raises(ValueError):
        DpConfig(noise_multiplier=-0.1)
    with pytest.raises(ValueError):
        DpConfig(momentum=1.0)
    with pytest.raises(ValueError):
        DpConfig(delta=0.0)
    with pytest.raises(ValueError):
        DpConfig(hospitals=0)
    with pytest.raises(ValueError):
        DpConfig(calibration="other")
    assert DpConfig(epsilon=math.inf).epsilon == math.inf
    assert DpConfig(hospitals=1).hospitals == 1
    assert DpConfig(noise_multiplier=0.0).noise_multiplier == 0.0


def test_dp_config_defaults_match_documented_starting_points():
    cfg = DpConfig()
    assert cfg.learning_rate == 0.1
    assert cfg.noise_multiplier == 1.0
    assert cfg.clip_norm == 1.0
    assert cfg.sampling_prob == 0.3
    assert cfg.momentum == 0.9
