import numpy as np
import pandas as pd
import pytest

from diffprobe.config import ConfigError
from diffprobe.schedule import (
    TimestepSampler,
    WeightingPolicy,
    build_sampler,
    build_schedule,
    dump_schedule,
    sample_timestep,
    sample_timesteps,
    schedule_table,
    weight,
    weights,
)


@pytest.mark.parametrize("kind", ["cosine", "linear"])
def test_schedule_invariants(kind):
    schedule = build_schedule(kind, 1000)

    assert np.all(schedule.beta > 0) and np.all(schedule.beta < 1)
    np.testing.assert_allclose(schedule.alpha, 1.0 - schedule.beta, rtol=0, atol=0)
    assert np.max(np.abs(schedule.alpha_bar - np.cumprod(schedule.alpha))) <= 1e-12
    assert np.all(np.diff(schedule.alpha_bar) < 0)
    assert np.all(np.diff(schedule.snr) < 0)
    assert schedule.alpha_bar[0] < 1.0


@pytest.mark.parametrize("kind", ["cosine", "linear"])
def test_posterior_variance_taylor_bound(kind):
    schedule = build_schedule(kind, 1000)
    for t in range(2, schedule.T + 1):
        beta = schedule.beta[t - 1]
        if beta >= 0.1:
            continue
        ab_prev = schedule.alpha_bar_prev(t)
        bound = beta**2 * ab_prev / (1.0 - ab_prev) * (1.0 + 10.0 * beta)
        assert abs(schedule.posterior_variance[t - 1] - beta) <= bound


def test_cosine_last_beta_is_clipped():
    schedule = build_schedule("cosine", 4, 0.008)
    assert schedule.beta[-1] == pytest.approx(0.999)


def test_linear_endpoints():
    schedule = build_schedule("linear", 1000)
    assert schedule.beta[0] == pytest.approx(1e-4, abs=1e-15)
    assert schedule.beta[-1] == pytest.approx(2e-2, abs=1e-15)
    np.testing.assert_allclose(np.diff(schedule.beta, 2), 0.0, atol=1e-15)


def test_tables_are_read_only(cosine_schedule):
    with pytest.raises(ValueError):
        cosine_schedule.beta[0] = 0.5


@pytest.mark.parametrize(
    "kind, T, offset_s, message",
    [
        ("cosine", 1, 0.008, "T must be an integer >= 2"),
        ("cosine", 10, -0.1, "offset_s must be >= 0"),
        ("sigmoid", 10, 0.008, "Unknown schedule kind"),
    ],
)
def test_build_schedule_rejects_bad_input(kind, T, offset_s, message):
    with pytest.raises(ConfigError, match=message):
        build_schedule(kind, T, offset_s)


def test_check_timestep_is_one_based(cosine_schedule):
    cosine_schedule.check_timestep(1)
    cosine_schedule.check_timestep(1000)
    with pytest.raises(IndexError):
        cosine_schedule.check_timestep(0)
    with pytest.raises(IndexError):
        cosine_schedule.check_timestep(1001)


def test_minsnr_weight_values(cosine_schedule):
    policy = WeightingPolicy("minsnr", 5.0)
    snr = cosine_schedule.snr
    t_low = int(np.argmax(snr < 5.0)) + 1
    assert weight(policy, cosine_schedule, t_low) == 1.0
    assert weight(policy, cosine_schedule, 1) == pytest.approx(5.0 / snr[0])
    assert weight(WeightingPolicy("mse"), cosine_schedule, 500) == 1.0


def test_minsnr_bounded_by_mse(cosine_schedule):
    t = np.arange(1, cosine_schedule.T + 1)
    w_minsnr = weights(WeightingPolicy("minsnr", 5.0), cosine_schedule, t)
    w_mse = weights(WeightingPolicy("mse"), cosine_schedule, t)

    assert np.all(w_minsnr <= w_mse)
    assert np.all(w_minsnr > 0)
    equal = w_minsnr == w_mse
    np.testing.assert_array_equal(equal, cosine_schedule.snr <= 5.0)


def test_weight_rejects_out_of_range(cosine_schedule):
    with pytest.raises(IndexError):
        weight(WeightingPolicy(), cosine_schedule, 0)
    with pytest.raises(IndexError):
        weights(WeightingPolicy(), cosine_schedule, [1, 1001])


def test_weighting_policy_validation():
    with pytest.raises(ConfigError, match="gamma must be positive"):
        WeightingPolicy("minsnr", 0.0)
    with pytest.raises(ConfigError, match="Unknown weighting kind"):
        WeightingPolicy("p2")


@pytest.mark.parametrize("variant", ["mid_emphasis", "schedule"])
def test_sampler_pmf_is_valid(cosine_schedule, variant):
    sampler = build_sampler("squared_cosine", cosine_schedule, variant)
    assert sampler.T == 1000
    assert np.all(sampler.pmf > 0)
    assert abs(sampler.pmf.sum() - 1.0) <= 1e-12


def test_mid_emphasis_is_symmetric(cosine_schedule):
    pmf = build_sampler("squared_cosine", cosine_schedule, "mid_emphasis").pmf
    np.testing.assert_allclose(pmf, pmf[::-1], rtol=1e-12)
    assert pmf[0] == pytest.approx(pmf[-1])
    assert pmf.argmax() in (499, 500)


def test_schedule_variant_decreases(cosine_schedule):
    pmf = build_sampler("squared_cosine", cosine_schedule, "schedule").pmf
    assert np.all(np.diff(pmf) <= 0)


def test_sampler_rejects_invalid_pmf():
    with pytest.raises(ConfigError, match="positive and sum to 1"):
        TimestepSampler("uniform", np.array([0.5, 0.5, 0.0]))
    with pytest.raises(ConfigError, match="positive and sum to 1"):
        TimestepSampler("uniform", np.array([0.5, 0.6]))


def test_unknown_sampler(cosine_schedule):
    with pytest.raises(ConfigError, match="Unknown timestep sampler kind"):
        build_sampler("triangular", cosine_schedule)
    with pytest.raises(ConfigError, match="Unknown squared_cosine variant"):
        build_sampler("squared_cosine", cosine_schedule, "sin4")


def test_uniform_sampling_frequencies(cosine_schedule):
    sampler = build_sampler("uniform", cosine_schedule)
    draws = sample_timesteps(sampler, np.random.default_rng(0), 1_000_000)

    assert draws.min() >= 1 and draws.max() <= 1000
    counts = np.bincount(draws, minlength=1001)[1:]
    expected = 1_000_000 / 1000
    sigma = np.sqrt(1_000_000 * (1 / 1000) * (1 - 1 / 1000))
    assert np.all(np.abs(counts - expected) <= 5 * sigma)


def test_sampling_is_deterministic(cosine_schedule):
    sampler = build_sampler("squared_cosine", cosine_schedule)
    a = sample_timesteps(sampler, np.random.default_rng(7), 100)
    b = sample_timesteps(sampler, np.random.default_rng(7), 100)
    np.testing.assert_array_equal(a, b)
    assert 1 <= sample_timestep(sampler, np.random.default_rng(7)) <= 1000


def test_schedule_table_and_dump(tmp_path):
    schedule = build_schedule("cosine", 50)
    sampler = build_sampler("uniform", schedule)
    table = schedule_table(schedule, sampler)
    assert list(table.columns) == ["t", "beta", "alpha", "alpha_bar", "snr", "w_mse", "w_minsnr", "pmf"]
    assert table["t"].tolist() == list(range(1, 51))

    path = dump_schedule(schedule, sampler, tmp_path / "out" / "schedule.csv")
    reloaded = pd.read_csv(path, float_precision="round_trip")
    np.testing.assert_array_equal(reloaded["alpha_bar"].to_numpy(), schedule.alpha_bar)
