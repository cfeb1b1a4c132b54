import numpy as np
import pytest
import torch

from diffprobe.denoiser import Denoiser
from diffprobe.diffusion import (
    SNR_BINS,
    DiffusionError,
    TrainingDivergedError,
    bin_losses_by_snr,
    corrupt,
    ddim_sample,
    ddim_step,
    ddim_timesteps,
    ddpm_sample,
    ddpm_step,
    posterior,
    snr_bin_edges,
    to_image_range,
    to_model_range,
    training_loss,
    weighted_denoising_loss,
    x0_estimate,
)
from diffprobe.schedule import WeightingPolicy, build_sampler, build_schedule

F64 = torch.float64


@pytest.fixture
def short_schedule():
    return build_schedule("cosine", 50)


@pytest.fixture
def clean_batch():
    generator = torch.Generator().manual_seed(0)
    return torch.rand(3, 1, 8, 8, generator=generator, dtype=F64) * 1.8 - 0.9


def test_range_conversion_round_trip():
    images = torch.rand(2, 1, 4, 4)
    assert torch.allclose(to_image_range(to_model_range(images)), images)
    assert to_model_range(torch.tensor([0.0, 1.0])).tolist() == [-1.0, 1.0]


def test_corrupt_is_closed_form(cosine_schedule, clean_batch):
    eps = torch.randn(clean_batch.shape, dtype=F64)
    t = torch.tensor([1, 500, 1000])
    noised = corrupt(cosine_schedule, clean_batch, t, eps=eps)

    ab = torch.from_numpy(cosine_schedule.alpha_bar[t.numpy() - 1]).reshape(-1, 1, 1, 1)
    assert torch.allclose(noised.xt, ab.sqrt() * clean_batch + (1 - ab).sqrt() * eps, atol=1e-15)
    again = corrupt(cosine_schedule, clean_batch, t, eps=eps)
    assert torch.equal(noised.xt, again.xt)


def test_corrupt_at_last_step_is_almost_noise(cosine_schedule, clean_batch):
    eps = torch.randn(clean_batch.shape, dtype=F64)
    noised = corrupt(cosine_schedule, clean_batch, 1000, eps=eps)
    assert torch.allclose(noised.xt, eps, atol=1e-2)


def test_corrupt_moments(cosine_schedule):
    t = 300
    x0 = torch.full((1000, 1, 10, 10), 0.4, dtype=F64)
    noised = corrupt(cosine_schedule, x0, t, generator=torch.Generator().manual_seed(1))
    ab = cosine_schedule.alpha_bar[t - 1]
    noise_part = noised.xt - np.sqrt(ab) * x0

    n = noised.xt.numel()
    mean_tolerance = 3 * np.sqrt((1 - ab) / n)
    assert abs(float(noised.xt.mean()) - np.sqrt(ab) * 0.4) <= mean_tolerance
    var_tolerance = 3 * (1 - ab) * np.sqrt(2 / n)
    assert abs(float(noise_part.var()) - (1 - ab)) <= var_tolerance


def test_corrupt_rejects_bad_timesteps(short_schedule, clean_batch):
    with pytest.raises(DiffusionError, match=r"outside 1\.\.50"):
        corrupt(short_schedule, clean_batch, 0)
    with pytest.raises(DiffusionError, match=r"outside 1\.\.50"):
        corrupt(short_schedule, clean_batch, 51)


def test_zero_prediction_loss_is_about_one():
    eps = torch.randn(64, 1, 32, 32, generator=torch.Generator().manual_seed(0), dtype=F64)
    loss, per_item = weighted_denoising_loss(eps, torch.zeros_like(eps), torch.ones(64))
    assert per_item.shape == (64,)
    assert float(loss) == pytest.approx(1.0, abs=0.02)


@pytest.fixture
def tiny_f64_denoiser(tiny_model_config):
    torch.manual_seed(0)
    model = Denoiser(tiny_model_config, num_timesteps=20, dtype=F64)
    with torch.no_grad():
        model.conv_out.weight.normal_(0.0, 0.1)
    return model


def test_minsnr_loss_is_weighted_mse_loss(tiny_f64_denoiser):
    schedule = build_schedule("cosine", 20)
    sampler = build_sampler("uniform", schedule)
    x0 = torch.rand(4, 1, 8, 8, dtype=F64) * 2 - 1
    eps = torch.randn(x0.shape, dtype=F64)
    t = torch.full((4,), 2)
    rng = np.random.default_rng(0)

    mse = training_loss(
        tiny_f64_denoiser, schedule, WeightingPolicy("mse"), x0, sampler, rng,
        t=t, eps=eps, backward=False,
    )
    minsnr = training_loss(
        tiny_f64_denoiser, schedule, WeightingPolicy("minsnr", 5.0), x0, sampler, rng,
        t=t, eps=eps, backward=False,
    )
    w = minsnr.weights[0]
    assert w < 1.0
    np.testing.assert_array_equal(mse.per_item, minsnr.per_item)
    assert minsnr.loss == pytest.approx(w * mse.loss, rel=1e-12)


def test_training_loss_populates_gradients(tiny_f64_denoiser):
    schedule = build_schedule("cosine", 20)
    sampler = build_sampler("squared_cosine", schedule)
    x0 = torch.rand(4, 1, 8, 8, dtype=F64) * 2 - 1
    result = training_loss(
        tiny_f64_denoiser, schedule, WeightingPolicy(), x0, sampler, np.random.default_rng(0),
        generator=torch.Generator().manual_seed(0),
    )
    assert np.isfinite(result.loss)
    assert result.t.min() >= 1 and result.t.max() <= 20
    assert tiny_f64_denoiser.conv_out.weight.grad is not None


def test_training_loss_detects_divergence():
    schedule = build_schedule("cosine", 20)
    sampler = build_sampler("uniform", schedule)

    def broken(xt, t):
        return torch.full_like(xt, float("nan"))

    with pytest.raises(TrainingDivergedError, match="Non-finite loss at step 7"):
        training_loss(
            broken, schedule, WeightingPolicy(), torch.zeros(2, 1, 4, 4), sampler,
            np.random.default_rng(0), step=7, backward=False,
        )


def test_x0_estimate_inverts_corruption(cosine_schedule, clean_batch):
    eps = torch.randn(clean_batch.shape, dtype=F64)
    t = torch.tensor([1, 400, 900])
    noised = corrupt(cosine_schedule, clean_batch, t, eps=eps)
    x0_hat = x0_estimate(cosine_schedule, noised.xt, t, eps)
    assert torch.allclose(x0_hat, clean_batch, atol=1e-9)


def test_posterior_needs_t_of_at_least_two(short_schedule, clean_batch):
    with pytest.raises(DiffusionError, match="t >= 2"):
        posterior(short_schedule, clean_batch, clean_batch, 1)


def test_posterior_variance_matches_table(short_schedule, clean_batch):
    _, variance = posterior(short_schedule, clean_batch, clean_batch, 10)
    assert torch.allclose(variance, torch.full_like(variance, short_schedule.posterior_variance[9]))


def test_ddpm_terminal_step_returns_x0_estimate(short_schedule, clean_batch):
    eps = torch.randn(clean_batch.shape, dtype=F64)
    noised = corrupt(short_schedule, clean_batch, 1, eps=eps)
    x, _, std = ddpm_step(short_schedule, noised.xt, 1, eps, z=None)
    assert torch.allclose(x, clean_batch, atol=1e-9)
    assert float(std) == 0.0


def test_ddpm_with_oracle_recovers_x0(short_schedule, clean_batch, oracle_denoiser):
    generator = torch.Generator().manual_seed(0)
    x_T = torch.randn(clean_batch.shape, generator=generator, dtype=F64)
    images = ddpm_sample(oracle_denoiser(short_schedule, clean_batch), short_schedule, 3, generator, x_T=x_T)
    assert torch.allclose(images, to_image_range(clean_batch), atol=1e-7)


@pytest.mark.parametrize("start_t", [1, 17, 50])
def test_single_ddim_jump_with_oracle(short_schedule, clean_batch, start_t):
    eps = torch.randn(clean_batch.shape, dtype=F64)
    noised = corrupt(short_schedule, clean_batch, start_t, eps=eps)
    x, _, sigma = ddim_step(short_schedule, noised.xt, start_t, 0, eps, eta=0.0, z=None)
    assert sigma == 0.0
    assert torch.allclose(x, clean_batch, atol=1e-9)


def test_ddim_with_oracle_recovers_x0(short_schedule, clean_batch, oracle_denoiser):
    generator = torch.Generator().manual_seed(0)
    x_T = torch.randn(clean_batch.shape, generator=generator, dtype=F64)
    for eta in (0.0, 1.0):
        images = ddim_sample(
            oracle_denoiser(short_schedule, clean_batch), short_schedule, 3,
            steps=5, eta=eta, generator=generator, x_T=x_T,
        )
        assert torch.allclose(images, to_image_range(clean_batch), atol=1e-7)


def test_ddim_is_deterministic_at_eta_zero(tiny_f64_denoiser):
    schedule = build_schedule("cosine", 20)
    a = ddim_sample(tiny_f64_denoiser, schedule, 2, 4, 0.0, torch.Generator().manual_seed(3))
    b = ddim_sample(tiny_f64_denoiser, schedule, 2, 4, 0.0, torch.Generator().manual_seed(3))
    assert torch.equal(a, b)
    assert a.shape == (2, 1, 8, 8)
    assert float(a.min()) >= 0.0 and float(a.max()) <= 1.0


def test_ddim_timesteps():
    seq = ddim_timesteps(1000, 50)
    assert len(seq) == 50
    assert seq[0] == 1000 and seq[-1] == 1
    assert np.all(np.diff(seq) < 0)
    assert ddim_timesteps(100, 3, start_t=25).tolist() == [25, 13, 1]


def test_ddim_rejects_bad_arguments(short_schedule, oracle_denoiser, clean_batch):
    with pytest.raises(DiffusionError, match="DDIM steps must lie in"):
        ddim_timesteps(50, 51)
    with pytest.raises(DiffusionError, match="start_t"):
        ddim_timesteps(50, 5, start_t=60)
    with pytest.raises(DiffusionError, match="eta must be >= 0"):
        ddim_sample(
            oracle_denoiser(short_schedule, clean_batch), short_schedule, 3, 5, -0.5,
            torch.Generator(), x_T=torch.zeros_like(clean_batch),
        )


def test_non_finite_samples_are_reported(short_schedule):
    def broken(xt, t):
        return torch.full_like(xt, float("inf"))

    with pytest.raises(DiffusionError, match="non-finite sample"):
        ddpm_sample(
            broken, short_schedule, 1, torch.Generator(), x_T=torch.zeros(1, 1, 4, 4), clip=False
        )


def test_snr_bins(cosine_schedule):
    edges = snr_bin_edges(cosine_schedule)
    assert len(edges) == SNR_BINS + 1
    assert edges[0] == pytest.approx(cosine_schedule.log_snr.min())
    assert edges[-1] == pytest.approx(cosine_schedule.log_snr.max())

    losses = bin_losses_by_snr(cosine_schedule, [1, 1, 1000], [1.0, 3.0, 5.0])
    assert losses[-1] == pytest.approx(2.0)
    assert losses[0] == pytest.approx(5.0)
    assert np.isnan(losses[1:-1]).all()
