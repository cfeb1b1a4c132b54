"""Forward corruption, the weighted noise-prediction objective, posterior algebra
and the DDPM / DDIM samplers.

Images live in [0, 1] at I/O and in [−1, 1] inside the model.
"""

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
import torch
from loguru import logger

from diffprobe.schedule import (
    NoiseSchedule,
    TimestepSampler,
    WeightingPolicy,
    sample_timesteps,
    weights,
)

__all__ = [
    "DiffusionError",
    "TrainingDivergedError",
    "NoisedBatch",
    "LossResult",
    "to_model_range",
    "to_image_range",
    "corrupt",
    "weighted_denoising_loss",
    "training_loss",
    "x0_estimate",
    "posterior",
    "ddpm_step",
    "ddpm_sample",
    "ddim_timesteps",
    "ddim_step",
    "ddim_sample",
    "SNR_BINS",
    "snr_bin_edges",
    "bin_losses_by_snr",
]

NoiseModel = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]

SNR_BINS = 20


class DiffusionError(Exception):
    """Raised on invalid diffusion requests or non-finite samples."""

    pass


class TrainingDivergedError(DiffusionError):
    """Raised when the training loss stops being finite."""

    pass


def to_model_range(images: torch.Tensor) -> torch.Tensor:
    return images * 2.0 - 1.0


def to_image_range(x: torch.Tensor) -> torch.Tensor:
    return ((x + 1.0) / 2.0).clamp(0.0, 1.0)


def _coef(table: np.ndarray, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Gather per-item table values for 1-based ``t`` shaped to broadcast over ``like``."""
    values = torch.from_numpy(np.asarray(table)[t.cpu().numpy() - 1].copy())
    return values.to(like.dtype).reshape(-1, *([1] * (like.ndim - 1)))


def _as_timesteps(t, n: int) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=torch.long)
    return t.expand(n).clone() if t.ndim == 0 else t


def _check_timesteps(schedule: NoiseSchedule, t: torch.Tensor) -> None:
    if t.numel() and (int(t.min()) < 1 or int(t.max()) > schedule.T):
        raise DiffusionError(
            f"timesteps outside 1..{schedule.T}: {int(t.min())}..{int(t.max())}"
        )


@dataclass(frozen=True)
class NoisedBatch:
    x0: torch.Tensor
    t: torch.Tensor
    eps: torch.Tensor
    xt: torch.Tensor


def corrupt(
    schedule: NoiseSchedule,
    x0: torch.Tensor,
    t,
    eps: Optional[torch.Tensor] = None,
    generator: Optional[torch.Generator] = None,
) -> NoisedBatch:
    """x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε, deterministic when ε is supplied."""
    t = _as_timesteps(t, x0.shape[0])
    _check_timesteps(schedule, t)
    if eps is None:
        eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    sqrt_ab = _coef(np.sqrt(schedule.alpha_bar), t, x0)
    sqrt_one_minus = _coef(np.sqrt(1.0 - schedule.alpha_bar), t, x0)
    return NoisedBatch(x0=x0, t=t, eps=eps, xt=sqrt_ab * x0 + sqrt_one_minus * eps)


def weighted_denoising_loss(
    eps: torch.Tensor, eps_hat: torch.Tensor, w: torch.Tensor
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Batch mean of w(t)·mean-over-pixels(ε − ε̂)², plus the unweighted per-item errors."""
    per_item = (eps - eps_hat).pow(2).flatten(1).mean(dim=1)
    return (w.to(per_item.dtype) * per_item).mean(), per_item


@dataclass(frozen=True)
class LossResult:
    loss: float
    t: np.ndarray
    per_item: np.ndarray
    weights: np.ndarray


def training_loss(
    model: torch.nn.Module,
    schedule: NoiseSchedule,
    policy: WeightingPolicy,
    x0: torch.Tensor,
    sampler: TimestepSampler,
    rng: np.random.Generator,
    generator: Optional[torch.Generator] = None,
    t: Optional[torch.Tensor] = None,
    eps: Optional[torch.Tensor] = None,
    step: int = -1,
    backward: bool = True,
) -> LossResult:
    """
    Evaluate the weighted objective on a clean batch in model range and
    populate parameter gradients.

    Timesteps are drawn from ``sampler`` unless given; the draw is not
    reweighted by 1/p(t).

    Raises:
        TrainingDivergedError: if the loss is not finite
    """
    n = x0.shape[0]
    if t is None:
        t = torch.from_numpy(sample_timesteps(sampler, rng, n))
    batch = corrupt(schedule, x0, t, eps=eps, generator=generator)
    w = torch.from_numpy(weights(policy, schedule, batch.t.numpy()))

    eps_hat = model(batch.xt, batch.t)
    loss, per_item = weighted_denoising_loss(batch.eps, eps_hat, w)
    if not torch.isfinite(loss):
        raise TrainingDivergedError(
            f"Non-finite loss at step {step}: t={batch.t.tolist()}, "
            f"max |ε̂|={float(eps_hat.detach().abs().max()):.3e}"
        )
    if backward:
        loss.backward()
    return LossResult(
        loss=float(loss.detach()),
        t=batch.t.numpy(),
        per_item=per_item.detach().cpu().numpy(),
        weights=w.numpy(),
    )


def x0_estimate(
    schedule: NoiseSchedule,
    xt: torch.Tensor,
    t,
    eps_hat: torch.Tensor,
    clip: bool = True,
) -> torch.Tensor:
    """x̂0 = (x_t − √(1−ᾱ_t)·ε̂)/√ᾱ_t, clamped to [−1, 1] when ``clip``."""
    t = _as_timesteps(t, xt.shape[0])
    _check_timesteps(schedule, t)
    sqrt_ab = _coef(np.sqrt(schedule.alpha_bar), t, xt)
    sqrt_one_minus = _coef(np.sqrt(1.0 - schedule.alpha_bar), t, xt)
    x0 = (xt - sqrt_one_minus * eps_hat) / sqrt_ab
    return x0.clamp(-1.0, 1.0) if clip else x0


def posterior(
    schedule: NoiseSchedule, xt: torch.Tensor, x0_hat: torch.Tensor, t
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Mean μ̃_t(x_t, x̂0) and variance β̃_t of q(x_{t−1} | x_t, x0); requires t ≥ 2."""
    t = _as_timesteps(t, xt.shape[0])
    _check_timesteps(schedule, t)
    if t.numel() and int(t.min()) < 2:
        raise DiffusionError("posterior is defined for t >= 2; use the terminal rule at t=1")
    ab = schedule.alpha_bar
    ab_prev = np.concatenate([[1.0], ab[:-1]])
    coef_x0 = np.sqrt(ab_prev) * schedule.beta / (1.0 - ab)
    coef_xt = np.sqrt(schedule.alpha) * (1.0 - ab_prev) / (1.0 - ab)
    mean = _coef(coef_x0, t, xt) * x0_hat + _coef(coef_xt, t, xt) * xt
    return mean, _coef(schedule.posterior_variance, t, xt)


def ddpm_step(
    schedule: NoiseSchedule,
    xt: torch.Tensor,
    t: int,
    eps_hat: torch.Tensor,
    z: Optional[torch.Tensor],
    clip: bool = True,
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """One ancestral step; returns (x_{t−1}, mean, std). At t = 1 it returns x̂0 without noise."""
    x0_hat = x0_estimate(schedule, xt, t, eps_hat, clip=clip)
    if t == 1:
        return x0_hat, x0_hat, torch.zeros((), dtype=xt.dtype)
    mean, variance = posterior(schedule, xt, x0_hat, t)
    std = variance.sqrt()
    return mean + std * z, mean, std


def _check_finite(x: torch.Tensor, sampler: str, t: int) -> None:
    if not torch.isfinite(x).all():
        raise DiffusionError(f"{sampler} produced a non-finite sample at t={t}")


def _start_noise(model, n: int, generator, dtype) -> torch.Tensor:
    config = model.config
    shape = (n, config.in_channels, config.image_size, config.image_size)
    return torch.randn(shape, generator=generator, dtype=dtype)


def _model_dtype(model) -> torch.dtype:
    return next(model.parameters()).dtype


@torch.no_grad()
def ddpm_sample(
    model: NoiseModel,
    schedule: NoiseSchedule,
    n: int,
    generator: torch.Generator,
    x_T: Optional[torch.Tensor] = None,
    clip: bool = True,
) -> torch.Tensor:
    """Ancestral sampling from x_T ~ N(0, I) down to x_0, returned in [0, 1]."""
    if x_T is None:
        x_T = _start_noise(model, n, generator, _model_dtype(model))
    if x_T.shape[0] == 0:
        return x_T.clone()
    x = x_T
    for t in range(schedule.T, 0, -1):
        t_vec = torch.full((x.shape[0],), t, dtype=torch.long)
        eps_hat = model(x, t_vec)
        z = torch.randn(x.shape, generator=generator, dtype=x.dtype) if t > 1 else None
        x, _, _ = ddpm_step(schedule, x, t, eps_hat, z, clip=clip)
        _check_finite(x, "DDPM", t)
    return to_image_range(x)


def ddim_timesteps(T: int, steps: int, start_t: Optional[int] = None) -> np.ndarray:
    """Evenly strided descending sub-schedule from ``start_t`` (default T) down to 1."""
    start_t = T if start_t is None else start_t
    if not 1 <= start_t <= T:
        raise DiffusionError(f"start_t {start_t} outside 1..{T}")
    if steps < 1 or steps > start_t:
        raise DiffusionError(f"DDIM steps must lie in 1..{start_t}, got {steps}")
    return np.round(np.linspace(start_t, 1, steps)).astype(np.int64)


def ddim_step(
    schedule: NoiseSchedule,
    xt: torch.Tensor,
    t: int,
    t_prev: int,
    eps_hat: torch.Tensor,
    eta: float,
    z: Optional[torch.Tensor],
    clip: bool = True,
) -> Tuple[torch.Tensor, torch.Tensor, float]:
    """One DDIM jump t → t_prev (t_prev = 0 means the clean image); returns (x, mean, std)."""
    ab_t = float(schedule.alpha_bar[t - 1])
    ab_prev = 1.0 if t_prev == 0 else float(schedule.alpha_bar[t_prev - 1])
    x0_hat = x0_estimate(schedule, xt, t, eps_hat, clip=clip)
    sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * np.sqrt(1.0 - ab_t / ab_prev)
    direction = np.sqrt(max(1.0 - ab_prev - sigma**2, 0.0))
    mean = np.sqrt(ab_prev) * x0_hat + direction * eps_hat
    if sigma > 0 and z is not None:
        return mean + sigma * z, mean, float(sigma)
    return mean, mean, float(sigma)


@torch.no_grad()
def ddim_sample(
    model: NoiseModel,
    schedule: NoiseSchedule,
    n: int,
    steps: int,
    eta: float,
    generator: torch.Generator,
    x_T: Optional[torch.Tensor] = None,
    start_t: Optional[int] = None,
    clip: bool = True,
) -> torch.Tensor:
    """DDIM sampling over an evenly strided sub-schedule, returned in [0, 1]."""
    if eta < 0:
        raise DiffusionError(f"eta must be >= 0, got {eta}")
    seq = ddim_timesteps(schedule.T, steps, start_t)
    if x_T is None:
        x_T = _start_noise(model, n, generator, _model_dtype(model))
    if x_T.shape[0] == 0:
        return x_T.clone()
    x = x_T
    for i, t in enumerate(seq):
        t_prev = int(seq[i + 1]) if i + 1 < len(seq) else 0
        t_vec = torch.full((x.shape[0],), int(t), dtype=torch.long)
        eps_hat = model(x, t_vec)
        z = torch.randn(x.shape, generator=generator, dtype=x.dtype) if eta > 0 else None
        x, _, _ = ddim_step(schedule, x, int(t), t_prev, eps_hat, eta, z, clip=clip)
        _check_finite(x, "DDIM", int(t))
    logger.debug(f"DDIM finished {len(seq)} steps (eta={eta})")
    return to_image_range(x)


def snr_bin_edges(schedule: NoiseSchedule, bins: int = SNR_BINS) -> np.ndarray:
    """Equal-width bin edges over the schedule's log-SNR range."""
    log_snr = schedule.log_snr
    return np.linspace(log_snr.min(), log_snr.max(), bins + 1)


def bin_losses_by_snr(
    schedule: NoiseSchedule,
    t: Sequence[int],
    per_item: Sequence[float],
    bins: int = SNR_BINS,
) -> np.ndarray:
    """Mean per-item loss inside each log-SNR bin (NaN for empty bins)."""
    t = np.asarray(t, dtype=np.int64)
    per_item = np.asarray(per_item, dtype=np.float64)
    edges = snr_bin_edges(schedule, bins)
    index = np.clip(np.digitize(schedule.log_snr[t - 1], edges[1:-1]), 0, bins - 1)
    sums = np.bincount(index, weights=per_item, minlength=bins)
    counts = np.bincount(index, minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
