"""Forward-process coefficients, SNR, loss weightings and timestep sampling.

Timesteps are 1-based throughout: ``t ∈ {1, …, T}``. Tables are stored
0-based, so the value for step ``t`` lives at index ``t - 1``.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Union

import numpy as np
import pandas as pd

from diffprobe.config import ConfigError

__all__ = [
    "NoiseSchedule",
    "WeightingPolicy",
    "TimestepSampler",
    "build_schedule",
    "build_sampler",
    "weight",
    "weights",
    "sample_timestep",
    "sample_timesteps",
    "schedule_table",
    "dump_schedule",
]

BETA_MAX = 0.999
LINEAR_BETA_START = 1e-4
LINEAR_BETA_END = 2e-2

ScheduleKind = Literal["linear", "cosine"]


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array, dtype=np.float64)
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    kind: ScheduleKind
    offset_s: float
    beta: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    snr: np.ndarray = field(repr=False)
    posterior_variance: np.ndarray = field(repr=False)

    def alpha_bar_prev(self, t: int) -> float:
        """ᾱ_{t−1}, with ᾱ_0 = 1."""
        return 1.0 if t == 1 else float(self.alpha_bar[t - 2])

    @property
    def log_snr(self) -> np.ndarray:
        return np.log(self.snr)

    def check_timestep(self, t: int) -> None:
        if not 1 <= int(t) <= self.T:
            raise IndexError(f"timestep {t} outside 1..{self.T}")


def _cosine_f(t: np.ndarray, T: int, s: float) -> np.ndarray:
    return np.cos(((t / T + s) / (1 + s)) * np.pi / 2) ** 2


def build_schedule(kind: str, T: int, offset_s: float = 0.008) -> NoiseSchedule:
    """Precompute every schedule table in double precision."""
    if int(T) != T or T < 2:
        raise ConfigError(f"schedule T must be an integer >= 2, got {T}")
    if offset_s < 0:
        raise ConfigError(f"schedule offset_s must be >= 0, got {offset_s}")

    if kind == "linear":
        beta = np.linspace(LINEAR_BETA_START, LINEAR_BETA_END, T, dtype=np.float64)
    elif kind == "cosine":
        f = _cosine_f(np.arange(T + 1, dtype=np.float64), T, offset_s)
        alpha_bar_raw = f / f[0]
        beta = 1.0 - alpha_bar_raw[1:] / alpha_bar_raw[:-1]
        beta = np.clip(beta, 0.0, BETA_MAX)
    else:
        raise ConfigError(f"Unknown schedule kind: {kind!r}")

    if not np.all(beta > 0):
        raise ConfigError(f"{kind} schedule produced a non-positive beta")

    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    snr = alpha_bar / (1.0 - alpha_bar)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    posterior_variance = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)

    return NoiseSchedule(
        T=int(T),
        kind=kind,
        offset_s=float(offset_s),
        beta=_frozen(beta),
        alpha=_frozen(alpha),
        alpha_bar=_frozen(alpha_bar),
        snr=_frozen(snr),
        posterior_variance=_frozen(posterior_variance),
    )


@dataclass(frozen=True)
class WeightingPolicy:
    kind: Literal["mse", "minsnr"] = "minsnr"
    gamma: float = 5.0

    def __post_init__(self):
        if self.kind not in ("mse", "minsnr"):
            raise ConfigError(f"Unknown weighting kind: {self.kind!r}")
        if self.kind == "minsnr" and self.gamma <= 0:
            raise ConfigError(f"MinSNR gamma must be positive, got {self.gamma}")


def weights(
    policy: WeightingPolicy, schedule: NoiseSchedule, t: Union[np.ndarray, list]
) -> np.ndarray:
    """Vectorized w(t) for an array of 1-based timesteps."""
    t = np.asarray(t, dtype=np.int64)
    if t.size and (t.min() < 1 or t.max() > schedule.T):
        raise IndexError(f"timesteps outside 1..{schedule.T}: {t.min()}..{t.max()}")
    if policy.kind == "mse":
        return np.ones(t.shape, dtype=np.float64)
    snr = schedule.snr[t - 1]
    return np.minimum(snr, policy.gamma) / snr


def weight(policy: WeightingPolicy, schedule: NoiseSchedule, t: int) -> float:
    schedule.check_timestep(t)
    return float(weights(policy, schedule, [t])[0])


@dataclass(frozen=True)
class TimestepSampler:
    kind: Literal["uniform", "squared_cosine"]
    pmf: np.ndarray = field(repr=False)

    def __post_init__(self):
        pmf = self.pmf
        if pmf.ndim != 1 or not np.all(pmf > 0) or abs(pmf.sum() - 1.0) > 1e-12:
            raise ConfigError("Timestep pmf must be positive and sum to 1")

    @property
    def T(self) -> int:
        return len(self.pmf)


def build_sampler(
    kind: str, schedule: NoiseSchedule, variant: str = "mid_emphasis"
) -> TimestepSampler:
    """
    Build the timestep distribution p(t).

    ``squared_cosine`` has two readings:
      - ``mid_emphasis``: pmf[t] ∝ sin²(π(t − ½)/T), symmetric with pmf[1] = pmf[T]
      - ``schedule``: pmf[t] ∝ cos²(((t/T + s)/(1 + s))·π/2), the schedule's own f(t)
    """
    T = schedule.T
    t = np.arange(1, T + 1, dtype=np.float64)
    if kind == "uniform":
        raw = np.ones(T, dtype=np.float64)
    elif kind == "squared_cosine":
        if variant == "mid_emphasis":
            raw = np.sin(np.pi * (t - 0.5) / T) ** 2
        elif variant == "schedule":
            # floor keeps the tail strictly positive
            raw = np.maximum(_cosine_f(t, T, schedule.offset_s), 1e-12)
        else:
            raise ConfigError(f"Unknown squared_cosine variant: {variant!r}")
    else:
        raise ConfigError(f"Unknown timestep sampler kind: {kind!r}")
    return TimestepSampler(kind=kind, pmf=_frozen(raw / raw.sum()))


def sample_timesteps(
    sampler: TimestepSampler, rng: np.random.Generator, n: int
) -> np.ndarray:
    """Draw n 1-based timesteps from the sampler's pmf."""
    return rng.choice(sampler.T, size=n, p=sampler.pmf).astype(np.int64) + 1


def sample_timestep(sampler: TimestepSampler, rng: np.random.Generator) -> int:
    return int(sample_timesteps(sampler, rng, 1)[0])


def schedule_table(
    schedule: NoiseSchedule, sampler: TimestepSampler, gamma: float = 5.0
) -> pd.DataFrame:
    t = np.arange(1, schedule.T + 1)
    return pd.DataFrame(
        {
            "t": t,
            "beta": schedule.beta,
            "alpha": schedule.alpha,
            "alpha_bar": schedule.alpha_bar,
            "snr": schedule.snr,
            "w_mse": weights(WeightingPolicy("mse"), schedule, t),
            "w_minsnr": weights(WeightingPolicy("minsnr", gamma), schedule, t),
            "pmf": sampler.pmf,
        }
    )


def dump_schedule(
    schedule: NoiseSchedule, sampler: TimestepSampler, path: Path, gamma: float = 5.0
) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    schedule_table(schedule, sampler, gamma).to_csv(path, index=False, float_format="%.17g")
    return path
