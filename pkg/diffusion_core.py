"""
DDPM forward/backward machinery: schedules, noising, Tweedie denoising and
ancestral sampling.

All functions work on flat vectors of dimension d or on (n, d) batches; the
grid structure of fields lives in higher modules. Randomness is always passed
in explicitly, either as a noise array or as a seed.
"""
from typing import Callable, Tuple, Union
import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from exceptions import DimensionMismatchError, ScheduleError

logger = logging.getLogger(__name__)

# provider(x, t) -> eps_hat, with x of shape (d,) or (n, d)
EpsProvider = Callable[[np.ndarray, int], np.ndarray]


class NoiseSchedule(BaseModel):
    """Variance schedule β_t with derived α_t and running products ᾱ_t.

    Arrays are indexed by t - 1 for t in [1, T]; ᾱ_0 is defined as 1.
    """
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    T: int = Field(..., ge=1, description="Number of diffusion steps")
    betas: np.ndarray = Field(..., description="Per-step noise variances, length T")
    alphas: np.ndarray = Field(..., description="1 - betas, length T")
    alpha_bars: np.ndarray = Field(..., description="Running products of alphas, length T")

    @model_validator(mode="after")
    def _check_invariants(self) -> "NoiseSchedule":
        for name in ("betas", "alphas", "alpha_bars"):
            if getattr(self, name).shape != (self.T,):
                raise ScheduleError(f"{name} must have length T={self.T}")
        if np.any(self.betas < 0.0) or np.any(self.betas >= 1.0):
            raise ScheduleError("betas must lie in [0, 1)")
        if not np.array_equal(self.alphas, 1.0 - self.betas):
            raise ScheduleError("alphas must equal 1 - betas exactly")
        if not np.allclose(self.alpha_bars, np.cumprod(self.alphas), rtol=0.0, atol=1e-12):
            raise ScheduleError("alpha_bars must be the running product of alphas")
        if np.any(self.alpha_bars <= 0.0) or np.any(self.alpha_bars > 1.0):
            raise ScheduleError("alpha_bars must lie in (0, 1]")
        return self

    @classmethod
    def from_betas(cls, betas: np.ndarray) -> "NoiseSchedule":
        """Build a schedule from a beta sequence, deriving alphas and alpha_bars"""
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size < 1:
            raise ScheduleError("betas must be a non-empty 1-D sequence")
        alphas = 1.0 - betas
        return cls(T=betas.size, betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))

    def check_timestep(self, t: int, minimum: int = 0) -> int:
        t = int(t)
        if t < minimum or t > self.T:
            raise ScheduleError(f"Timestep {t} outside [{minimum}, {self.T}]")
        return t

    def beta(self, t: int) -> float:
        return float(self.betas[self.check_timestep(t, minimum=1) - 1])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self.check_timestep(t, minimum=1) - 1])

    def alpha_bar(self, t: int) -> float:
        t = self.check_timestep(t)
        return 1.0 if t == 0 else float(self.alpha_bars[t - 1])

    def describe(self) -> dict:
        """Compact summary recorded in checkpoints and manifests"""
        return {
            "T": self.T,
            "beta_start": float(self.betas[0]),
            "beta_end": float(self.betas[-1]),
        }


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """
    Linearly interpolated beta schedule.

    Args:
        T: Number of steps (>= 1)
        beta_start: First beta, >= 0
        beta_end: Last beta, in [beta_start, 1)

    Returns:
        NoiseSchedule with betas from beta_start to beta_end inclusive
    """
    if T < 1:
        raise ScheduleError(f"T must be >= 1, got {T}")
    if beta_start < 0.0:
        raise ScheduleError(f"beta_start must be >= 0, got {beta_start}")
    if beta_end >= 1.0:
        raise ScheduleError(f"beta_end must be < 1, got {beta_end}")
    if beta_start > beta_end:
        raise ScheduleError("beta_start must not exceed beta_end")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    return NoiseSchedule.from_betas(betas)


def forward_noise(x0: np.ndarray, t: int, schedule: NoiseSchedule, z: np.ndarray) -> np.ndarray:
    """Closed-form marginal draw x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) z"""
    x0 = np.asarray(x0, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x0.shape != z.shape:
        raise DimensionMismatchError(f"x0 shape {x0.shape} does not match noise shape {z.shape}")
    ab = schedule.alpha_bar(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * z


def tweedie_denoise(x_t: np.ndarray, t: int, score: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """MMSE estimate of x0 from the score at (x_t, t): (x_t + (1 - ab_t) score) / sqrt(ab_t)"""
    x_t = np.asarray(x_t, dtype=np.float64)
    score = np.asarray(score, dtype=np.float64)
    if x_t.shape != score.shape:
        raise DimensionMismatchError(f"x_t shape {x_t.shape} does not match score shape {score.shape}")
    ab = schedule.alpha_bar(t)
    if ab <= 0.0:
        raise ScheduleError(f"alpha_bar at t={t} is zero; x0 is not identifiable")
    return (x_t + (1.0 - ab) * score) / np.sqrt(ab)


def score_to_eps(score: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    return -np.sqrt(1.0 - schedule.alpha_bar(t)) * np.asarray(score, dtype=np.float64)


def eps_to_score(eps: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    scale = np.sqrt(1.0 - schedule.alpha_bar(t))
    if scale == 0.0:
        raise ScheduleError(f"No noise at t={t}; the score cannot be recovered from eps")
    return -np.asarray(eps, dtype=np.float64) / scale


def reverse_mean_and_variance(
    x_t: np.ndarray,
    t: int,
    eps_hat: np.ndarray,
    schedule: NoiseSchedule,
) -> Tuple[np.ndarray, float]:
    """
    Mean and per-coordinate variance of the DDPM reverse transition.

    Args:
        x_t: Current state, (d,) or (n, d)
        t: Timestep in [1, T]
        eps_hat: Predicted noise at (x_t, t)
        schedule: Noise schedule

    Returns:
        Tuple of (mean, variance) where variance is the DDPM posterior variance
        beta_t (1 - ab_{t-1}) / (1 - ab_t), zero at t = 1
    """
    t = schedule.check_timestep(t, minimum=1)
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if x_t.shape != eps_hat.shape:
        raise DimensionMismatchError(f"x_t shape {x_t.shape} does not match eps shape {eps_hat.shape}")

    beta = schedule.beta(t)
    alpha = schedule.alpha(t)
    one_minus_ab = 1.0 - schedule.alpha_bar(t)
    if one_minus_ab > 0.0:
        eps_coef = beta / np.sqrt(one_minus_ab)
        variance = beta * (1.0 - schedule.alpha_bar(t - 1)) / one_minus_ab
    else:
        # zero-noise schedule up to t
        eps_coef = 0.0
        variance = 0.0
    mean = (x_t - eps_coef * eps_hat) / np.sqrt(alpha)
    return mean, float(variance)


def ancestral_step(
    x_t: np.ndarray,
    t: int,
    eps_hat: np.ndarray,
    schedule: NoiseSchedule,
    z: np.ndarray,
) -> np.ndarray:
    """One reverse-process draw x_{t-1} given x_t and the predicted noise"""
    mean, variance = reverse_mean_and_variance(x_t, t, eps_hat, schedule)
    z = np.asarray(z, dtype=np.float64)
    if z.shape != mean.shape:
        raise DimensionMismatchError(f"noise shape {z.shape} does not match state shape {mean.shape}")
    if variance == 0.0:
        return mean
    return mean + np.sqrt(variance) * z


def predict_x0(x_t: np.ndarray, t: int, eps_hat: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """Tweedie estimate of x0 written in terms of the predicted noise"""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if x_t.shape != eps_hat.shape:
        raise DimensionMismatchError(f"x_t shape {x_t.shape} does not match eps shape {eps_hat.shape}")
    ab = schedule.alpha_bar(t)
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def clip_denoised(eps_provider: EpsProvider, schedule: NoiseSchedule, low: float = -1.0, high: float = 1.0) -> EpsProvider:
    """
    Wrap a noise predictor so its implied x0 estimate stays inside [low, high].

    The returned noise is the one consistent with the clipped estimate, so every
    sampler built on eps (ancestral, SMC, replacement) sees the clipped prior.
    """
    if low >= high:
        raise ValueError("low must be below high")

    def provider(x: np.ndarray, t: int) -> np.ndarray:
        eps_hat = eps_provider(x, t)
        ab = schedule.alpha_bar(t)
        if ab >= 1.0:
            return eps_hat
        x0 = np.clip(predict_x0(x, t, eps_hat, schedule), low, high)
        return (np.asarray(x, dtype=np.float64) - np.sqrt(ab) * x0) / np.sqrt(1.0 - ab)

    return provider


class DiffusionState(BaseModel):
    """A point x_t of the chain together with its timestep"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    x: np.ndarray = Field(..., description="State, shape (d,) or (n, d)")
    t: int = Field(..., ge=0, description="Timestep; 0 is the data end")


def reverse_step(state: DiffusionState, eps_provider: EpsProvider, schedule: NoiseSchedule, z: np.ndarray) -> DiffusionState:
    """Advance a state from t to t - 1 with one ancestral draw"""
    if state.t < 1:
        raise ScheduleError("a state at t = 0 has no reverse step")
    eps_hat = eps_provider(state.x, state.t)
    return DiffusionState(x=ancestral_step(state.x, state.t, eps_hat, schedule, z), t=state.t - 1)


def sample_unconditional(
    eps_provider: EpsProvider,
    shape: Union[int, Tuple[int, ...]],
    schedule: NoiseSchedule,
    seed: int,
) -> np.ndarray:
    """
    Run the ancestral chain from x_T ~ N(0, I) down to x_0.

    Args:
        eps_provider: Callable (x, t) -> eps_hat
        shape: (d,) for one sample or (n, d) for a batch of chains
        schedule: Noise schedule
        seed: Seed of the generator driving every draw

    Returns:
        Array of the requested shape
    """
    rng = np.random.default_rng(seed)
    state = DiffusionState(x=rng.standard_normal(shape), t=schedule.T)
    while state.t > 0:
        state = reverse_step(state, eps_provider, schedule, rng.standard_normal(state.x.shape))
    logger.debug(f"Unconditional sampling finished for shape {state.x.shape} over {schedule.T} steps")
    return state.x
