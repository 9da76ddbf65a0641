"""
Posterior samplers for linear observation models under a diffusion prior.

SmcSampler is a twisted particle filter: particles follow the ancestral chain
tilted towards the observation, and the weights correct the proposal so that
the t = 0 ensemble targets p(x_0 | y). ReplacementSampler is the
replacement-inpainting baseline for mask operators.
"""
from typing import Optional, Protocol, Tuple, Union
import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.linalg import cho_factor, cho_solve
from scipy.special import logsumexp

from diffusion_core import EpsProvider, NoiseSchedule, ancestral_step, predict_x0, reverse_mean_and_variance
from exceptions import DimensionMismatchError, EnsembleCollapseError

logger = logging.getLogger(__name__)

SeedLike = Union[int, np.random.Generator, np.random.SeedSequence]


def _rng(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


class LinearObservation(BaseModel):
    """y = A x + noise, with A an index mask or a dense (m, d) matrix"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    dim: int = Field(..., ge=1, description="Dimension d of the unknown")
    y: np.ndarray = Field(..., description="Observations, shape (m,)")
    noise_std: np.ndarray = Field(..., description="Per-observation noise std, shape (m,), zeros allowed")
    mask: Optional[np.ndarray] = Field(default=None, description="Observed coordinate indices")
    matrix: Optional[np.ndarray] = Field(default=None, description="Dense operator of shape (m, d)")

    @model_validator(mode="after")
    def _check_invariants(self) -> "LinearObservation":
        if (self.mask is None) == (self.matrix is None):
            raise ValueError("exactly one of mask or matrix must be given")
        if self.mask is not None:
            if self.mask.ndim != 1 or self.mask.size > self.dim:
                raise ValueError("mask must be a vector with at most d entries")
            if self.mask.size and (self.mask.min() < 0 or self.mask.max() >= self.dim):
                raise ValueError("mask indices must lie in [0, d)")
            if np.unique(self.mask).size != self.mask.size:
                raise ValueError("mask indices must be unique")
        else:
            if self.matrix.ndim != 2 or self.matrix.shape[1] != self.dim:
                raise ValueError(f"matrix must have shape (m, {self.dim})")
        if self.y.shape != (self.m,):
            raise ValueError(f"y must have shape ({self.m},)")
        if self.noise_std.shape != (self.m,):
            raise ValueError(f"noise_std must have shape ({self.m},)")
        if np.any(self.noise_std < 0.0):
            raise ValueError("noise_std must be nonnegative")
        return self

    @classmethod
    def from_mask(cls, indices, dim: int, y, noise_std=0.0) -> "LinearObservation":
        mask = np.asarray(indices, dtype=np.int64).reshape(-1)
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        noise = np.broadcast_to(np.asarray(noise_std, dtype=np.float64), y.shape).copy()
        return cls(dim=dim, y=y, noise_std=noise, mask=mask)

    @classmethod
    def from_matrix(cls, matrix, y, noise_std=0.0) -> "LinearObservation":
        matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        noise = np.broadcast_to(np.asarray(noise_std, dtype=np.float64), y.shape).copy()
        return cls(dim=matrix.shape[1], y=y, noise_std=noise, matrix=matrix)

    @property
    def m(self) -> int:
        return int(self.mask.size if self.mask is not None else self.matrix.shape[0])

    @property
    def is_mask(self) -> bool:
        return self.mask is not None


def apply_operator(obs: LinearObservation, x: np.ndarray) -> np.ndarray:
    """A x for x of shape (d,) or (n, d)"""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != obs.dim:
        raise DimensionMismatchError(f"x has dimension {x.shape[-1]}, operator expects {obs.dim}")
    if obs.is_mask:
        return x[..., obs.mask]
    return x @ obs.matrix.T


class ParticleEnsemble(BaseModel):
    """N weighted states at a common timestep"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    particles: np.ndarray = Field(..., description="States, shape (N, d)")
    log_weights: np.ndarray = Field(..., description="Unnormalized log-weights, shape (N,)")
    t: int = Field(default=0, ge=0, description="Shared timestep")

    @model_validator(mode="after")
    def _check_shapes(self) -> "ParticleEnsemble":
        if self.particles.ndim != 2 or self.particles.shape[0] < 1:
            raise ValueError("particles must have shape (N, d) with N >= 1")
        if self.log_weights.shape != (self.particles.shape[0],):
            raise ValueError("log_weights must have one entry per particle")
        return self

    @property
    def size(self) -> int:
        return int(self.particles.shape[0])

    def normalized_weights(self) -> np.ndarray:
        return normalize_log_weights(self.log_weights)


def normalize_log_weights(log_weights: np.ndarray) -> np.ndarray:
    log_weights = np.asarray(log_weights, dtype=np.float64)
    if log_weights.size == 0:
        raise ValueError("log_weights must be nonempty")
    if not np.any(np.isfinite(log_weights)) or np.any(np.isnan(log_weights)):
        raise EnsembleCollapseError(
            "All particle weights vanished; raise the noise floor or use more particles"
        )
    return np.exp(log_weights - logsumexp(log_weights))


def ess(log_weights: np.ndarray) -> float:
    """Effective sample size 1 / sum(w_i^2) of the normalized weights, in [1, N]"""
    w = normalize_log_weights(log_weights)
    value = 1.0 / float(np.sum(w ** 2))
    return float(np.clip(value, 1.0, w.size))


def systematic_resample_indices(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Offspring indices from a single stratified uniform draw"""
    n = weights.size
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0
    positions = (rng.uniform() + np.arange(n)) / n
    return np.minimum(np.searchsorted(cumulative, positions, side="right"), n - 1)


def systematic_resample(ensemble: ParticleEnsemble, seed: SeedLike) -> ParticleEnsemble:
    """Resample N offspring with counts in [floor(N w_i), ceil(N w_i)]; weights reset to uniform"""
    indices = systematic_resample_indices(ensemble.normalized_weights(), _rng(seed))
    return ParticleEnsemble(
        particles=ensemble.particles[indices],
        log_weights=np.zeros(ensemble.size),
        t=ensemble.t,
    )


class ObservationPath(BaseModel):
    """Diffused observations y_t and their effective noise std for t = 0..T"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    ys: np.ndarray = Field(..., description="Shape (T + 1, m); row t holds y_t")
    noise_stds: np.ndarray = Field(..., description="Shape (T + 1, m); row t holds the effective std at t")

    def at(self, t: int) -> Tuple[np.ndarray, np.ndarray]:
        return self.ys[t], self.noise_stds[t]


def diffuse_observation_sequence(
    obs: LinearObservation,
    schedule: NoiseSchedule,
    seed: SeedLike,
    noise_floor: float = 0.0,
) -> ObservationPath:
    """
    Diffuse the observation alongside the state.

    y_T is drawn from sqrt(ab_T) y + sqrt(1 - ab_T) eta; every earlier y_{t-1}
    is drawn from the DDPM posterior q(y_{t-1} | y_t, y_0 = y) with fresh noise,
    so each y_t has marginal sqrt(ab_t) y + sqrt(1 - ab_t) eta and y_0 = y.

    Args:
        obs: Observation model
        schedule: Noise schedule
        seed: Seed of the diffusion noise
        noise_floor: Lower bound applied to noise_std before computing the
            effective std sqrt(ab_t std^2 + 1 - ab_t)

    Returns:
        ObservationPath indexed by t
    """
    rng = _rng(seed)
    T, m = schedule.T, obs.m
    ys = np.empty((T + 1, m))
    ab_T = schedule.alpha_bar(T)
    ys[T] = np.sqrt(ab_T) * obs.y + np.sqrt(1.0 - ab_T) * rng.standard_normal(m)
    for t in range(T, 1, -1):
        one_minus_ab = 1.0 - schedule.alpha_bar(t)
        noise = rng.standard_normal(m)
        if one_minus_ab == 0.0:
            ys[t - 1] = obs.y
            continue
        ab_prev = schedule.alpha_bar(t - 1)
        beta = schedule.beta(t)
        coef_y0 = np.sqrt(ab_prev) * beta / one_minus_ab
        coef_yt = np.sqrt(schedule.alpha(t)) * (1.0 - ab_prev) / one_minus_ab
        variance = beta * (1.0 - ab_prev) / one_minus_ab
        ys[t - 1] = coef_y0 * obs.y + coef_yt * ys[t] + np.sqrt(variance) * noise
    ys[0] = obs.y

    std = np.maximum(obs.noise_std, noise_floor)
    abs_ = np.array([schedule.alpha_bar(t) for t in range(T + 1)])[:, None]
    noise_stds = np.sqrt(abs_ * std[None, :] ** 2 + (1.0 - abs_))
    noise_stds[0] = std
    return ObservationPath(ys=ys, noise_stds=noise_stds)


def _diag_log_likelihood(y: np.ndarray, predicted: np.ndarray, variance: np.ndarray) -> np.ndarray:
    """Sum over observations of log N(y; predicted, variance), one value per particle"""
    return -0.5 * np.sum((y - predicted) ** 2 / variance + np.log(2.0 * np.pi * variance), axis=-1)


def _gaussian_log_likelihood(residual: np.ndarray, cov: np.ndarray) -> np.ndarray:
    """log N(residual; 0, cov) per row of residual"""
    factor = cho_factor(cov, lower=True)
    half_logdet = np.sum(np.log(np.diag(factor[0])))
    quad = np.sum(residual * cho_solve(factor, residual.T).T, axis=1)
    return -0.5 * quad - half_logdet - 0.5 * cov.shape[0] * np.log(2.0 * np.pi)


class PosteriorSampler(Protocol):
    """Interface shared by the samplers so callers can swap them"""

    def sample(
        self,
        obs: LinearObservation,
        eps_provider: EpsProvider,
        schedule: NoiseSchedule,
        n_out: int,
        seed: SeedLike,
    ) -> np.ndarray:
        ...


class SmcRun(BaseModel):
    """Samples of one particle-filter run and how the ensemble fared"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    samples: np.ndarray = Field(..., description="Posterior samples, shape (n_out, d)")
    resample_count: int = Field(..., ge=0, description="Resampling events during the run")
    min_ess: float = Field(..., ge=1.0, description="Smallest effective sample size seen")


class _Linearization(BaseModel):
    """Observation model of one proposal step: resid = slope * A u + e, e ~ N(0, spread * AA^T + diag)"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    target: np.ndarray
    center: np.ndarray
    slope: float
    spread: float
    diag: np.ndarray


class SmcSampler:
    """
    Particle-filter posterior sampler for linear observations.

    Two twisting functions are available. "tweedie" scores a particle x_t by
    N(y; A x0_hat(x_t), (1 - ab_t) AA^T + diag(std^2)) and proposes from the
    reverse transition times the twist linearized around the reverse mean; it
    is exact for a N(0, I) prior and keeps the weights close to uniform.
    "bridge" scores x_t against one diffused observation path y_t drawn by
    diffuse_observation_sequence, with variance ab_t std^2 + 2 (1 - ab_t)
    because the particle noise is independent of the path noise.

    In both cases the weights telescope to the exact likelihood at t = 0, so
    the ensemble targets p(x_0 | y) as N grows. The sampler holds only its
    settings; each run reports its own diagnostics.
    """

    TWISTS = ("tweedie", "bridge")

    def __init__(
        self,
        n_particles: int = 256,
        noise_floor: float = 1e-3,
        ess_fraction: float = 0.5,
        twist: str = "tweedie",
    ):
        if n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if noise_floor <= 0.0:
            raise ValueError("noise_floor must be positive")
        if not 0.0 < ess_fraction <= 1.0:
            raise ValueError("ess_fraction must lie in (0, 1]")
        if twist not in self.TWISTS:
            raise ValueError(f"twist must be one of {self.TWISTS}, got {twist!r}")
        self.n_particles = n_particles
        self.noise_floor = noise_floor
        self.ess_fraction = ess_fraction
        self.twist = twist

    def _log_twist(self, obs, x, x0_hat, t, schedule, obs_var, gram, path):
        """log g_t of every particle at step t >= 1"""
        if obs.m == 0:
            return np.zeros(x.shape[0])
        if path is not None:
            variance = path.noise_stds[t] ** 2 + (1.0 - schedule.alpha_bar(t))
            return _diag_log_likelihood(path.ys[t], apply_operator(obs, x), variance)
        spread = 1.0 - schedule.alpha_bar(t)
        predicted = apply_operator(obs, x0_hat)
        if obs.is_mask:
            return _diag_log_likelihood(obs.y, predicted, spread + obs_var)
        return _gaussian_log_likelihood(obs.y - predicted, spread * gram + np.diag(obs_var))

    def _linearize(self, obs, mean, x0_hat, s, schedule, obs_var, path) -> _Linearization:
        """Twist at step s as a function of the offset from the reverse mean"""
        if path is not None:
            variance = obs_var if s == 0 else path.noise_stds[s] ** 2 + (1.0 - schedule.alpha_bar(s))
            return _Linearization(
                target=path.ys[s], center=apply_operator(obs, mean), slope=1.0, spread=0.0, diag=variance
            )
        if s == 0:
            return _Linearization(
                target=obs.y, center=apply_operator(obs, mean), slope=1.0, spread=0.0, diag=obs_var
            )
        ab = schedule.alpha_bar(s)
        # for a unit-variance prior, x0_hat at step s moves by sqrt(ab_s) per unit of x_s
        return _Linearization(
            target=obs.y, center=apply_operator(obs, x0_hat), slope=float(np.sqrt(ab)), spread=1.0 - ab, diag=obs_var
        )

    def _propose_mask(self, obs, mean, variance, lin: _Linearization, rng):
        """Reverse transition times the linearized twist; returns (x, log Z, log twist at x)"""
        x = mean + np.sqrt(variance) * rng.standard_normal(mean.shape)
        if obs.m == 0:
            zeros = np.zeros(mean.shape[0])
            return x, zeros, zeros
        residual = lin.target - lin.center
        noise_var = lin.spread + lin.diag
        total = lin.slope ** 2 * variance + noise_var
        log_z = _diag_log_likelihood(residual, 0.0, total)
        u_mean = variance * lin.slope * residual / total
        u_std = np.sqrt(variance * noise_var / total)
        u = u_mean + u_std * rng.standard_normal(residual.shape)
        x[:, obs.mask] = mean[:, obs.mask] + u
        log_twist = _diag_log_likelihood(residual, lin.slope * u, noise_var)
        return x, log_z, log_twist

    def _propose_dense(self, obs, mean, variance, lin: _Linearization, gram, rng):
        """Same step for a dense operator, via the perturbation update"""
        A = obs.matrix
        n = mean.shape[0]
        noise_cov = lin.spread * gram + np.diag(lin.diag)
        total = lin.slope ** 2 * variance * gram + noise_cov
        residual = lin.target - lin.center
        log_z = _gaussian_log_likelihood(residual, total)

        u_tilde = np.sqrt(variance) * rng.standard_normal(mean.shape)
        e_tilde = (
            np.sqrt(lin.spread) * (rng.standard_normal(mean.shape) @ A.T)
            + np.sqrt(lin.diag) * rng.standard_normal((n, obs.m))
        )
        innovation = residual - lin.slope * (u_tilde @ A.T) - e_tilde
        factor = cho_factor(total, lower=True)
        u = u_tilde + variance * lin.slope * (cho_solve(factor, innovation.T).T @ A)
        log_twist = _gaussian_log_likelihood(residual - lin.slope * (u @ A.T), noise_cov)
        return mean + u, log_z, log_twist

    def run(
        self,
        obs: LinearObservation,
        eps_provider: EpsProvider,
        schedule: NoiseSchedule,
        n_out: int = 1,
        seed: SeedLike = 0,
    ) -> SmcRun:
        """
        Draw n_out approximate posterior samples and report the ensemble diagnostics.

        Args:
            obs: Linear observation of the d-dimensional unknown
            eps_provider: Noise predictor of the prior
            schedule: Noise schedule of the prior
            n_out: Samples to return (1 <= n_out <= N)
            seed: Seed of every draw in the run

        Returns:
            SmcRun holding samples of shape (n_out, d)
        """
        N = self.n_particles
        if not 1 <= n_out <= N:
            raise ValueError(f"n_out must lie in [1, {N}], got {n_out}")
        path_seq, particle_seq = np.random.SeedSequence(
            seed if not isinstance(seed, np.random.Generator) else int(seed.integers(2 ** 63))
        ).spawn(2)
        path = None
        if self.twist == "bridge":
            path = diffuse_observation_sequence(obs, schedule, path_seq, noise_floor=self.noise_floor)
        rng = np.random.default_rng(particle_seq)
        obs_var = np.maximum(obs.noise_std, self.noise_floor) ** 2
        gram = None if obs.is_mask else obs.matrix @ obs.matrix.T
        threshold = self.ess_fraction * N
        resample_count, min_ess = 0, float(N)

        x = rng.standard_normal((N, obs.dim))
        log_w = np.zeros(N)
        # log of the linearized twist each particle was proposed under
        log_twist_hat = np.zeros(N)
        for t in range(schedule.T, 0, -1):
            eps_hat = eps_provider(x, t)
            x0_hat = predict_x0(x, t, eps_hat, schedule)
            log_g = self._log_twist(obs, x, x0_hat, t, schedule, obs_var, gram, path)
            log_w = log_w + log_g - log_twist_hat

            current_ess = ess(log_w)
            min_ess = min(min_ess, current_ess)
            if current_ess < threshold:
                indices = systematic_resample_indices(normalize_log_weights(log_w), rng)
                x, eps_hat, x0_hat, log_g = x[indices], eps_hat[indices], x0_hat[indices], log_g[indices]
                log_w = np.zeros(N)
                resample_count += 1
                logger.debug(f"t={t}: ESS {current_ess:.1f} < {threshold:.1f}, resampled")

            mean, variance = reverse_mean_and_variance(x, t, eps_hat, schedule)
            if t == 1 and variance == 0.0 and obs.m > 0:
                # let the data pull x_0 onto the observations
                variance = schedule.beta(1)
            lin = self._linearize(obs, mean, x0_hat, t - 1, schedule, obs_var, path)
            if obs.is_mask or obs.m == 0:
                x, log_z, log_twist_hat = self._propose_mask(obs, mean, variance, lin, rng)
            else:
                x, log_z, log_twist_hat = self._propose_dense(obs, mean, variance, lin, gram, rng)
            log_w = log_w + log_z - log_g
        # the step into t = 0 used the exact likelihood, so log_w is final

        weights = normalize_log_weights(log_w)
        min_ess = min(min_ess, ess(log_w))
        indices = systematic_resample_indices(weights, rng)
        chosen = indices[rng.permutation(N)[:n_out]]
        logger.debug(f"SMC finished: N={N}, m={obs.m}, twist={self.twist}, resamples={resample_count}, min ESS={min_ess:.1f}")
        return SmcRun(samples=x[chosen], resample_count=resample_count, min_ess=min_ess)

    def sample(
        self,
        obs: LinearObservation,
        eps_provider: EpsProvider,
        schedule: NoiseSchedule,
        n_out: int = 1,
        seed: SeedLike = 0,
    ) -> np.ndarray:
        """Posterior samples of shape (n_out, d); see run for the diagnostics"""
        return self.run(obs, eps_provider, schedule, n_out=n_out, seed=seed).samples


class ReplacementSampler:
    """Replacement inpainting: observed coordinates are overwritten with forward-noised data every step"""

    def sample(
        self,
        obs: LinearObservation,
        eps_provider: EpsProvider,
        schedule: NoiseSchedule,
        n_out: int = 1,
        seed: SeedLike = 0,
    ) -> np.ndarray:
        if not obs.is_mask:
            raise ValueError("replacement inpainting needs a mask operator")
        rng = _rng(seed)
        mask = obs.mask
        x = rng.standard_normal((n_out, obs.dim))
        for t in range(schedule.T, 0, -1):
            ab = schedule.alpha_bar(t)
            x[:, mask] = np.sqrt(ab) * obs.y + np.sqrt(1.0 - ab) * rng.standard_normal((n_out, mask.size))
            eps_hat = eps_provider(x, t)
            x = ancestral_step(x, t, eps_hat, schedule, rng.standard_normal(x.shape))
        x[:, mask] = obs.y
        return x


def smc_posterior_sample(
    obs: LinearObservation,
    eps_provider: EpsProvider,
    schedule: NoiseSchedule,
    n_particles: int = 256,
    n_out: int = 1,
    seed: SeedLike = 0,
    noise_floor: float = 1e-3,
    ess_fraction: float = 0.5,
    twist: str = "tweedie",
) -> np.ndarray:
    """Posterior samples of shape (n_out, d) from the particle-filter sampler"""
    sampler = SmcSampler(n_particles=n_particles, noise_floor=noise_floor, ess_fraction=ess_fraction, twist=twist)
    return sampler.sample(obs, eps_provider, schedule, n_out=n_out, seed=seed)


def replacement_inpaint_sample(
    obs: LinearObservation,
    eps_provider: EpsProvider,
    schedule: NoiseSchedule,
    seed: SeedLike = 0,
    n_samples: Optional[int] = None,
) -> np.ndarray:
    """One sample of shape (d,), or (n_samples, d) independent chains when n_samples is given"""
    samples = ReplacementSampler().sample(obs, eps_provider, schedule, n_out=n_samples or 1, seed=seed)
    return samples if n_samples is not None else samples[0]
