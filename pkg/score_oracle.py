"""
Closed-form scores of diagonal Gaussian mixtures under the forward process.

The t-marginal of a mixture prior is again a mixture:
    sum_k w_k N(x; sqrt(ab_t) mu_k, ab_t Sigma_k + (1 - ab_t) I)
so exact scores are available at every noise level and serve as ground-truth
eps-providers for the sampler and the solvers.
"""
from typing import List, Sequence, Tuple, Union
import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import logsumexp, softmax

from diffusion_core import EpsProvider, NoiseSchedule, score_to_eps
from exceptions import DimensionMismatchError

logger = logging.getLogger(__name__)


class GaussianMixture(BaseModel):
    """Mixture of diagonal Gaussians"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    weights: np.ndarray = Field(..., description="Mixture weights, shape (K,), on the simplex")
    means: np.ndarray = Field(..., description="Component means, shape (K, d)")
    variances: np.ndarray = Field(..., description="Per-coordinate variances, shape (K, d), positive")

    @model_validator(mode="after")
    def _check_invariants(self) -> "GaussianMixture":
        if self.weights.ndim != 1 or self.weights.size < 1:
            raise ValueError("weights must be a non-empty vector")
        K = self.weights.size
        if self.means.ndim != 2 or self.means.shape[0] != K:
            raise ValueError("means must have shape (K, d)")
        if self.variances.shape != self.means.shape:
            raise ValueError("variances must have the same shape as means")
        if np.any(self.weights < 0.0) or abs(float(self.weights.sum()) - 1.0) > 1e-12:
            raise ValueError("weights must be nonnegative and sum to 1")
        if np.any(self.variances <= 0.0):
            raise ValueError("variances must be positive")
        return self

    @classmethod
    def from_lists(
        cls,
        weights: Sequence[float],
        means: Sequence[Sequence[float]],
        variances: Union[float, Sequence[Sequence[float]]],
    ) -> "GaussianMixture":
        """Build a mixture from plain lists, as read from a config file"""
        means_arr = np.asarray(means, dtype=np.float64)
        if np.isscalar(variances):
            var_arr = np.full_like(means_arr, float(variances))
        else:
            var_arr = np.asarray(variances, dtype=np.float64)
        return cls(
            weights=np.asarray(weights, dtype=np.float64),
            means=means_arr,
            variances=var_arr,
        )

    @property
    def n_components(self) -> int:
        return int(self.weights.size)

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])


def _noised_components(gmm: GaussianMixture, t: int, schedule: NoiseSchedule) -> Tuple[np.ndarray, np.ndarray]:
    ab = schedule.alpha_bar(t)
    means_t = np.sqrt(ab) * gmm.means
    vars_t = ab * gmm.variances + (1.0 - ab)
    return means_t, vars_t


def _component_log_terms(gmm: GaussianMixture, x: np.ndarray, t: int, schedule: NoiseSchedule):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != gmm.dim:
        raise DimensionMismatchError(f"x has dimension {x.shape[-1]}, mixture has {gmm.dim}")
    means_t, vars_t = _noised_components(gmm, t, schedule)
    diff = x[..., None, :] - means_t  # (..., K, d)
    log_norm = -0.5 * np.sum(diff ** 2 / vars_t + np.log(2.0 * np.pi * vars_t), axis=-1)
    with np.errstate(divide="ignore"):
        log_w = np.log(gmm.weights)
    return log_w + log_norm, diff, vars_t


def gmm_log_density_t(gmm: GaussianMixture, x: np.ndarray, t: int, schedule: NoiseSchedule) -> Union[float, np.ndarray]:
    """Log density of the noised mixture at x, for x of shape (d,) or (n, d)"""
    log_terms, _, _ = _component_log_terms(gmm, x, t, schedule)
    result = logsumexp(log_terms, axis=-1)
    return float(result) if np.ndim(result) == 0 else result


def gmm_responsibilities(gmm: GaussianMixture, x: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Posterior component probabilities under the noised mixture"""
    log_terms, _, _ = _component_log_terms(gmm, x, t, schedule)
    return softmax(log_terms, axis=-1)


def gmm_score_t(gmm: GaussianMixture, x: np.ndarray, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Gradient in x of gmm_log_density_t"""
    log_terms, diff, vars_t = _component_log_terms(gmm, x, t, schedule)
    resp = softmax(log_terms, axis=-1)
    return np.sum(resp[..., None] * (-diff / vars_t), axis=-2)


def gmm_eps_provider(gmm: GaussianMixture, schedule: NoiseSchedule) -> EpsProvider:
    """Adapt the exact mixture score to an eps-provider: -sqrt(1 - ab_t) * score"""

    def provider(x: np.ndarray, t: int) -> np.ndarray:
        return score_to_eps(gmm_score_t(gmm, x, t, schedule), t, schedule)

    return provider


def gmm_sample(gmm: GaussianMixture, n: int, seed: int, return_components: bool = False):
    """
    Ancestral mixture sampling.

    Args:
        gmm: Mixture to sample
        n: Number of samples (>= 1)
        seed: Generator seed
        return_components: Also return the drawn component index of each sample

    Returns:
        Array (n, d), or tuple (samples, components)
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    components = rng.choice(gmm.n_components, size=n, p=gmm.weights)
    noise = rng.standard_normal((n, gmm.dim))
    samples = gmm.means[components] + np.sqrt(gmm.variances[components]) * noise
    if return_components:
        return samples, components
    return samples


def standard_normal_mixture(d: int) -> GaussianMixture:
    """N(0, I_d) as a one-component mixture"""
    return GaussianMixture(
        weights=np.ones(1),
        means=np.zeros((1, d)),
        variances=np.ones((1, d)),
    )


def point_mass_mixture(mu: List[float], variance: float = 1e-8) -> GaussianMixture:
    """Near-degenerate single component concentrated at mu"""
    mu_arr = np.asarray(mu, dtype=np.float64)[None, :]
    return GaussianMixture(weights=np.ones(1), means=mu_arr, variances=np.full_like(mu_arr, variance))
