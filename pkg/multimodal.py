"""
Joint-modality assembly and reconstruction.

A JointField concatenates the expensive main modality with the auxiliary modality
produced by a black-box forward model. Once a prior is trained on joint fields,
recovering the main modality from a few main entries plus the full auxiliary
field is a linear inpainting problem, so reconstruct only needs the linear
solver and never evaluates the forward model.
"""
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Tuple, Union
import logging
import threading

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from diffusion_core import EpsProvider, NoiseSchedule, clip_denoised
from exceptions import DimensionMismatchError, ForwardModelError
from inverse_solver import LinearObservation, PosteriorSampler, ReplacementSampler, SmcSampler
from metrics import relative_l2
from models import SolverConfig
from score_model import DenoiserParams, model_eps_provider

logger = logging.getLogger(__name__)

PriorSampler = Callable[[int], np.ndarray]


class BlackBoxForward:
    """
    Evaluation-only wrapper around a forward model main -> aux.

    Only `__call__` is exposed; every evaluation increments a thread-safe
    counter so callers can verify that a code path never touched the model.
    """

    def __init__(self, identifier: str, fn: Callable[[np.ndarray], np.ndarray], aux_channels: int):
        self.identifier = identifier
        self.aux_channels = aux_channels
        self._fn = fn
        self._count = 0
        self._lock = threading.Lock()

    @property
    def evaluation_count(self) -> int:
        with self._lock:
            return self._count

    def __call__(self, main: np.ndarray) -> np.ndarray:
        with self._lock:
            self._count += 1
        aux = np.asarray(self._fn(np.asarray(main, dtype=np.float64)), dtype=np.float64)
        if aux.shape[:2] != main.shape[:2] or aux.shape[-1] != self.aux_channels:
            raise ForwardModelError(
                f"{self.identifier} returned shape {aux.shape}, expected {main.shape[:2] + (self.aux_channels,)}"
            )
        return aux

    def __repr__(self) -> str:
        return f"BlackBoxForward({self.identifier!r}, aux_channels={self.aux_channels})"


class JointLayout(BaseModel):
    """Grid size and channel order of a joint field"""
    model_config = ConfigDict(frozen=True)

    height: int = Field(..., ge=1)
    width: int = Field(..., ge=1)
    c_main: int = Field(..., ge=1)
    c_aux: int = Field(default=0, ge=0)
    channel_names: List[str] = Field(default_factory=list, description="One name per channel, main first")

    @model_validator(mode="after")
    def _check_names(self) -> "JointLayout":
        if self.channel_names and len(self.channel_names) != self.c_main + self.c_aux:
            raise ValueError("channel_names must name every channel")
        return self

    @property
    def main_size(self) -> int:
        return self.height * self.width * self.c_main

    @property
    def aux_size(self) -> int:
        return self.height * self.width * self.c_aux

    @property
    def dim(self) -> int:
        return self.main_size + self.aux_size

    def names(self) -> List[str]:
        if self.channel_names:
            return list(self.channel_names)
        return [f"main_{c}" for c in range(self.c_main)] + [f"aux_{c}" for c in range(self.c_aux)]

    def main_only(self) -> "JointLayout":
        return JointLayout(
            height=self.height,
            width=self.width,
            c_main=self.c_main,
            c_aux=0,
            channel_names=self.names()[: self.c_main],
        )


class JointField(BaseModel):
    """Main and auxiliary grids of one sample"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    main: np.ndarray = Field(..., description="H x W x C_main")
    aux: np.ndarray = Field(..., description="H x W x C_aux, C_aux may be 0")
    channel_names: List[str] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_shapes(self) -> "JointField":
        if self.main.ndim != 3 or self.aux.ndim != 3:
            raise ValueError("main and aux must be H x W x C grids")
        if self.main.shape[:2] != self.aux.shape[:2]:
            raise ValueError(f"spatial shapes differ: {self.main.shape[:2]} vs {self.aux.shape[:2]}")
        if self.channel_names and len(self.channel_names) != self.main.shape[2] + self.aux.shape[2]:
            raise ValueError("channel_names must name every channel")
        return self

    @property
    def layout(self) -> JointLayout:
        H, W, c_main = self.main.shape
        return JointLayout(
            height=H, width=W, c_main=c_main, c_aux=self.aux.shape[2], channel_names=self.channel_names
        )

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.main.reshape(-1), self.aux.reshape(-1)])

    @classmethod
    def from_flat(cls, vector: np.ndarray, layout: JointLayout) -> "JointField":
        vector = np.asarray(vector)
        if vector.shape != (layout.dim,):
            raise DimensionMismatchError(f"vector has shape {vector.shape}, layout needs ({layout.dim},)")
        main = vector[: layout.main_size].reshape(layout.height, layout.width, layout.c_main)
        aux = vector[layout.main_size:].reshape(layout.height, layout.width, layout.c_aux)
        return cls(main=main.copy(), aux=aux.copy(), channel_names=layout.names())


def stack_fields(fields: List[JointField]) -> np.ndarray:
    """Flatten every field into one (n, d) array"""
    if not fields:
        return np.zeros((0, 0))
    return np.stack([field.flatten() for field in fields])


def unstack_fields(array: np.ndarray, layout: JointLayout) -> List[JointField]:
    return [JointField.from_flat(row, layout) for row in np.asarray(array)]


class ObservationSpec(BaseModel):
    """Which main-block coordinates are seen, and how the auxiliary block is seen"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    omega: np.ndarray = Field(..., description="Observed coordinate indices inside the main block")
    aux_noise_std: float = Field(default=0.0, ge=0.0, description="Noise std sigma of the auxiliary block")
    aux_observed: bool = Field(default=True)


def pixel_coordinates(pixels: np.ndarray, c_main: int) -> np.ndarray:
    """Main-block coordinates of every channel at the given flat pixel indices"""
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1)
    return (pixels[:, None] * c_main + np.arange(c_main)[None, :]).reshape(-1)


def build_joint_dataset(
    prior_sampler: PriorSampler,
    f: BlackBoxForward,
    n: int,
    noise_std: float,
    seed: int,
    max_workers: int = 1,
) -> List[JointField]:
    """
    Run the forward model over prior samples and merge the two modalities.

    Args:
        prior_sampler: Maps an item seed to a main field (H x W x C_main); item i uses seed + i
        f: Black-box forward model
        n: Number of items (>= 1)
        noise_std: Std of the Gaussian noise added to each aux field
        seed: Base seed
        max_workers: Threads used to build items

    Returns:
        List of JointField in item order
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    noise_seeds = np.random.SeedSequence(seed).spawn(n)

    def build(index: int) -> JointField:
        main = np.asarray(prior_sampler(seed + index), dtype=np.float64)
        try:
            aux = f(main)
        except ForwardModelError as e:
            raise ForwardModelError(str(e), sample_index=index) from e
        except Exception as e:
            logger.error(f"Forward model {f.identifier} failed on item {index}: {e}")
            raise ForwardModelError(f"{f.identifier} failed: {e}", sample_index=index) from e
        if noise_std > 0.0:
            aux = aux + noise_std * np.random.default_rng(noise_seeds[index]).standard_normal(aux.shape)
        return JointField(main=main, aux=aux)

    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            fields = list(pool.map(build, range(n)))
    else:
        fields = [build(i) for i in range(n)]
    logger.info(f"Built {n} joint fields with {f.identifier}, aux noise std {noise_std}")
    return fields


def augmented_mask(spec: ObservationSpec, layout: JointLayout) -> Tuple[np.ndarray, np.ndarray]:
    """
    Joint-space mask: omega on the main block plus the whole aux block when observed.

    Returns:
        (sorted joint indices, per-index noise std: 0 on main, sigma on aux)
    """
    omega = np.unique(np.asarray(spec.omega, dtype=np.int64).reshape(-1))
    if omega.size and (omega[0] < 0 or omega[-1] >= layout.main_size):
        raise DimensionMismatchError(f"omega indices must lie in [0, {layout.main_size})")
    parts = [omega]
    stds = [np.zeros(omega.size)]
    if spec.aux_observed:
        if layout.c_aux == 0:
            raise DimensionMismatchError("aux_observed requires a layout with auxiliary channels")
        parts.append(np.arange(layout.main_size, layout.dim, dtype=np.int64))
        stds.append(np.full(layout.aux_size, spec.aux_noise_std))
    return np.concatenate(parts), np.concatenate(stds)


class ReconstructionResult(BaseModel):
    """Samples returned by reconstruct"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    samples: List[JointField]
    main_fields: List[np.ndarray]


def reconstruct(
    y_main_values: np.ndarray,
    spec: ObservationSpec,
    y_aux_field: Optional[np.ndarray],
    model: Union[DenoiserParams, EpsProvider],
    schedule: NoiseSchedule,
    solver: SolverConfig,
    seed: int,
    layout: JointLayout,
    n_out: Optional[int] = None,
    method: str = "smc",
) -> ReconstructionResult:
    """
    Sample the joint posterior given the observed main entries and the aux field.

    Args:
        y_main_values: Values at spec.omega, in omega order
        spec: Observation pattern
        y_aux_field: H x W x C_aux aux observation, required iff spec.aux_observed
        model: Trained denoiser over layout.dim coordinates, or any eps-provider
        schedule: Schedule the model was trained with
        solver: Particle count, noise floor and resampling threshold
        seed: Solver seed
        layout: Joint layout of the model's coordinates
        n_out: Samples to return, default solver.n_out
        method: "smc", or "replacement" for the mask-only baseline

    Returns:
        ReconstructionResult with one JointField and one main grid per sample
    """
    if isinstance(model, DenoiserParams):
        if model.dim != layout.dim:
            raise DimensionMismatchError(f"model dimension {model.dim} does not match layout dimension {layout.dim}")
        provider = model_eps_provider(model)
        if solver.clip_denoised:
            provider = clip_denoised(provider, schedule)
    else:
        provider = model
    if spec.aux_observed != (y_aux_field is not None):
        raise ValueError("y_aux_field must be given exactly when aux_observed is set")

    omega = np.asarray(spec.omega, dtype=np.int64).reshape(-1)
    y_main = np.asarray(y_main_values, dtype=np.float64).reshape(-1)
    if y_main.size != omega.size:
        raise DimensionMismatchError(f"{y_main.size} main values for {omega.size} observed coordinates")
    if np.unique(omega).size != omega.size:
        raise ValueError("omega must not repeat coordinates")
    order = np.argsort(omega, kind="stable")
    values = [y_main[order]]
    if spec.aux_observed:
        y_aux = np.asarray(y_aux_field, dtype=np.float64)
        if y_aux.shape != (layout.height, layout.width, layout.c_aux):
            raise DimensionMismatchError(f"aux field has shape {y_aux.shape}")
        values.append(y_aux.reshape(-1))

    mask, noise_std = augmented_mask(spec, layout)
    obs = LinearObservation.from_mask(mask, layout.dim, np.concatenate(values), noise_std)

    count = n_out or solver.n_out
    sampler: PosteriorSampler
    if method == "smc":
        sampler = SmcSampler(
            n_particles=solver.particles,
            noise_floor=solver.noise_floor,
            ess_fraction=solver.ess_fraction,
            twist=solver.twist,
        )
    elif method == "replacement":
        sampler = ReplacementSampler()
    else:
        raise ValueError(f"unknown reconstruction method {method!r}")
    vectors = sampler.sample(obs, provider, schedule, n_out=count, seed=seed)

    samples = unstack_fields(vectors, layout)
    return ReconstructionResult(samples=samples, main_fields=[sample.main for sample in samples])


def consistency_check(f: BlackBoxForward, generated: JointField) -> float:
    """
    Relative l2 error ||f(main) - aux|| / ||aux|| of a generated joint field.

    Raises:
        MetricError: if the auxiliary block has zero norm
    """
    return relative_l2(f(generated.main), generated.aux)


def consistency_map(f: BlackBoxForward, generated: JointField) -> np.ndarray:
    """Per-pixel |f(main) - aux| relative to the aux pixel norm (absolute where the norm is 0)"""
    predicted = f(generated.main)
    error = np.linalg.norm(predicted - generated.aux, axis=-1)
    scale = np.linalg.norm(generated.aux, axis=-1)
    return np.where(scale > 0.0, error / np.where(scale > 0.0, scale, 1.0), error)
