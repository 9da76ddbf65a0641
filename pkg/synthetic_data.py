"""
Synthetic grain-structured orientation fields and their auxiliary modality.

Main modality: a Voronoi microstructure in which every grain carries one planar
orientation, embedded as (cos theta, sin theta). Auxiliary modality: a lossy
optical response of the orientation that cannot tell theta from theta + pi,
either the doubled-angle vector or a series of polarizer intensities reduced
by PCA. Also holds the per-channel normalization and the random observation
masks used by the experiments.
"""
from typing import Dict, List, Optional, Tuple
import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.spatial.distance import cdist

from exceptions import DataError, ForwardModelError
from multimodal import BlackBoxForward

logger = logging.getLogger(__name__)

UNIT_TOLERANCE = 1e-6


class GrainField(BaseModel):
    """Voronoi grain map with one orientation per grain"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    theta: np.ndarray = Field(..., description="H x W orientation angles in [0, 2*pi)")
    grain_id: np.ndarray = Field(..., description="H x W index of the nearest seed")
    seed_points: np.ndarray = Field(..., description="K x 2 seed positions (row, column)")
    seed_angles: np.ndarray = Field(..., description="K grain orientations")

    @model_validator(mode="after")
    def _check_invariants(self) -> "GrainField":
        if self.theta.shape != self.grain_id.shape:
            raise ValueError("theta and grain_id must share the grid shape")
        if self.seed_points.shape != (self.seed_angles.size, 2):
            raise ValueError("seed_points must have shape (K, 2)")
        return self

    @property
    def n_grains(self) -> int:
        return int(self.seed_angles.size)


def sample_grain_field(height: int, width: int, n_grains: int, seed: int) -> GrainField:
    """
    Voronoi tessellation of uniformly placed seeds with uniform grain orientations.

    Pixel (i, j) sits at (i + 0.5, j + 0.5) and joins its nearest seed; ties go to
    the lowest seed index.
    """
    if n_grains < 1 or height < 1 or width < 1:
        raise ValueError("height, width and n_grains must be >= 1")
    rng = np.random.default_rng(seed)
    seed_points = rng.uniform(0.0, 1.0, size=(n_grains, 2)) * np.array([height, width])
    seed_angles = rng.uniform(0.0, 2.0 * np.pi, size=n_grains)

    rows, cols = np.meshgrid(np.arange(height) + 0.5, np.arange(width) + 0.5, indexing="ij")
    centers = np.column_stack([rows.ravel(), cols.ravel()])
    grain_id = np.argmin(cdist(centers, seed_points), axis=1).reshape(height, width)
    return GrainField(
        theta=seed_angles[grain_id],
        grain_id=grain_id,
        seed_points=seed_points,
        seed_angles=seed_angles,
    )


def orientation_to_channels(theta: np.ndarray) -> np.ndarray:
    """H x W angles -> H x W x 2 unit vectors (cos theta, sin theta)"""
    theta = np.asarray(theta, dtype=np.float64)
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def channels_to_orientation(channels: np.ndarray) -> np.ndarray:
    """Angle in [0, 2*pi) of each (cos, sin) pixel; need not be unit length"""
    channels = np.asarray(channels, dtype=np.float64)
    return np.mod(np.arctan2(channels[..., 1], channels[..., 0]), 2.0 * np.pi)


def project_to_unit(channels: np.ndarray) -> np.ndarray:
    """Replace each (cos, sin) pixel by the unit vector at its angle"""
    return orientation_to_channels(channels_to_orientation(channels))


def _check_unit(main: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    main = np.asarray(main, dtype=np.float64)
    if main.ndim != 3 or main.shape[-1] != 2:
        raise ForwardModelError(f"expected an H x W x 2 orientation field, got shape {main.shape}")
    norms = np.linalg.norm(main, axis=-1)
    worst = float(np.max(np.abs(norms - 1.0))) if norms.size else 0.0
    if worst > UNIT_TOLERANCE:
        raise ForwardModelError(f"orientation vectors are not unit length (max deviation {worst:.3g})")
    return main[..., 0], main[..., 1]


def doubled_angle(main: np.ndarray) -> np.ndarray:
    """(cos theta, sin theta) -> (cos 2 theta, sin 2 theta)"""
    c, s = _check_unit(main)
    return np.stack([c * c - s * s, 2.0 * c * s], axis=-1)


def polarizer_intensities(main: np.ndarray, n_rotations: int = 6) -> np.ndarray:
    """cos(2 (theta - phi_j)) at polarizer angles phi_j = j * pi / n"""
    doubled = doubled_angle(main)
    phis = np.arange(n_rotations) * np.pi / n_rotations
    return doubled[..., :1] * np.cos(2.0 * phis) + doubled[..., 1:] * np.sin(2.0 * phis)


def pl_like_forward() -> BlackBoxForward:
    """Angle-doubling black box; theta and theta + pi give the same output"""
    return BlackBoxForward("pl-doubled-angle", doubled_angle, aux_channels=2)


def rotation_series_forward(n_rotations: int = 6) -> BlackBoxForward:
    return BlackBoxForward(
        f"pl-rotations-{n_rotations}",
        lambda main: polarizer_intensities(main, n_rotations),
        aux_channels=n_rotations,
    )


# ---------------------------------------------------------------------------
# PCA reduction
# ---------------------------------------------------------------------------

class PcaModel(BaseModel):
    """Standardization followed by projection onto the top-k principal directions"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    means: np.ndarray = Field(..., description="Per-channel means, shape (C,)")
    stds: np.ndarray = Field(..., description="Per-channel stds, shape (C,); 1 on dropped channels")
    components: np.ndarray = Field(..., description="k x C orthonormal rows; 0 on dropped channels")
    explained: np.ndarray = Field(..., description="Explained-variance fraction of each component")
    kept: np.ndarray = Field(..., description="Boolean (C,) mask of channels with nonzero variance")

    @property
    def n_components(self) -> int:
        return int(self.components.shape[0])

    @property
    def n_channels(self) -> int:
        return int(self.components.shape[1])

    def to_dict(self) -> Dict[str, list]:
        return {
            "means": self.means.tolist(),
            "stds": self.stds.tolist(),
            "components": self.components.tolist(),
            "explained": self.explained.tolist(),
            "kept": self.kept.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, list]) -> "PcaModel":
        return cls(
            means=np.asarray(data["means"], dtype=np.float64),
            stds=np.asarray(data["stds"], dtype=np.float64),
            components=np.asarray(data["components"], dtype=np.float64).reshape(-1, len(data["means"])),
            explained=np.asarray(data["explained"], dtype=np.float64),
            kept=np.asarray(data["kept"], dtype=bool),
        )


def pca_fit(data: np.ndarray, k: int, unique: bool = True) -> PcaModel:
    """
    Fit a PCA model on pixel vectors.

    Args:
        data: (n, C) pixel vectors
        k: Components to keep (<= C)
        unique: Fit on the distinct rows only

    Returns:
        PcaModel
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise DataError(f"expected (n, C) pixel vectors, got shape {data.shape}")
    n, C = data.shape
    if k < 1 or k > C:
        raise ValueError(f"k must lie in [1, {C}], got {k}")
    if n < C:
        raise DataError(f"need at least {C} pixel vectors, got {n}")
    if unique:
        data = np.unique(data, axis=0)
        logger.info(f"PCA fit on {data.shape[0]} unique pixel vectors out of {n}")

    means = data.mean(axis=0)
    stds = data.std(axis=0)
    kept = stds > 1e-12
    if not np.all(kept):
        logger.warning(f"Dropping zero-variance channels {np.flatnonzero(~kept).tolist()} from PCA")
    if not np.any(kept):
        raise DataError("every channel is constant")
    stds = np.where(kept, stds, 1.0)

    z = (data[:, kept] - means[kept]) / stds[kept]
    cov = z.T @ z / z.shape[0]
    U, S, _ = np.linalg.svd(cov)
    n_kept = int(kept.sum())
    if k > n_kept:
        logger.warning(f"Only {n_kept} channels vary; keeping {n_kept} components instead of {k}")
        k = n_kept
    directions = U[:, :k].T
    # sign convention: largest-magnitude entry positive
    signs = np.sign(directions[np.arange(k), np.argmax(np.abs(directions), axis=1)])
    directions = directions * np.where(signs == 0, 1.0, signs)[:, None]

    components = np.zeros((k, C))
    components[:, kept] = directions
    total = float(S.sum())
    explained = S[:k] / total if total > 0 else np.zeros(k)
    return PcaModel(means=means, stds=stds, components=components, explained=explained, kept=kept)


def pca_apply(model: PcaModel, data: np.ndarray) -> np.ndarray:
    """(..., C) -> (..., k)"""
    data = np.asarray(data, dtype=np.float64)
    return ((data - model.means) / model.stds) @ model.components.T


def pca_invert(model: PcaModel, reduced: np.ndarray) -> np.ndarray:
    """(..., k) -> (..., C); dropped channels come back at their mean"""
    return np.asarray(reduced, dtype=np.float64) @ model.components * model.stds + model.means


class PcaReducedForward:
    """Forward model followed by a fitted PCA reduction of its channels"""

    def __init__(self, base: BlackBoxForward, pca: PcaModel):
        if base.aux_channels != pca.n_channels:
            raise ValueError(f"PCA expects {pca.n_channels} channels, forward model gives {base.aux_channels}")
        self.base = base
        self.pca = pca

    def __call__(self, main: np.ndarray) -> np.ndarray:
        return pca_apply(self.pca, self.base(main))

    def as_black_box(self) -> BlackBoxForward:
        return BlackBoxForward(f"{self.base.identifier}+pca{self.pca.n_components}", self, self.pca.n_components)


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

class NormalizationMap(BaseModel):
    """Per-channel affine map sending the training min to -1 and max to +1"""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    mins: np.ndarray
    maxs: np.ndarray

    def to_dict(self) -> Dict[str, list]:
        return {"mins": self.mins.tolist(), "maxs": self.maxs.tolist()}

    @classmethod
    def from_dict(cls, data: Dict[str, list]) -> "NormalizationMap":
        return cls(mins=np.asarray(data["mins"], dtype=np.float64), maxs=np.asarray(data["maxs"], dtype=np.float64))


def normalize_fit(data: np.ndarray) -> NormalizationMap:
    """Fit over every axis but the last (channels)"""
    data = np.asarray(data, dtype=np.float64)
    flat = data.reshape(-1, data.shape[-1])
    mins, maxs = flat.min(axis=0), flat.max(axis=0)
    constant = np.flatnonzero(mins >= maxs)
    if constant.size:
        raise DataError(f"channels {constant.tolist()} are constant and cannot be normalized")
    return NormalizationMap(mins=mins, maxs=maxs)


def normalize_apply(norm: NormalizationMap, data: np.ndarray) -> np.ndarray:
    """Values outside the training range map outside [-1, 1]"""
    return 2.0 * (np.asarray(data, dtype=np.float64) - norm.mins) / (norm.maxs - norm.mins) - 1.0


def normalize_invert(norm: NormalizationMap, data: np.ndarray) -> np.ndarray:
    return (np.asarray(data, dtype=np.float64) + 1.0) * (norm.maxs - norm.mins) / 2.0 + norm.mins


# ---------------------------------------------------------------------------
# Masks
# ---------------------------------------------------------------------------

def observed_count(fraction: float, total: int) -> int:
    """round(fraction * total) with halves rounded up"""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    return int(min(total, np.floor(fraction * total + 0.5)))


def random_mask(height: int, width: int, fraction: float, seed: int) -> np.ndarray:
    """Sorted flat indices of round(fraction * H * W) pixels drawn without replacement"""
    count = observed_count(fraction, height * width)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(height * width, size=count, replace=False))


def random_entry_mask(height: int, width: int, channels: int, fraction: float, seed: int) -> np.ndarray:
    """Sorted main-block coordinates of round(fraction * H * W * C) individual entries"""
    total = height * width * channels
    count = observed_count(fraction, total)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(total, size=count, replace=False))


def grain_prior_sampler(height: int, width: int, n_grains: int):
    """Item-seed -> H x W x 2 main field, for build_joint_dataset"""

    def sample(item_seed: int) -> np.ndarray:
        return orientation_to_channels(sample_grain_field(height, width, n_grains, item_seed).theta)

    return sample


def sample_main_fields(height: int, width: int, n_grains: int, n: int, base_seed: int) -> np.ndarray:
    """n orientation fields from seeds base_seed .. base_seed + n - 1, shape (n, H, W, 2)"""
    sampler = grain_prior_sampler(height, width, n_grains)
    return np.stack([sampler(base_seed + i) for i in range(n)])


def build_forward(
    aux_model: str,
    n_rotations: int = 6,
    pca: Optional[PcaModel] = None,
) -> BlackBoxForward:
    """Black box named by the data config; the rotations model needs its fitted PCA"""
    if aux_model == "doubled":
        return pl_like_forward()
    if aux_model == "rotations":
        if pca is None:
            raise DataError("the rotations forward model needs a fitted PCA model")
        return PcaReducedForward(rotation_series_forward(n_rotations), pca).as_black_box()
    raise DataError(f"unknown auxiliary model {aux_model!r}")


def fit_rotation_pca(main_fields: np.ndarray, n_rotations: int, k: int) -> PcaModel:
    """Fit PCA on the unique rotation-series pixels of the training fields"""
    base = rotation_series_forward(n_rotations)
    pixels: List[np.ndarray] = [base(field).reshape(-1, n_rotations) for field in main_fields]
    return pca_fit(np.concatenate(pixels), k, unique=True)
