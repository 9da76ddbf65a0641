"""
Reconstruction metrics: symmetry-aware disorientation of planar orientation
fields, relative l2 errors and ensemble statistics
"""
from typing import List, Sequence
import logging

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from exceptions import DimensionMismatchError, MetricError

logger = logging.getLogger(__name__)


class SymmetryGroup(BaseModel):
    """Planar cyclic group of rotations by 2*pi/m"""
    model_config = ConfigDict(frozen=True)

    order: int = Field(default=1, ge=1, description="Order m of the group")

    @property
    def period(self) -> float:
        return 2.0 * np.pi / self.order

    @property
    def max_degrees(self) -> float:
        return 180.0 / self.order


def disorientation(theta1, theta2, group: SymmetryGroup):
    """
    Smallest angular distance between two orientations over the group, in degrees.

    Works elementwise on arrays; the result lies in [0, 180/m].
    """
    period = group.period
    d = np.mod(np.asarray(theta1, dtype=np.float64) - np.asarray(theta2, dtype=np.float64), period)
    d = np.minimum(d, period - d)
    result = np.degrees(np.clip(d, 0.0, period / 2.0))
    return float(result) if np.ndim(result) == 0 else result


def disorientation_map(field1: np.ndarray, field2: np.ndarray, group: SymmetryGroup) -> np.ndarray:
    """Pixelwise disorientation between two angle grids"""
    field1 = np.asarray(field1)
    field2 = np.asarray(field2)
    if field1.shape != field2.shape:
        raise DimensionMismatchError(f"field shapes differ: {field1.shape} vs {field2.shape}")
    return np.asarray(disorientation(field1, field2, group))


def mean_field_disorientation(field1: np.ndarray, field2: np.ndarray, group: SymmetryGroup) -> float:
    """Mean pixelwise disorientation in degrees"""
    return float(np.mean(disorientation_map(field1, field2, group)))


def relative_l2(a: np.ndarray, b_reference: np.ndarray) -> float:
    """||a - b|| / ||b||"""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b_reference, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"shapes differ: {a.shape} vs {b.shape}")
    norm = float(np.linalg.norm(b))
    if norm == 0.0:
        raise MetricError("reference has zero norm")
    return float(np.linalg.norm(a - b)) / norm


def circular_std(angles: np.ndarray, group: SymmetryGroup, axis: int = 0) -> np.ndarray:
    """
    Circular standard deviation on the quotient circle, in degrees.

    Angles are multiplied by m so that symmetric orientations coincide; the
    resultant length R of the mapped unit vectors gives sqrt(-2 ln R) / m.
    """
    mapped = group.order * np.asarray(angles, dtype=np.float64)
    resultant = np.hypot(np.mean(np.cos(mapped), axis=axis), np.mean(np.sin(mapped), axis=axis))
    resultant = np.clip(resultant, 1e-300, 1.0)
    return np.degrees(np.sqrt(-2.0 * np.log(resultant)) / group.order)


class EnsembleStats(BaseModel):
    """Error statistics of an ensemble of reconstructions of one truth"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    mean_error: float = Field(..., description="Mean over samples of the mean disorientation (degrees)")
    std_error: float = Field(..., description="Sample std of the per-sample mean disorientation")
    pixel_std: np.ndarray = Field(..., description="Circular std of orientation across samples, per pixel")
    sample_errors: List[float] = Field(default_factory=list)


def ensemble_error_stats(samples: Sequence[np.ndarray], truth: np.ndarray, group: SymmetryGroup) -> EnsembleStats:
    """
    Spread of reconstruction error across posterior samples.

    Args:
        samples: At least two angle grids drawn for the same observation
        truth: Ground-truth angle grid
        group: Symmetry group of the orientations

    Returns:
        EnsembleStats
    """
    if len(samples) < 2:
        raise MetricError(f"need at least 2 samples, got {len(samples)}")
    errors = [mean_field_disorientation(sample, truth, group) for sample in samples]
    return EnsembleStats(
        mean_error=float(np.mean(errors)),
        std_error=float(np.std(errors, ddof=1)),
        pixel_std=circular_std(np.stack(samples), group, axis=0),
        sample_errors=errors,
    )
