"""
Error hierarchy for the multimodal diffusion toolkit
"""
from typing import Optional


class MultimodalDiffusionError(Exception):
    """Base class for every error raised by this package"""


class ConfigError(MultimodalDiffusionError, ValueError):
    """Invalid experiment configuration or CLI arguments"""


class ScheduleError(MultimodalDiffusionError, ValueError):
    """Invalid noise schedule parameters or timestep"""


class DimensionMismatchError(MultimodalDiffusionError, ValueError):
    """Array shapes that must agree do not"""


class DataError(MultimodalDiffusionError, ValueError):
    """Degenerate or malformed dataset"""


class MetricError(MultimodalDiffusionError, ValueError):
    """Metric undefined for the given inputs"""


class NonFiniteLossError(MultimodalDiffusionError):
    """Loss evaluated to NaN or infinity for a batch element"""

    def __init__(self, batch_index: int, message: Optional[str] = None):
        self.batch_index = batch_index
        super().__init__(message or f"Non-finite loss at batch index {batch_index}")


class TrainingDivergenceError(MultimodalDiffusionError):
    """Training loss exceeded the divergence threshold"""


class CheckpointError(MultimodalDiffusionError):
    """Base class for checkpoint read/write failures"""


class CheckpointFormatError(CheckpointError):
    """File is not a checkpoint (bad magic bytes or unreadable header)"""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an unsupported format version"""


class CheckpointTruncatedError(CheckpointError):
    """Payload holds fewer floats than the header requires"""


class CheckpointHeaderMismatchError(CheckpointError):
    """Header fields disagree with each other or with the payload"""


class EnsembleCollapseError(MultimodalDiffusionError):
    """Every particle weight became zero"""


class ForwardModelError(MultimodalDiffusionError):
    """Black-box forward model failed or rejected its input"""

    def __init__(self, message: str, sample_index: Optional[int] = None):
        self.sample_index = sample_index
        if sample_index is not None:
            message = f"{message} (sample index {sample_index})"
        super().__init__(message)


class ArtifactNotFoundError(DataError):
    """A dataset, checkpoint or table the command needs is missing"""
