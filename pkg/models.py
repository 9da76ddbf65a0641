"""
Pydantic models for experiment configuration and API request/response schemas
"""
from pydantic import BaseModel, Field, field_validator, model_validator
from typing import Dict, List, Literal, Optional, Any


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------

class DataConfig(BaseModel):
    """Synthetic dataset parameters"""
    height: int = Field(default=16, ge=1, description="Field height H in pixels")
    width: int = Field(default=16, ge=1, description="Field width W in pixels")
    n_grains: int = Field(default=4, ge=1, description="Voronoi seeds K per field")
    n_train: int = Field(default=4096, ge=1, description="Number of training fields")
    n_validation: int = Field(default=256, ge=1, description="Number of validation fields")
    train_seed: int = Field(default=0, ge=0, description="Base seed of the training fields")
    validation_seed: int = Field(
        default=1_000_000,
        ge=0,
        description="Base seed of the validation fields; must leave a gap after the training range"
    )
    aux_model: Literal["doubled", "rotations"] = Field(
        default="doubled",
        description="Auxiliary forward model: angle doubling, or polarizer rotations reduced by PCA"
    )
    n_rotations: int = Field(default=6, ge=2, description="Polarizer angles for the rotations model")
    pca_components: int = Field(default=2, ge=1, description="PCA channels kept for the rotations model")
    mask_level: Literal["pixel", "entry"] = Field(
        default="pixel",
        description="Reveal whole pixels (all main channels) or individual main-block entries"
    )
    build_noise_std: float = Field(
        default=0.0,
        ge=0.0,
        description="Noise added to the auxiliary block while building the training set"
    )

    @model_validator(mode="after")
    def _check_seed_ranges(self) -> "DataConfig":
        if self.train_seed <= self.validation_seed < self.train_seed + self.n_train:
            raise ValueError("validation_seed must not fall inside the training seed range")
        if self.validation_seed <= self.train_seed < self.validation_seed + self.n_validation:
            raise ValueError("train_seed must not fall inside the validation seed range")
        return self


class ScheduleConfig(BaseModel):
    """Noise schedule parameters"""
    T: int = Field(default=1000, ge=1, description="Diffusion steps")
    beta_start: float = Field(default=1e-4, ge=0.0, lt=1.0, description="First beta")
    beta_end: float = Field(default=0.02, ge=0.0, lt=1.0, description="Last beta")

    @model_validator(mode="after")
    def _check_order(self) -> "ScheduleConfig":
        if self.beta_start > self.beta_end:
            raise ValueError("beta_start must not exceed beta_end")
        return self


class ModelConfig(BaseModel):
    """Denoiser architecture"""
    width: int = Field(default=512, ge=1, description="Hidden width W")
    depth: int = Field(default=3, ge=1, description="Number of hidden W x W layers H")
    n_freqs: int = Field(default=16, ge=1, description="Sinusoidal time-embedding frequencies F")


class TrainConfig(BaseModel):
    """Optimizer and loop settings, recorded in checkpoints for provenance"""
    steps: int = Field(default=5000, ge=1, description="Gradient steps")
    batch_size: int = Field(default=128, ge=1, description="Samples per batch")
    learning_rate: float = Field(default=1e-3, ge=0.0, description="Adaptive-moment step size")
    beta1: float = Field(default=0.9, gt=0.0, lt=1.0, description="First-moment decay")
    beta2: float = Field(default=0.999, gt=0.0, lt=1.0, description="Second-moment decay")
    adam_eps: float = Field(default=1e-8, gt=0.0, description="Denominator offset")
    grad_clip: float = Field(default=1.0, gt=0.0, description="Global gradient-norm clip")
    seed: int = Field(default=0, ge=0, description="Seed for initialization and batches")
    log_every: int = Field(default=100, ge=1, description="Steps between loss log lines")
    divergence_threshold: float = Field(default=1e6, gt=0.0, description="Loss above this aborts training")
    prefetch: int = Field(default=4, ge=1, description="Batches assembled ahead of the optimizer")


class SolverConfig(BaseModel):
    """Posterior sampler settings"""
    particles: int = Field(default=256, ge=1, description="SMC particle count N")
    n_out: int = Field(default=1, ge=1, description="Samples returned per reconstruction")
    n_out_uncertainty: int = Field(default=20, ge=2, description="Samples per uncertainty study")
    noise_floor: float = Field(default=1e-3, gt=0.0, description="Floor applied to zero noise std in likelihoods")
    ess_fraction: float = Field(default=0.5, gt=0.0, le=1.0, description="Resample when ESS < fraction * N")
    unimodal_solver: Literal["smc", "replacement"] = Field(
        default="smc",
        description="Sampler used by the main-only arm"
    )
    twist: Literal["tweedie", "bridge"] = Field(
        default="tweedie",
        description="SMC twisting function: denoised look-ahead, or one diffused observation path"
    )
    clip_denoised: bool = Field(
        default=True,
        description="Clip the x0 estimate of trained denoisers to the normalized data range [-1, 1]"
    )
    seed: int = Field(default=0, ge=0, description="Base solver seed")

    @model_validator(mode="after")
    def _check_counts(self) -> "SolverConfig":
        if self.n_out > self.particles:
            raise ValueError("n_out must not exceed the particle count")
        return self


class SweepConfig(BaseModel):
    """Experiment sweeps and acceptance thresholds"""
    fractions: List[float] = Field(
        default_factory=lambda: [0.01, 0.02, 0.05, 0.10],
        description="Observed main-modality fractions"
    )
    sigmas: List[float] = Field(
        default_factory=lambda: [0.0, 0.05, 0.2],
        description="Auxiliary noise standard deviations"
    )
    trials: int = Field(default=20, ge=1, description="Paired trials per sweep cell")
    uncertainty_fractions: List[float] = Field(
        default_factory=lambda: [0.01, 0.02, 0.05, 0.10],
        description="Fractions of the uncertainty study"
    )
    uncertainty_seeds: int = Field(default=5, ge=1, description="Observation sets in the uncertainty study")
    consistency_samples: int = Field(default=100, ge=0, description="Unconditional samples for the consistency check")
    consistency_threshold: float = Field(default=0.1, gt=0.0, description="Median consistency error bound")
    symmetry_order: int = Field(default=1, ge=1, description="Cyclic symmetry order m of the disorientation")
    unimodal_widths: List[int] = Field(
        default_factory=lambda: [128, 256, 512],
        description="Hidden widths of the unimodal capacity variants"
    )

    @field_validator("fractions", "uncertainty_fractions")
    @classmethod
    def _check_fractions(cls, value: List[float]) -> List[float]:
        if not value:
            raise ValueError("fraction list must not be empty")
        for fraction in value:
            if not 0.0 <= fraction <= 1.0:
                raise ValueError(f"fraction {fraction} outside [0, 1]")
        return sorted(value)

    @field_validator("sigmas")
    @classmethod
    def _check_sigmas(cls, value: List[float]) -> List[float]:
        if not value:
            raise ValueError("sigma list must not be empty")
        if any(sigma < 0.0 for sigma in value):
            raise ValueError("sigmas must be nonnegative")
        return sorted(value)


class MixtureSpec(BaseModel):
    """Diagonal Gaussian mixture as written in the config file"""
    name: str = Field(..., description="Identifier used on the command line")
    weights: List[float] = Field(..., min_length=1)
    means: List[List[float]] = Field(..., min_length=1)
    variances: List[List[float]] = Field(..., min_length=1)


class ExperimentConfig(BaseModel):
    """Complete experiment description; every seed is explicit"""
    experiment_id: str = Field(default="desk-scale", description="Label carried into every output row")
    output_dir: str = Field(default="outputs", description="Directory for all artifacts")
    data: DataConfig = Field(default_factory=DataConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    sweep: SweepConfig = Field(default_factory=SweepConfig)
    oracle_mixtures: List[MixtureSpec] = Field(default_factory=list, description="Analytic priors for sampler checks")

    def seeds(self) -> Dict[str, int]:
        return {
            "train_seed": self.data.train_seed,
            "validation_seed": self.data.validation_seed,
            "train": self.train.seed,
            "solver": self.solver.seed,
        }


class DatasetManifest(BaseModel):
    """Everything needed to reload a generated dataset and its preprocessing"""
    experiment_id: str
    config_hash: str
    height: int
    width: int
    n_grains: int
    c_main: int
    c_aux: int
    channel_names: List[str]
    n_train: int
    n_validation: int
    train_seed: int
    validation_seed: int
    aux_model: str
    n_rotations: int
    forward_id: str = Field(..., description="Identifier of the black-box forward model")
    build_noise_std: float
    normalization: Dict[str, List[float]] = Field(..., description="Per-channel mins and maxs of the training set")
    pca: Optional[Dict[str, Any]] = Field(default=None, description="Fitted PCA model of the rotations variant")
    files: Dict[str, str] = Field(default_factory=dict, description="Payload file names relative to the manifest")


# ---------------------------------------------------------------------------
# Report rows
# ---------------------------------------------------------------------------

class MetricRow(BaseModel):
    """One metric value as written to the CSV reports"""
    experiment_id: str
    model: str = Field(..., description="multimodal, unimodal-w<W>, or oracle")
    trial: int = Field(..., ge=0)
    fraction: float
    sigma: float
    metric: str
    value: float


class RuleResult(BaseModel):
    """Outcome of one acceptance rule"""
    rule_id: str = Field(..., description="Unique identifier for the rule")
    rule_name: str = Field(..., description="Name of the rule")
    severity: str = Field(..., description="Severity level: error, warning, info")
    description: str = Field(..., description="Description of what was checked")
    details: str = Field(..., description="Measured values behind the verdict")
    passed: bool = Field(..., description="Whether the rule passed")


class AcceptanceReport(BaseModel):
    """Result of evaluating the acceptance rules over an output directory"""
    overall_score: float = Field(..., description="Severity-weighted share of checked rules that passed (0-100)")
    total_rules_checked: int = Field(..., description="Rules with enough data to evaluate")
    rules_passed: int
    rules_failed: int
    rules_skipped: List[str] = Field(default_factory=list, description="Rules without input tables")
    results: List[RuleResult] = Field(default_factory=list)
    grade: str = Field(..., description="A, B, C, D or F")
    success: bool
    message: Optional[str] = None


# ---------------------------------------------------------------------------
# HTTP API
# ---------------------------------------------------------------------------

class HealthCheckResponse(BaseModel):
    """Health check response"""
    status: str = Field(..., description="Service status")
    version: str = Field(..., description="API version")


class ReconstructRequest(BaseModel):
    """Request model for a single reconstruction"""
    checkpoint: str = Field(..., description="Path of the checkpoint to use")
    fraction: float = Field(..., ge=0.0, le=1.0, description="Observed main-modality fraction")
    sigma: float = Field(default=0.0, ge=0.0, description="Auxiliary noise std (multimodal only)")
    seed: int = Field(default=0, ge=0, description="Trial seed: selects field, mask, noise and solver draws")
    particles: Optional[int] = Field(default=None, ge=1, description="Override of the particle count")


class ReconstructResponse(BaseModel):
    """Metrics of a single reconstruction"""
    model: str
    field_index: int
    observed_coordinates: int
    metrics: Dict[str, float] = Field(default_factory=dict)
    output_files: List[str] = Field(default_factory=list)
    success: bool
    message: Optional[str] = None


class ConsistencyRequest(BaseModel):
    """Request model for the generated-sample consistency check"""
    checkpoint: str = Field(..., description="Multimodal checkpoint path")
    n: int = Field(default=100, ge=0, description="Unconditional samples to draw")
    seed: int = Field(default=0, ge=0)


class ConsistencyResponse(BaseModel):
    """Relative consistency errors of generated samples"""
    errors: List[float] = Field(default_factory=list)
    median: Optional[float] = None
    threshold: float
    success: bool
    output_file: Optional[str] = None


class EvaluateRequest(BaseModel):
    """Request model for acceptance evaluation"""
    output_dir: Optional[str] = Field(default=None, description="Directory holding the experiment tables")


class RunSummary(BaseModel):
    """Generic summary returned by long-running commands"""
    command: str
    output_files: List[str] = Field(default_factory=list)
    details: Dict[str, Any] = Field(default_factory=dict)
