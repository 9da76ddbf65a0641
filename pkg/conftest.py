"""
Shared fixtures: schedules, a tiny experiment config, and a session-wide
workspace with generated data and trained checkpoints
"""
import pytest

from diffusion_core import make_linear_schedule
from experiment_service import ExperimentService
from models import (
    DataConfig,
    ExperimentConfig,
    ModelConfig,
    ScheduleConfig,
    SolverConfig,
    SweepConfig,
    TrainConfig,
)


@pytest.fixture(scope="session")
def short_schedule():
    """100 steps reaching ab_T ~ 5e-5"""
    return make_linear_schedule(100, 1e-3, 0.2)


@pytest.fixture(scope="session")
def default_schedule():
    return make_linear_schedule(1000)


def make_tiny_config(output_dir) -> ExperimentConfig:
    return ExperimentConfig(
        experiment_id="tiny",
        output_dir=str(output_dir),
        data=DataConfig(height=4, width=4, n_grains=2, n_train=64, n_validation=8, validation_seed=10000),
        schedule=ScheduleConfig(T=20, beta_start=0.01, beta_end=0.5),
        model=ModelConfig(width=16, depth=1, n_freqs=4),
        train=TrainConfig(steps=30, batch_size=16, log_every=10),
        solver=SolverConfig(particles=16, n_out_uncertainty=4),
        sweep=SweepConfig(
            fractions=[0.25, 0.5],
            sigmas=[0.0, 0.1],
            trials=2,
            uncertainty_fractions=[0.25, 1.0],
            uncertainty_seeds=2,
            consistency_samples=4,
            unimodal_widths=[16],
        ),
    )


@pytest.fixture
def tiny_config(tmp_path):
    """Seconds-scale experiment over 4 x 4 fields"""
    return make_tiny_config(tmp_path / "out")


@pytest.fixture(scope="session")
def trained_workspace(tmp_path_factory):
    """Output directory holding data plus one multimodal and one unimodal checkpoint"""
    config = make_tiny_config(tmp_path_factory.mktemp("workspace") / "out")
    service = ExperimentService(config, max_workers=1)
    service.gen_data()
    multimodal = service.train("multimodal").output_files[0]
    unimodal = service.train("unimodal").output_files[0]
    return {"config": config, "multimodal": multimodal, "unimodal": unimodal}
