"""
Tests for the experiment service: config handling, dataset generation,
training, paired trials, sweeps, consistency, uncertainty and evaluation
"""
import json
from pathlib import Path

import numpy as np
import pytest

from diffusion_core import predict_x0
from exceptions import ArtifactNotFoundError, ConfigError, DimensionMismatchError
from experiment_service import (
    SINGLE_STREAM,
    SWEEP_STREAM,
    ExperimentService,
    apply_overrides,
    load_config,
)
from field_io import read_table
from models import (
    DataConfig,
    ExperimentConfig,
    MixtureSpec,
    ModelConfig,
    ScheduleConfig,
    SolverConfig,
    SweepConfig,
    TrainConfig,
)


@pytest.fixture
def service(trained_workspace):
    """Fresh service over the shared trained workspace"""
    return ExperimentService(trained_workspace["config"], max_workers=1)


class TestConfig:
    """Test config loading and overrides"""

    def test_defaults_without_file(self):
        """Test no path gives the default config"""
        config = load_config(None)
        assert config.schedule.T == 1000
        assert config.solver.particles == 256

    def test_load_from_file(self, tiny_config, tmp_path):
        """Test a config file round-trips"""
        path = tmp_path / "config.json"
        path.write_text(tiny_config.model_dump_json())
        assert load_config(str(path)) == tiny_config

    def test_missing_file(self, tmp_path):
        """Test a missing config file is a config error"""
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "nope.json"))

    def test_invalid_file(self, tmp_path):
        """Test an invalid config file is a config error"""
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"solver": {"particles": 0}}))
        with pytest.raises(ConfigError):
            load_config(str(path))

    def test_overrides(self, tiny_config):
        """Test dotted overrides apply and None values are ignored"""
        config = apply_overrides(tiny_config, {"solver.seed": 7, "train.seed": None, "output_dir": "elsewhere"})
        assert config.solver.seed == 7
        assert config.train.seed == tiny_config.train.seed
        assert config.output_dir == "elsewhere"

    def test_unknown_override(self, tiny_config):
        """Test unknown keys are rejected"""
        with pytest.raises(ConfigError):
            apply_overrides(tiny_config, {"solver.temperature": 1.0})

    def test_invalid_override(self, tiny_config):
        """Test overrides are revalidated"""
        with pytest.raises(ConfigError):
            apply_overrides(tiny_config, {"solver.n_out": 100})

    def test_overlapping_seed_ranges(self):
        """Test validation seeds may not reuse training seeds"""
        with pytest.raises(ValueError):
            ExperimentConfig.model_validate({"data": {"n_train": 100, "train_seed": 0, "validation_seed": 50}})


class TestDataGeneration:
    """Test dataset generation and reloading"""

    def test_manifest_and_shapes(self, service, trained_workspace):
        """Test the generated dataset reloads with its layout"""
        bundle = service.load_data()
        assert bundle.train.shape == (64, 64)
        assert bundle.validation.shape == (8, 64)
        assert bundle.layout.names() == ["cos_theta", "sin_theta", "cos_2theta", "sin_2theta"]
        assert bundle.manifest.forward_id == "pl-doubled-angle"
        manifest = json.loads((service.data_dir / "manifest.json").read_text())
        assert manifest["n_train"] == 64

    def test_aux_block_is_forward_of_main(self, service):
        """Test every stored aux field equals f(main)"""
        bundle = service.load_data()
        layout = bundle.layout
        f = bundle.forward
        for vector in bundle.validation[:3].astype(np.float64):
            main = vector[: layout.main_size].reshape(4, 4, 2)
            aux = vector[layout.main_size:].reshape(4, 4, 2)
            np.testing.assert_allclose(f(main / np.linalg.norm(main, axis=-1, keepdims=True)), aux, atol=1e-6)

    def test_generation_is_reproducible(self, tiny_config, service):
        """Test an identical config writes identical data"""
        ExperimentService(tiny_config, max_workers=2).gen_data()
        again = ExperimentService(tiny_config).load_data()
        np.testing.assert_array_equal(again.train, service.load_data().train)

    def test_rerun_is_byte_identical(self, tiny_config, tmp_path):
        """Test a second gen-data with the same data config writes the same bytes"""
        first = ExperimentService(tiny_config.model_copy(update={"output_dir": str(tmp_path / "a")}), max_workers=1)
        second = ExperimentService(tiny_config.model_copy(update={"output_dir": str(tmp_path / "b")}), max_workers=3)
        first.gen_data()
        second.gen_data()
        for name in ("manifest.json", "train.jfld", "validation.jfld"):
            assert (first.data_dir / name).read_bytes() == (second.data_dir / name).read_bytes()

    def test_missing_dataset(self, tiny_config):
        """Test commands before gen-data report the missing artifact"""
        with pytest.raises(ArtifactNotFoundError):
            ExperimentService(tiny_config).load_data()

    def test_data_config_mismatch(self, trained_workspace):
        """Test a changed data config refuses the stored dataset"""
        config = apply_overrides(trained_workspace["config"], {"data.n_grains": 3})
        with pytest.raises(ConfigError):
            ExperimentService(config).load_data()

    def test_normalized_range(self, service):
        """Test normalized training data spans [-1, 1] per channel"""
        bundle = service.load_data()
        normalized = service.normalize_vectors(bundle, bundle.train)
        assert normalized.min() == pytest.approx(-1.0, abs=1e-5)
        assert normalized.max() == pytest.approx(1.0, abs=1e-5)
        restored = service.normalize_vectors(bundle, normalized, invert=True)
        np.testing.assert_allclose(restored, bundle.train, atol=1e-5)

    def test_rotations_variant(self, tiny_config):
        """Test the polarizer-series model stores its PCA in the manifest"""
        config = apply_overrides(tiny_config, {"data.aux_model": "rotations", "data.pca_components": 2})
        service = ExperimentService(config)
        service.gen_data()
        bundle = service.load_data()
        assert bundle.layout.c_aux == 2
        assert bundle.manifest.pca is not None
        assert bundle.forward.identifier == "pl-rotations-6+pca2"


class TestTraining:
    """Test checkpoints written by the train command"""

    def test_checkpoints_and_loss_tables(self, service, trained_workspace):
        """Test both modalities wrote a checkpoint and a loss trace"""
        assert Path(trained_workspace["multimodal"]).name == "multimodal.ckpt"
        assert Path(trained_workspace["unimodal"]).name == "unimodal-w16.ckpt"
        metadata, rows = read_table(service.tables_dir / "multimodal_loss.csv")
        assert len(rows) == 30
        assert "config_hash" in metadata

    def test_model_dimensions(self, service, trained_workspace):
        """Test joint and main-only models cover their layouts"""
        multimodal = service.load_model(trained_workspace["multimodal"])
        unimodal = service.load_model(trained_workspace["unimodal"])
        assert (multimodal.modality, multimodal.params.dim) == ("multimodal", 64)
        assert (unimodal.modality, unimodal.params.dim) == ("unimodal", 32)
        assert unimodal.label == "unimodal-w16"

    def test_missing_checkpoint(self, service):
        """Test an absent checkpoint is reported as missing"""
        with pytest.raises(ArtifactNotFoundError):
            service.load_model("no/such.ckpt")

    def test_unknown_modality(self, service):
        """Test only the two modalities can be trained"""
        with pytest.raises(ConfigError):
            service.train("trimodal")

    def test_checkpoint_from_other_dataset(self, trained_workspace, tmp_path):
        """Test a checkpoint is refused by a dataset of another size"""
        config = apply_overrides(
            trained_workspace["config"],
            {"output_dir": str(tmp_path / "other"), "data.height": 3, "data.width": 3},
        )
        other = ExperimentService(config)
        other.gen_data()
        with pytest.raises(DimensionMismatchError):
            other.load_model(trained_workspace["multimodal"])


class TestTrials:
    """Test paired trial setup and single reconstructions"""

    def test_trial_setup_is_paired(self, service):
        """Test a trial draws the same truth and mask every time"""
        bundle = service.load_data()
        a = service.trial_setup(bundle, 1, 0.25, SWEEP_STREAM)
        b = service.trial_setup(bundle, 1, 0.25, SWEEP_STREAM)
        assert a.field_index == b.field_index
        np.testing.assert_array_equal(a.omega, b.omega)
        np.testing.assert_array_equal(a.aux_noise, b.aux_noise)
        assert a.solver_seed == b.solver_seed
        assert a.omega.size == 8

    def test_streams_are_independent(self, service):
        """Test different studies draw different solver seeds"""
        bundle = service.load_data()
        a = service.trial_setup(bundle, 0, 0.25, SWEEP_STREAM)
        b = service.trial_setup(bundle, 0, 0.25, SINGLE_STREAM)
        assert a.solver_seed != b.solver_seed

    def test_observed_values_match_truth(self, service):
        """Test y_main holds the normalized truth at omega"""
        bundle = service.load_data()
        setup = service.trial_setup(bundle, 0, 0.5, SINGLE_STREAM)
        truth = service.normalize_vectors(bundle, bundle.validation[setup.field_index][None, :])[0]
        np.testing.assert_allclose(setup.y_main, truth[setup.omega])

    def test_multimodal_reconstruction(self, service, trained_workspace):
        """Test a multimodal reconstruction writes its metrics and maps"""
        response = service.reconstruct(trained_workspace["multimodal"], 0.25, sigma=0.1, seed=0)
        assert response.success
        assert response.model == "multimodal"
        assert response.observed_coordinates == 8
        assert 0.0 <= response.metrics["disorientation_mean"] <= 180.0
        assert "aux_consistency" in response.metrics
        metrics_file = next(p for p in response.output_files if p.endswith("metrics.csv"))
        _, rows = read_table(metrics_file)
        assert {row["metric"] for row in rows} == {"disorientation_mean", "aux_consistency"}

    def test_reconstruction_is_reproducible(self, service, trained_workspace):
        """Test equal seeds give equal metrics"""
        a = service.reconstruct(trained_workspace["unimodal"], 0.5, seed=3)
        b = service.reconstruct(trained_workspace["unimodal"], 0.5, seed=3)
        assert a.metrics == b.metrics
        assert "aux_consistency" not in a.metrics

    def test_forward_model_untouched_by_reconstruction(self, service, trained_workspace):
        """Test reconstruction itself never evaluates the forward model"""
        bundle = service.load_data()
        model = service.load_model(trained_workspace["multimodal"])
        setup = service.trial_setup(bundle, 0, 0.25, SINGLE_STREAM)
        before = bundle.forward.evaluation_count
        service.run_trial(bundle, model, setup, 0.0)
        assert bundle.forward.evaluation_count == before

    def test_invalid_fraction(self, service, trained_workspace):
        """Test fractions outside [0, 1] are rejected"""
        with pytest.raises(ConfigError):
            service.reconstruct(trained_workspace["multimodal"], 1.5)


class TestStudies:
    """Test the sweep, consistency and uncertainty commands"""

    def test_sweep_tables(self, service, trained_workspace):
        """Test every model appears for every cell and sigma"""
        summary = service.sweep(trained_workspace["multimodal"], [trained_workspace["unimodal"]])
        _, rows = read_table(service.tables_dir / "sweep_trials.csv")
        # 2 fractions x 2 trials x (2 multimodal sigmas + 2 replicated unimodal rows)
        assert len(rows) == 16
        assert summary.details["curve_rows"] == 8
        unimodal = [r for r in rows if r["model"] == "unimodal-w16"]
        by_cell = {}
        for row in unimodal:
            by_cell.setdefault((row["fraction"], row["trial"]), set()).add(row["value"])
        assert all(len(values) == 1 for values in by_cell.values())

    def test_sweep_rejects_swapped_checkpoints(self, service, trained_workspace):
        """Test the multimodal slot needs a multimodal checkpoint"""
        with pytest.raises(ConfigError):
            service.sweep(trained_workspace["unimodal"], [trained_workspace["unimodal"]])

    def test_consistency(self, service, trained_workspace):
        """Test one relative error per generated sample"""
        response = service.consistency(trained_workspace["multimodal"], n=3, seed=1)
        assert len(response.errors) == 3
        assert all(error >= 0.0 for error in response.errors)
        assert response.median == pytest.approx(float(np.median(response.errors)))

    def test_consistency_without_samples(self, service, trained_workspace):
        """Test n = 0 reports no errors and succeeds"""
        response = service.consistency(trained_workspace["multimodal"], n=0)
        assert response.errors == []
        assert response.median is None
        assert response.success
        _, rows = read_table(response.output_file)
        assert rows == []

    def test_consistency_needs_multimodal(self, service, trained_workspace):
        """Test the check is refused for a main-only model"""
        with pytest.raises(ConfigError):
            service.consistency(trained_workspace["unimodal"], n=1)

    def test_uncertainty(self, service, trained_workspace):
        """Test one row per observation seed and fraction"""
        summary = service.uncertainty(trained_workspace["multimodal"])
        _, rows = read_table(summary.output_files[0])
        assert len(rows) == 4
        assert {float(r["fraction"]) for r in rows} == {0.25, 1.0}
        assert all(float(r["std_error"]) >= 0.0 for r in rows)

    def test_uncertainty_needs_two_samples(self, service, trained_workspace):
        """Test n_out below 2 is rejected"""
        with pytest.raises(ConfigError):
            service.uncertainty(trained_workspace["multimodal"], n_out=1)

    def test_evaluate_writes_report(self, service, trained_workspace):
        """Test evaluation over freshly written tables"""
        service.sweep(trained_workspace["multimodal"], [trained_workspace["unimodal"]])
        service.consistency(trained_workspace["multimodal"], n=2)
        report = service.evaluate()
        assert report.total_rules_checked + len(report.rules_skipped) == 6
        saved = json.loads((service.output_dir / "acceptance_report.json").read_text())
        assert saved["grade"] == report.grade


class TestSampling:
    """Test unconditional sampling from checkpoints and oracles"""

    def test_oracle_samples(self, tiny_config):
        """Test a named oracle mixture is sampled into a table"""
        config = tiny_config.model_copy(
            update={"oracle_mixtures": [MixtureSpec(name="pair", weights=[0.5, 0.5], means=[[-1.0], [1.0]], variances=[[0.1], [0.1]])]}
        )
        summary = ExperimentService(config).sample(None, 5, oracle="pair")
        _, rows = read_table(summary.output_files[0])
        assert len(rows) == 5

    def test_unknown_oracle(self, tiny_config):
        """Test an unknown oracle name is a config error"""
        with pytest.raises(ConfigError):
            ExperimentService(tiny_config).sample(None, 2, oracle="missing")

    def test_model_provider_clips_x0(self, service, trained_workspace):
        """Test trained denoisers imply x0 estimates inside the normalized range"""
        model = service.load_model(trained_workspace["multimodal"])
        x = np.full((2, model.layout.dim), 50.0)
        t = service.schedule.T
        x0 = predict_x0(x, t, service.model_provider(model)(x, t), service.schedule)
        assert np.all(np.abs(x0) <= 1.0 + 1e-9)

    def test_checkpoint_samples(self, service, trained_workspace):
        """Test samples are written as a container plus angle grids"""
        summary = service.sample(trained_workspace["multimodal"], 2, seed=0)
        assert summary.output_files[0].endswith("multimodal_samples.jfld")
        assert len(summary.output_files) == 3


@pytest.mark.slow
class TestEndToEnd:
    """Run every command on 8 x 8 fields with a denoiser trained for a few thousand steps"""

    @pytest.fixture(scope="class")
    def report_dir(self, tmp_path_factory):
        config = ExperimentConfig(
            experiment_id="e2e",
            output_dir=str(tmp_path_factory.mktemp("e2e") / "out"),
            data=DataConfig(height=8, width=8, n_grains=3, n_train=2048, n_validation=32, validation_seed=100_000),
            schedule=ScheduleConfig(T=200, beta_start=1e-4, beta_end=0.05),
            model=ModelConfig(width=256, depth=2, n_freqs=8),
            train=TrainConfig(steps=3000, batch_size=128, learning_rate=1e-3, log_every=500),
            solver=SolverConfig(particles=64, n_out_uncertainty=8),
            sweep=SweepConfig(
                fractions=[0.02, 0.1],
                sigmas=[0.0, 0.05],
                trials=4,
                uncertainty_fractions=[0.05, 1.0],
                uncertainty_seeds=5,
                consistency_samples=16,
                unimodal_widths=[256],
            ),
        )
        service = ExperimentService(config, max_workers=2)
        service.gen_data()
        multimodal = service.train("multimodal").output_files[0]
        unimodal = service.train("unimodal", width=256).output_files[0]
        service.sweep(multimodal, [unimodal])
        consistency = service.consistency(multimodal)
        service.uncertainty(multimodal)
        full = service.reconstruct(multimodal, fraction=1.0, sigma=0.0, seed=0)
        return {"service": service, "report": service.evaluate(), "consistency": consistency, "full": full}

    def test_every_rule_is_checked(self, report_dir):
        """Test each table is written so no rule is skipped"""
        report = report_dir["report"]
        assert report.rules_skipped == []
        assert report.total_rules_checked == 6

    def test_uncertainty_and_noise_trends(self, report_dir):
        """Test the spread shrinks with observations and noise never helps"""
        passed = {result.rule_id: result.passed for result in report_dir["report"].results}
        assert passed["AR006"]
        assert passed["AR004"]

    def test_full_observation_is_reproduced(self, report_dir):
        """Test observing every main pixel pins the reconstruction to the truth"""
        assert report_dir["full"].metrics["disorientation_mean"] < 1.0

    def test_generated_samples_stay_bounded(self, report_dir):
        """Test unconditional joint draws stay in the data range"""
        errors = report_dir["consistency"].errors
        assert len(errors) == 16
        assert np.all(np.isfinite(errors))
        assert np.median(errors) < 2.0
