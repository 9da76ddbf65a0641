"""
Experiment service: dataset generation, training, sampling, reconstruction
sweeps, consistency and uncertainty studies, and acceptance evaluation.

Every command is a function of the experiment config, its overrides and the
files already in the output directory, so reruns write identical tables.
"""
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple
import logging
import time

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError

from acceptance_rules import evaluate_output_dir
from config import settings
from diffusion_core import EpsProvider, NoiseSchedule, clip_denoised, make_linear_schedule, sample_unconditional
from exceptions import ArtifactNotFoundError, ConfigError, DataError, DimensionMismatchError, MultimodalDiffusionError
from field_io import config_hash, export_channel_csv, read_fields, write_fields, write_manifest, write_table
from metrics import SymmetryGroup, disorientation_map, ensemble_error_stats, mean_field_disorientation
from models import (
    AcceptanceReport,
    ConsistencyResponse,
    DatasetManifest,
    ExperimentConfig,
    MetricRow,
    ReconstructResponse,
    RunSummary,
)
from multimodal import (
    BlackBoxForward,
    JointField,
    JointLayout,
    ObservationSpec,
    build_joint_dataset,
    consistency_check,
    consistency_map,
    pixel_coordinates,
    reconstruct,
)
from score_model import DenoiserParams, dataset_sampler, load_checkpoint, model_eps_provider, save_checkpoint, train
from score_oracle import GaussianMixture, gmm_eps_provider
from synthetic_data import (
    NormalizationMap,
    PcaModel,
    build_forward,
    channels_to_orientation,
    fit_rotation_pca,
    grain_prior_sampler,
    normalize_apply,
    normalize_fit,
    normalize_invert,
    project_to_unit,
    random_entry_mask,
    random_mask,
    sample_main_fields,
)

logger = logging.getLogger(__name__)

MAIN_CHANNELS = ["cos_theta", "sin_theta"]
METRIC_HEADER = ["experiment_id", "model", "trial", "fraction", "sigma", "metric", "value"]

# independent seed streams per study
SWEEP_STREAM = 0
UNCERTAINTY_STREAM = 1
SINGLE_STREAM = 2


def load_config(path: Optional[str]) -> ExperimentConfig:
    """Read an experiment config file; no path means all defaults"""
    if path is None:
        return ExperimentConfig()
    config_path = Path(path)
    if not config_path.exists():
        raise ConfigError(f"Config file not found: {config_path}")
    try:
        return ExperimentConfig.model_validate_json(config_path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise ConfigError(f"Invalid config {config_path}: {e}") from e


def apply_overrides(config: ExperimentConfig, overrides: Dict[str, Any]) -> ExperimentConfig:
    """
    Apply dotted-key overrides (e.g. {"solver.seed": 3}) and revalidate.

    Keys whose value is None are ignored.
    """
    data = config.model_dump()
    for key, value in overrides.items():
        if value is None:
            continue
        node = data
        *parents, leaf = key.split(".")
        for parent in parents:
            if parent not in node or not isinstance(node[parent], dict):
                raise ConfigError(f"Unknown config key: {key}")
            node = node[parent]
        if leaf not in node:
            raise ConfigError(f"Unknown config key: {key}")
        node[leaf] = value
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid override: {e}") from e


class DataBundle(BaseModel):
    """A generated dataset reloaded from disk"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    manifest: DatasetManifest
    layout: JointLayout
    train: np.ndarray
    validation: np.ndarray
    normalization: NormalizationMap
    forward: BlackBoxForward


class TrialSetup(BaseModel):
    """Truth, mask and noise shared by every model in one paired trial"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    trial: int
    fraction: float
    field_index: int
    omega: np.ndarray
    y_main: np.ndarray
    y_aux_clean: np.ndarray
    aux_noise: np.ndarray
    truth_theta: np.ndarray
    solver_seed: int


class LoadedModel(BaseModel):
    """A checkpoint together with the layout of its coordinates"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    label: str
    modality: str
    params: DenoiserParams
    layout: JointLayout


class ExperimentService:
    """Runs the experiment commands against one output directory"""

    def __init__(self, config: ExperimentConfig, max_workers: Optional[int] = None):
        self.config = config
        self.output_dir = Path(config.output_dir)
        self.max_workers = max_workers or settings.max_workers
        self.schedule: NoiseSchedule = make_linear_schedule(
            config.schedule.T, config.schedule.beta_start, config.schedule.beta_end
        )
        self.group = SymmetryGroup(order=config.sweep.symmetry_order)
        self._bundle: Optional[DataBundle] = None

    # ------------------------------------------------------------------
    # paths and bookkeeping
    # ------------------------------------------------------------------

    @property
    def data_dir(self) -> Path:
        return self.output_dir / "data"

    @property
    def tables_dir(self) -> Path:
        return self.output_dir / "tables"

    def checkpoint_path(self, label: str) -> Path:
        return self.output_dir / "checkpoints" / f"{label}.ckpt"

    def echo_config(self) -> Path:
        """Write the resolved config next to the outputs"""
        self.output_dir.mkdir(parents=True, exist_ok=True)
        path = self.output_dir / "resolved_config.json"
        path.write_text(self.config.model_dump_json(indent=2) + "\n", encoding="utf-8")
        return path

    def table_metadata(self, **extra: Any) -> Dict[str, Any]:
        return {"config_hash": config_hash(self.config), "seeds": self.config.seeds(), **extra}

    def _map(self, fn, items: Sequence) -> List:
        """Order-preserving parallel map"""
        if self.max_workers <= 1 or len(items) <= 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.max_workers) as pool:
            return list(pool.map(fn, items))

    # ------------------------------------------------------------------
    # data
    # ------------------------------------------------------------------

    def gen_data(self) -> RunSummary:
        """Generate the training and validation joint datasets with their manifest"""
        try:
            self.echo_config()
            d = self.config.data
            pca: Optional[PcaModel] = None
            if d.aux_model == "rotations":
                train_main = sample_main_fields(d.height, d.width, d.n_grains, d.n_train, d.train_seed)
                pca = fit_rotation_pca(train_main, d.n_rotations, d.pca_components)
            forward = build_forward(d.aux_model, d.n_rotations, pca)

            prior = grain_prior_sampler(d.height, d.width, d.n_grains)
            train_fields = build_joint_dataset(
                prior, forward, d.n_train, d.build_noise_std, d.train_seed, max_workers=self.max_workers
            )
            validation_fields = build_joint_dataset(
                prior, forward, d.n_validation, d.build_noise_std, d.validation_seed, max_workers=self.max_workers
            )

            c_aux = forward.aux_channels
            aux_names = ["cos_2theta", "sin_2theta"] if pca is None else [f"pca_{k}" for k in range(c_aux)]
            layout = JointLayout(
                height=d.height,
                width=d.width,
                c_main=len(MAIN_CHANNELS),
                c_aux=c_aux,
                channel_names=MAIN_CHANNELS + aux_names,
            )
            stacked = np.stack([np.concatenate([f.main, f.aux], axis=-1) for f in train_fields])
            normalization = normalize_fit(stacked)

            train_path = write_fields(self.data_dir / "train.jfld", train_fields, layout)
            validation_path = write_fields(self.data_dir / "validation.jfld", validation_fields, layout)
            manifest = DatasetManifest(
                experiment_id=self.config.experiment_id,
                config_hash=config_hash(d),
                height=d.height,
                width=d.width,
                n_grains=d.n_grains,
                c_main=layout.c_main,
                c_aux=layout.c_aux,
                channel_names=layout.names(),
                n_train=d.n_train,
                n_validation=d.n_validation,
                train_seed=d.train_seed,
                validation_seed=d.validation_seed,
                aux_model=d.aux_model,
                n_rotations=d.n_rotations,
                forward_id=forward.identifier,
                build_noise_std=d.build_noise_std,
                normalization=normalization.to_dict(),
                pca=pca.to_dict() if pca is not None else None,
                files={"train": train_path.name, "validation": validation_path.name},
            )
            manifest_path = write_manifest(self.data_dir / "manifest.json", manifest)
            self._bundle = None
            logger.info(f"Generated {d.n_train} training and {d.n_validation} validation fields in {self.data_dir}")
            return RunSummary(
                command="gen-data",
                output_files=[str(manifest_path), str(train_path), str(validation_path)],
                details={"n_train": d.n_train, "n_validation": d.n_validation, "dim": layout.dim},
            )
        except MultimodalDiffusionError:
            raise
        except Exception as e:
            logger.error(f"Error generating data: {str(e)}")
            raise

    def load_data(self) -> DataBundle:
        """Reload the dataset written by gen_data, checking it matches the data config"""
        if self._bundle is not None:
            return self._bundle
        manifest_path = self.data_dir / "manifest.json"
        if not manifest_path.exists():
            raise ArtifactNotFoundError(f"No dataset at {self.data_dir}; run gen-data first")
        manifest = DatasetManifest.model_validate_json(manifest_path.read_text(encoding="utf-8"))
        if manifest.config_hash != config_hash(self.config.data):
            raise ConfigError(f"Dataset in {self.data_dir} was generated from a different data config")

        train_array, layout = read_fields(self.data_dir / manifest.files["train"])
        validation_array, _ = read_fields(self.data_dir / manifest.files["validation"])
        pca = PcaModel.from_dict(manifest.pca) if manifest.pca else None
        self._bundle = DataBundle(
            manifest=manifest,
            layout=layout,
            train=train_array,
            validation=validation_array,
            normalization=NormalizationMap.from_dict(manifest.normalization),
            forward=build_forward(manifest.aux_model, manifest.n_rotations, pca),
        )
        return self._bundle

    def _split_normalization(self, bundle: DataBundle) -> Tuple[NormalizationMap, NormalizationMap]:
        norm, c_main = bundle.normalization, bundle.layout.c_main
        main = NormalizationMap(mins=norm.mins[:c_main], maxs=norm.maxs[:c_main])
        aux = NormalizationMap(mins=norm.mins[c_main:], maxs=norm.maxs[c_main:])
        return main, aux

    def normalize_vectors(self, bundle: DataBundle, vectors: np.ndarray, invert: bool = False) -> np.ndarray:
        """Apply (or undo) the per-channel map to (n, d) joint or main-only vectors"""
        layout = bundle.layout
        vectors = np.asarray(vectors, dtype=np.float64)
        n = vectors.shape[0]
        norm_main, norm_aux = self._split_normalization(bundle)
        fn = normalize_invert if invert else normalize_apply
        main = fn(norm_main, vectors[:, : layout.main_size].reshape(n, layout.height, layout.width, layout.c_main))
        parts = [main.reshape(n, -1)]
        if vectors.shape[1] == layout.dim:
            aux = vectors[:, layout.main_size:].reshape(n, layout.height, layout.width, layout.c_aux)
            parts.append(fn(norm_aux, aux).reshape(n, -1))
        elif vectors.shape[1] != layout.main_size:
            raise DimensionMismatchError(f"vectors of dimension {vectors.shape[1]} match neither layout")
        return np.concatenate(parts, axis=1)

    # ------------------------------------------------------------------
    # training
    # ------------------------------------------------------------------

    def train(self, modality: str, width: Optional[int] = None) -> RunSummary:
        """
        Train a multimodal (joint) or unimodal (main-only) denoiser.

        Args:
            modality: "multimodal" or "unimodal"
            width: Hidden width override; hidden sizes otherwise match across modalities

        Returns:
            RunSummary naming the checkpoint and loss table
        """
        if modality not in ("multimodal", "unimodal"):
            raise ConfigError(f"modality must be multimodal or unimodal, got {modality!r}")
        try:
            self.echo_config()
            bundle = self.load_data()
            data = self.normalize_vectors(bundle, bundle.train)
            if modality == "unimodal":
                data = data[:, : bundle.layout.main_size]
            model_config = self.config.model.model_copy(update={"width": width}) if width else self.config.model
            label = "multimodal" if modality == "multimodal" else f"unimodal-w{model_config.width}"

            start = time.perf_counter()
            result = train(dataset_sampler(data), self.schedule, self.config.train, data.shape[1], model_config)
            logger.info(f"Trained {label} in {time.perf_counter() - start:.1f}s")
            if not np.isfinite(result.losses[-1]):
                raise DataError(f"{label} training ended with a non-finite loss")

            result.params.metadata.update(
                {
                    "label": label,
                    "modality": modality,
                    "layout": bundle.layout.model_dump(),
                    "data_hash": bundle.manifest.config_hash,
                }
            )
            checkpoint = save_checkpoint(result.params, self.checkpoint_path(label))
            loss_table = write_table(
                self.tables_dir / f"{label}_loss.csv",
                ["step", "loss"],
                ((step, loss) for step, loss in enumerate(result.losses, start=1)),
                self.table_metadata(model=label),
            )
            return RunSummary(
                command="train",
                output_files=[str(checkpoint), str(loss_table)],
                details={
                    "label": label,
                    "dim": data.shape[1],
                    "parameters": result.params.n_parameters,
                    "initial_loss": result.losses[0],
                    "final_loss": result.losses[-1],
                },
            )
        except MultimodalDiffusionError:
            raise
        except Exception as e:
            logger.error(f"Error training {modality} model: {str(e)}")
            raise

    def load_model(self, checkpoint: str) -> LoadedModel:
        """Load a checkpoint and check it against the current dataset"""
        path = Path(checkpoint)
        if not path.exists():
            raise ArtifactNotFoundError(f"Checkpoint not found: {path}")
        params = load_checkpoint(path)
        bundle = self.load_data()
        modality = params.metadata.get("modality", "multimodal")
        layout = bundle.layout if modality == "multimodal" else bundle.layout.main_only()
        if params.dim != layout.dim:
            raise DimensionMismatchError(
                f"Checkpoint {path} has dimension {params.dim}; the {modality} layout of this dataset needs {layout.dim}"
            )
        label = params.metadata.get("label", modality)
        return LoadedModel(label=label, modality=modality, params=params, layout=layout)

    # ------------------------------------------------------------------
    # unconditional sampling
    # ------------------------------------------------------------------

    def model_provider(self, model: LoadedModel) -> EpsProvider:
        provider = model_eps_provider(model.params)
        if self.config.solver.clip_denoised:
            provider = clip_denoised(provider, self.schedule)
        return provider

    def find_oracle(self, name: str) -> GaussianMixture:
        for spec in self.config.oracle_mixtures:
            if spec.name == name:
                return GaussianMixture.from_lists(spec.weights, spec.means, spec.variances)
        raise ConfigError(f"No oracle mixture named {name!r} in the config")

    def sample(self, checkpoint: Optional[str], n: int, seed: Optional[int] = None, oracle: Optional[str] = None) -> RunSummary:
        """Draw unconditional samples from a checkpoint or from a named oracle mixture"""
        seed = self.config.solver.seed if seed is None else seed
        self.echo_config()
        samples_dir = self.output_dir / "samples"
        if oracle is not None:
            gmm = self.find_oracle(oracle)
            draws = sample_unconditional(gmm_eps_provider(gmm, self.schedule), (n, gmm.dim), self.schedule, seed)
            table = write_table(
                samples_dir / f"oracle_{oracle}.csv",
                ["sample"] + [f"x{j}" for j in range(gmm.dim)],
                ([i] + row.tolist() for i, row in enumerate(draws)),
                self.table_metadata(oracle=oracle, sample_seed=seed),
            )
            return RunSummary(command="sample", output_files=[str(table)], details={"n": n, "oracle": oracle})

        if checkpoint is None:
            raise ConfigError("sample needs a checkpoint or an oracle name")
        model = self.load_model(checkpoint)
        bundle = self.load_data()
        draws = sample_unconditional(self.model_provider(model), (n, model.layout.dim), self.schedule, seed)
        physical = self.normalize_vectors(bundle, draws, invert=True)
        container = write_fields(samples_dir / f"{model.label}_samples.jfld", physical, model.layout)
        written = [str(container)]
        for i, vector in enumerate(physical):
            main = vector[: model.layout.main_size].reshape(model.layout.height, model.layout.width, model.layout.c_main)
            theta = np.degrees(channels_to_orientation(main))
            written += [str(p) for p in export_channel_csv(theta, samples_dir / model.label, f"sample{i:03d}", ["theta_deg"])]
        return RunSummary(command="sample", output_files=written, details={"n": n, "model": model.label})

    # ------------------------------------------------------------------
    # reconstruction
    # ------------------------------------------------------------------

    def trial_setup(self, bundle: DataBundle, trial: int, fraction: float, stream: int) -> TrialSetup:
        """Draw the truth, mask and aux noise of one trial; shared by every model"""
        d = self.config.data
        layout = bundle.layout
        pick_seq, mask_seq, noise_seq, solver_seq = np.random.SeedSequence(
            [self.config.solver.seed, stream, trial]
        ).spawn(4)
        field_index = int(np.random.default_rng(pick_seq).integers(bundle.validation.shape[0]))
        mask_seed = int(mask_seq.generate_state(1)[0])
        if d.mask_level == "pixel":
            omega = pixel_coordinates(random_mask(layout.height, layout.width, fraction, mask_seed), layout.c_main)
        else:
            omega = random_entry_mask(layout.height, layout.width, layout.c_main, fraction, mask_seed)

        raw = bundle.validation[field_index].astype(np.float64)
        truth = self.normalize_vectors(bundle, raw[None, :])[0]
        main_grid = raw[: layout.main_size].reshape(layout.height, layout.width, layout.c_main)
        return TrialSetup(
            trial=trial,
            fraction=fraction,
            field_index=field_index,
            omega=omega,
            y_main=truth[omega],
            y_aux_clean=truth[layout.main_size:].reshape(layout.height, layout.width, layout.c_aux),
            aux_noise=np.random.default_rng(noise_seq).standard_normal((layout.height, layout.width, layout.c_aux)),
            truth_theta=channels_to_orientation(main_grid),
            solver_seed=int(solver_seq.generate_state(1)[0]),
        )

    def run_trial(
        self,
        bundle: DataBundle,
        model: LoadedModel,
        setup: TrialSetup,
        sigma: float,
        n_out: Optional[int] = None,
    ) -> Tuple[List[np.ndarray], np.ndarray]:
        """
        Reconstruct one trial with one model.

        Returns:
            (angle grids of the samples, observed aux field in physical units or empty)
        """
        forward_calls = bundle.forward.evaluation_count
        if model.modality == "multimodal":
            spec = ObservationSpec(omega=setup.omega, aux_noise_std=sigma, aux_observed=True)
            y_aux = setup.y_aux_clean + sigma * setup.aux_noise
            method = "smc"
        else:
            spec = ObservationSpec(omega=setup.omega, aux_noise_std=0.0, aux_observed=False)
            y_aux = None
            method = self.config.solver.unimodal_solver
        start = time.perf_counter()
        result = reconstruct(
            setup.y_main,
            spec,
            y_aux,
            model.params,
            self.schedule,
            self.config.solver,
            setup.solver_seed,
            model.layout,
            n_out=n_out,
            method=method,
        )
        logger.debug(
            f"{model.label} trial {setup.trial} fraction {setup.fraction} sigma {sigma}: "
            f"{time.perf_counter() - start:.2f}s"
        )
        if bundle.forward.evaluation_count != forward_calls:
            raise MultimodalDiffusionError("the forward model was evaluated during reconstruction")

        norm_main, norm_aux = self._split_normalization(bundle)
        angles = [channels_to_orientation(normalize_invert(norm_main, main)) for main in result.main_fields]
        observed_aux = normalize_invert(norm_aux, y_aux) if y_aux is not None else np.zeros(0)
        return angles, observed_aux

    def reconstruct(
        self,
        checkpoint: str,
        fraction: float,
        sigma: float = 0.0,
        seed: int = 0,
        particles: Optional[int] = None,
    ) -> ReconstructResponse:
        """Reconstruct one validation field and write samples, error maps and metric rows"""
        if not 0.0 <= fraction <= 1.0:
            raise ConfigError(f"fraction must lie in [0, 1], got {fraction}")
        if sigma < 0.0:
            raise ConfigError(f"sigma must be nonnegative, got {sigma}")
        if particles is not None:
            self.config = apply_overrides(self.config, {"solver.particles": particles})
        self.echo_config()
        bundle = self.load_data()
        model = self.load_model(checkpoint)
        setup = self.trial_setup(bundle, seed, fraction, SINGLE_STREAM)
        angles, observed_aux = self.run_trial(bundle, model, setup, sigma)

        run_dir = self.output_dir / "reconstructions" / f"{model.label}_f{fraction:g}_s{sigma:g}_t{seed}"
        written = [str(p) for p in export_channel_csv(np.degrees(setup.truth_theta), run_dir, "truth", ["theta_deg"])]
        errors = []
        consistencies = []
        for i, theta in enumerate(angles):
            errors.append(mean_field_disorientation(theta, setup.truth_theta, self.group))
            written += [str(p) for p in export_channel_csv(np.degrees(theta), run_dir, f"sample{i:03d}", ["theta_deg"])]
            error_map = disorientation_map(theta, setup.truth_theta, self.group)
            written += [str(p) for p in export_channel_csv(error_map, run_dir, f"sample{i:03d}", ["disorientation_deg"])]
            if model.modality == "multimodal":
                generated = JointField(main=project_to_unit(np.stack([np.cos(theta), np.sin(theta)], axis=-1)), aux=observed_aux)
                consistencies.append(consistency_check(bundle.forward, generated))
                written += [
                    str(p)
                    for p in export_channel_csv(consistency_map(bundle.forward, generated), run_dir, f"sample{i:03d}", ["consistency"])
                ]

        metrics = {"disorientation_mean": float(np.mean(errors))}
        if consistencies:
            metrics["aux_consistency"] = float(np.mean(consistencies))
        rows = [
            MetricRow(
                experiment_id=self.config.experiment_id,
                model=model.label,
                trial=seed,
                fraction=fraction,
                sigma=sigma if model.modality == "multimodal" else 0.0,
                metric=name,
                value=value,
            )
            for name, value in metrics.items()
        ]
        table = write_table(
            run_dir / "metrics.csv",
            METRIC_HEADER,
            ([getattr(row, key) for key in METRIC_HEADER] for row in rows),
            self.table_metadata(statistic="mean", field_index=setup.field_index),
        )
        written.append(str(table))
        logger.info(
            f"Reconstructed validation field {setup.field_index} with {model.label}: "
            f"mean disorientation {metrics['disorientation_mean']:.3f} deg"
        )
        return ReconstructResponse(
            model=model.label,
            field_index=setup.field_index,
            observed_coordinates=int(setup.omega.size),
            metrics=metrics,
            output_files=written,
            success=True,
        )

    def sweep(self, multimodal_checkpoint: str, unimodal_checkpoints: Sequence[str]) -> RunSummary:
        """
        Paired comparison of the multimodal model against unimodal models.

        Every (fraction, trial) cell shares truth, mask and solver seed across
        models; the multimodal model runs once per sigma, each unimodal model once.
        """
        self.echo_config()
        bundle = self.load_data()
        multimodal = self.load_model(multimodal_checkpoint)
        if multimodal.modality != "multimodal":
            raise ConfigError(f"{multimodal_checkpoint} is not a multimodal checkpoint")
        unimodal = [self.load_model(path) for path in unimodal_checkpoints]
        for model in unimodal:
            if model.modality != "unimodal":
                raise ConfigError(f"{model.label} is not a unimodal checkpoint")
        sweep = self.config.sweep
        cells = [(fraction, trial) for fraction in sweep.fractions for trial in range(sweep.trials)]
        logger.info(f"Sweep: {len(cells)} cells, {len(unimodal)} unimodal models, sigmas {sweep.sigmas}")

        def run_cell(cell: Tuple[float, int]) -> List[MetricRow]:
            fraction, trial = cell
            setup = self.trial_setup(bundle, trial, fraction, SWEEP_STREAM)
            rows = []
            for sigma in sweep.sigmas:
                angles, _ = self.run_trial(bundle, multimodal, setup, sigma)
                rows.append(self._error_row(multimodal.label, setup, sigma, angles))
            for model in unimodal:
                angles, _ = self.run_trial(bundle, model, setup, 0.0)
                row = self._error_row(model.label, setup, 0.0, angles)
                rows += [row.model_copy(update={"sigma": sigma}) for sigma in sweep.sigmas]
            return rows

        rows = [row for cell_rows in self._map(run_cell, cells) for row in cell_rows]
        rows.sort(key=lambda r: (r.fraction, r.model, r.sigma, r.trial))
        trials_table = write_table(
            self.tables_dir / "sweep_trials.csv",
            METRIC_HEADER,
            ([getattr(row, key) for key in METRIC_HEADER] for row in rows),
            self.table_metadata(statistic="mean"),
        )
        curve = self._aggregate(rows)
        curve_table = write_table(
            self.tables_dir / "sweep_curve.csv",
            ["fraction", "model", "sigma", "mean", "std", "n"],
            curve,
            self.table_metadata(statistic="mean"),
        )
        return RunSummary(
            command="sweep",
            output_files=[str(trials_table), str(curve_table)],
            details={"rows": len(rows), "curve_rows": len(curve)},
        )

    def _error_row(self, label: str, setup: TrialSetup, sigma: float, angles: List[np.ndarray]) -> MetricRow:
        value = float(np.mean([mean_field_disorientation(theta, setup.truth_theta, self.group) for theta in angles]))
        return MetricRow(
            experiment_id=self.config.experiment_id,
            model=label,
            trial=setup.trial,
            fraction=setup.fraction,
            sigma=sigma,
            metric="disorientation_mean",
            value=value,
        )

    @staticmethod
    def _aggregate(rows: List[MetricRow]) -> List[list]:
        groups: Dict[Tuple[float, str, float], List[float]] = {}
        for row in rows:
            groups.setdefault((row.fraction, row.model, row.sigma), []).append(row.value)
        curve = []
        for (fraction, model, sigma), values in sorted(groups.items()):
            std = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
            curve.append([fraction, model, sigma, float(np.mean(values)), std, len(values)])
        return curve

    # ------------------------------------------------------------------
    # consistency and uncertainty
    # ------------------------------------------------------------------

    def consistency(self, checkpoint: str, n: Optional[int] = None, seed: Optional[int] = None) -> ConsistencyResponse:
        """Relative l2 error between f(generated main) and generated aux over n unconditional samples"""
        n = self.config.sweep.consistency_samples if n is None else n
        seed = self.config.solver.seed if seed is None else seed
        if n < 0:
            raise ConfigError(f"n must be nonnegative, got {n}")
        self.echo_config()
        bundle = self.load_data()
        model = self.load_model(checkpoint)
        if model.modality != "multimodal":
            raise ConfigError("the consistency check needs a multimodal checkpoint")

        errors: List[float] = []
        if n > 0:
            draws = sample_unconditional(self.model_provider(model), (n, model.layout.dim), self.schedule, seed)
            physical = self.normalize_vectors(bundle, draws, invert=True)
            for vector in physical:
                field = JointField.from_flat(vector, model.layout)
                generated = JointField(main=project_to_unit(field.main), aux=field.aux)
                errors.append(consistency_check(bundle.forward, generated))
        table = write_table(
            self.tables_dir / "consistency.csv",
            ["sample", "relative_l2"],
            ([i, error] for i, error in enumerate(errors)),
            self.table_metadata(sample_seed=seed, model=model.label),
        )
        median = float(np.median(errors)) if errors else None
        threshold = self.config.sweep.consistency_threshold
        if median is not None:
            logger.info(f"Consistency over {n} samples: median relative l2 {median:.4f} (threshold {threshold})")
        return ConsistencyResponse(
            errors=errors,
            median=median,
            threshold=threshold,
            success=median is None or median < threshold,
            output_file=str(table),
        )

    def uncertainty(
        self,
        checkpoint: str,
        fractions: Optional[Sequence[float]] = None,
        n_out: Optional[int] = None,
    ) -> RunSummary:
        """Spread of reconstruction error across n_out posterior samples of one observation"""
        fractions = sorted(fractions) if fractions else self.config.sweep.uncertainty_fractions
        n_out = self.config.solver.n_out_uncertainty if n_out is None else n_out
        if n_out < 2:
            raise ConfigError(f"the uncertainty study needs n_out >= 2, got {n_out}")
        if n_out > self.config.solver.particles:
            raise ConfigError(f"n_out {n_out} exceeds the particle count {self.config.solver.particles}")
        self.echo_config()
        bundle = self.load_data()
        model = self.load_model(checkpoint)
        cells = [(seed, fraction) for seed in range(self.config.sweep.uncertainty_seeds) for fraction in fractions]

        def run_cell(cell: Tuple[int, float]) -> list:
            obs_seed, fraction = cell
            setup = self.trial_setup(bundle, obs_seed, fraction, UNCERTAINTY_STREAM)
            angles, _ = self.run_trial(bundle, model, setup, 0.0, n_out=n_out)
            stats = ensemble_error_stats(angles, setup.truth_theta, self.group)
            return [obs_seed, fraction, stats.mean_error, stats.std_error, float(np.mean(stats.pixel_std))]

        rows = self._map(run_cell, cells)
        table = write_table(
            self.tables_dir / "uncertainty.csv",
            ["observation_seed", "fraction", "mean_error", "std_error", "mean_pixel_std"],
            rows,
            self.table_metadata(model=model.label, n_out=n_out),
        )
        return RunSummary(command="uncertainty", output_files=[str(table)], details={"rows": len(rows), "n_out": n_out})

    # ------------------------------------------------------------------
    # acceptance
    # ------------------------------------------------------------------

    def evaluate(self, output_dir: Optional[str] = None) -> AcceptanceReport:
        """Evaluate the acceptance rules over the tables of an output directory"""
        directory = Path(output_dir) if output_dir else self.output_dir
        report = evaluate_output_dir(directory, self.config.sweep)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "acceptance_report.json").write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
        logger.info(f"Acceptance: {report.rules_passed}/{report.total_rules_checked} rules passed, grade {report.grade}")
        return report
