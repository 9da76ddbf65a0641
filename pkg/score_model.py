"""
Trainable eps-prediction network with manual reverse-mode gradients, an
adaptive-moment optimizer, and a binary checkpoint format.

Architecture (all layers dense, SiLU after every layer but the last):
    [x_t, emb(t)] -> W   (input layer, d + 2F inputs)
    W -> W               (depth hidden layers)
    W -> d               (output layer)
where emb(t) = [sin(t * w_k), cos(t * w_k)] for F geometrically spaced w_k.
"""
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Tuple, Union
import json
import logging
import queue
import struct
import threading

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import expit

from diffusion_core import EpsProvider, NoiseSchedule
from exceptions import (
    CheckpointFormatError,
    CheckpointHeaderMismatchError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    DimensionMismatchError,
    NonFiniteLossError,
    TrainingDivergenceError,
)
from models import ModelConfig, TrainConfig

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"MMDP"
CHECKPOINT_VERSION = 1
# magic, version, d, depth, width, n_freqs, float count, metadata length
_HEADER = struct.Struct("<4sIIIIIQI")

# sampler(rng, batch_size) -> (batch_size, d) array of clean samples
DatasetSampler = Callable[[np.random.Generator, int], np.ndarray]


class DenoiserParams(BaseModel):
    """Weights of the eps-network plus the hyperparameters that shape them"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    dim: int = Field(..., ge=1, description="Flattened field dimension d")
    depth: int = Field(..., ge=0, description="Hidden W x W layers")
    width: int = Field(..., ge=1, description="Hidden width W")
    n_freqs: int = Field(..., ge=1, description="Time-embedding frequencies F")
    weights: List[np.ndarray] = Field(..., description="Weight matrices, input to output, shape (in, out)")
    biases: List[np.ndarray] = Field(..., description="Bias vectors, input to output")
    metadata: Dict[str, Any] = Field(default_factory=dict, description="Provenance: train config, schedule, modality")

    @model_validator(mode="after")
    def _check_shapes(self) -> "DenoiserParams":
        shapes = layer_shapes(self.dim, self.depth, self.width, self.n_freqs)
        if len(self.weights) != len(shapes) or len(self.biases) != len(shapes):
            raise ValueError(f"expected {len(shapes)} layers")
        for index, (n_in, n_out) in enumerate(shapes):
            if self.weights[index].shape != (n_in, n_out):
                raise ValueError(f"layer {index} weight shape {self.weights[index].shape} != {(n_in, n_out)}")
            if self.biases[index].shape != (n_out,):
                raise ValueError(f"layer {index} bias shape {self.biases[index].shape} != {(n_out,)}")
        for array in self.weights + self.biases:
            if not np.all(np.isfinite(array)):
                raise ValueError("parameters must be finite")
        return self

    @property
    def n_parameters(self) -> int:
        return int(sum(w.size + b.size for w, b in zip(self.weights, self.biases)))

    def arrays(self) -> List[np.ndarray]:
        """Parameter arrays in checkpoint order: W_0, b_0, W_1, b_1, ..."""
        ordered = []
        for w, b in zip(self.weights, self.biases):
            ordered.extend([w, b])
        return ordered

    def flatten(self) -> np.ndarray:
        return np.concatenate([array.ravel() for array in self.arrays()])

    def with_arrays(self, arrays: List[np.ndarray]) -> "DenoiserParams":
        return DenoiserParams(
            dim=self.dim,
            depth=self.depth,
            width=self.width,
            n_freqs=self.n_freqs,
            weights=list(arrays[0::2]),
            biases=list(arrays[1::2]),
            metadata=dict(self.metadata),
        )

    def with_flat(self, flat: np.ndarray) -> "DenoiserParams":
        arrays, offset = [], 0
        for array in self.arrays():
            arrays.append(np.asarray(flat[offset:offset + array.size], dtype=array.dtype).reshape(array.shape))
            offset += array.size
        return self.with_arrays(arrays)

    def astype(self, dtype) -> "DenoiserParams":
        return self.with_arrays([array.astype(dtype, copy=False) for array in self.arrays()])


def layer_shapes(dim: int, depth: int, width: int, n_freqs: int) -> List[Tuple[int, int]]:
    shapes = [(dim + 2 * n_freqs, width)]
    shapes.extend([(width, width)] * depth)
    shapes.append((width, dim))
    return shapes


def parameter_count(dim: int, depth: int, width: int, n_freqs: int) -> int:
    return sum(n_in * n_out + n_out for n_in, n_out in layer_shapes(dim, depth, width, n_freqs))


def init_params(
    dim: int,
    model: ModelConfig,
    seed: int,
    dtype=np.float32,
) -> DenoiserParams:
    """Scaled-normal weights (variance 1/fan_in), zero biases"""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in layer_shapes(dim, model.depth, model.width, model.n_freqs):
        weights.append((rng.standard_normal((n_in, n_out)) / np.sqrt(n_in)).astype(dtype))
        biases.append(np.zeros(n_out, dtype=dtype))
    return DenoiserParams(
        dim=dim,
        depth=model.depth,
        width=model.width,
        n_freqs=model.n_freqs,
        weights=weights,
        biases=biases,
    )


def time_embedding(t: np.ndarray, n_freqs: int) -> np.ndarray:
    """Sinusoidal features [sin(t w_k), cos(t w_k)], w_k = 10000^(-k/F)"""
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    freqs = np.exp(-np.log(10000.0) * np.arange(n_freqs) / n_freqs)
    angles = t * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def _silu(a: np.ndarray) -> np.ndarray:
    return a * expit(a)


def _silu_grad(a: np.ndarray) -> np.ndarray:
    s = expit(a)
    return s * (1.0 + a * (1.0 - s))


def _prepare_inputs(params: DenoiserParams, x_t: np.ndarray, t) -> Tuple[np.ndarray, np.ndarray, bool]:
    x_t = np.asarray(x_t, dtype=np.float64)
    single = x_t.ndim == 1
    batch = x_t[None, :] if single else x_t
    if batch.ndim != 2 or batch.shape[1] != params.dim:
        raise DimensionMismatchError(f"input of shape {x_t.shape} does not match model dimension {params.dim}")
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (batch.shape[0],))
    return batch, t_arr, single


def _forward(params: DenoiserParams, batch: np.ndarray, t_arr: np.ndarray):
    """Forward pass keeping the pre-activations and layer inputs for backprop"""
    h = np.concatenate([batch, time_embedding(t_arr, params.n_freqs)], axis=1)
    inputs, pre_acts = [], []
    last = len(params.weights) - 1
    for index, (w, b) in enumerate(zip(params.weights, params.biases)):
        inputs.append(h)
        a = h @ w.astype(np.float64, copy=False) + b.astype(np.float64, copy=False)
        if index == last:
            return a, inputs, pre_acts
        pre_acts.append(a)
        h = _silu(a)


def predict_eps(params: DenoiserParams, x_t: np.ndarray, t) -> np.ndarray:
    """
    Deterministic forward pass.

    Args:
        params: Network weights
        x_t: Noised input, shape (d,) or (n, d)
        t: Timestep, scalar or one per row

    Returns:
        Predicted noise with the shape of x_t
    """
    batch, t_arr, single = _prepare_inputs(params, x_t, t)
    out, _, _ = _forward(params, batch, t_arr)
    return out[0] if single else out


def model_eps_provider(params: DenoiserParams) -> EpsProvider:
    """Bind a network to the provider interface used by the samplers"""
    params64 = params.astype(np.float64)

    def provider(x: np.ndarray, t: int) -> np.ndarray:
        return predict_eps(params64, x, t)

    return provider


def _backward(params: DenoiserParams, grad_out: np.ndarray, inputs, pre_acts) -> DenoiserParams:
    n_layers = len(params.weights)
    grad_w: List[np.ndarray] = [None] * n_layers
    grad_b: List[np.ndarray] = [None] * n_layers
    delta = grad_out
    for index in range(n_layers - 1, -1, -1):
        grad_w[index] = inputs[index].T @ delta
        grad_b[index] = delta.sum(axis=0)
        if index > 0:
            delta = (delta @ params.weights[index].astype(np.float64, copy=False).T) * _silu_grad(pre_acts[index - 1])
    arrays = []
    for w, b in zip(grad_w, grad_b):
        arrays.extend([w, b])
    return params.with_arrays(arrays)


def loss_and_grad_on_targets(
    params: DenoiserParams,
    x_t: np.ndarray,
    t: np.ndarray,
    target: np.ndarray,
) -> Tuple[float, DenoiserParams]:
    """Mean squared error of the network against explicit targets, with its gradient"""
    batch, t_arr, _ = _prepare_inputs(params, x_t, t)
    target = np.asarray(target, dtype=np.float64).reshape(batch.shape)
    if batch.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    out, inputs, pre_acts = _forward(params, batch, t_arr)
    residual = out - target
    per_sample = np.mean(residual ** 2, axis=1)
    bad = np.flatnonzero(~np.isfinite(per_sample))
    if bad.size:
        raise NonFiniteLossError(int(bad[0]))
    loss = float(per_sample.mean())
    grad_out = 2.0 * residual / residual.size
    return loss, _backward(params, grad_out, inputs, pre_acts)


def loss_and_grad(
    params: DenoiserParams,
    x0: np.ndarray,
    t: np.ndarray,
    z: np.ndarray,
    schedule: NoiseSchedule,
) -> Tuple[float, DenoiserParams]:
    """
    Simple denoising objective mean ||z - eps(sqrt(ab_t) x0 + sqrt(1 - ab_t) z, t)||^2.

    Args:
        params: Network weights
        x0: Clean batch, shape (n, d)
        t: Timesteps in [1, T], shape (n,)
        z: Noise batch, shape (n, d)
        schedule: Noise schedule

    Returns:
        Tuple of (loss averaged over batch and coordinates, gradient shaped like params)
    """
    x0 = np.asarray(x0, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    t = np.asarray(t, dtype=np.int64)
    if x0.shape != z.shape:
        raise DimensionMismatchError(f"x0 shape {x0.shape} does not match noise shape {z.shape}")
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ValueError(f"timesteps must lie in [1, {schedule.T}]")
    ab = schedule.alpha_bars[t - 1][:, None]
    x_t = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * z
    return loss_and_grad_on_targets(params, x_t, t, z)


class AdamOptimizer:
    """Adaptive moments with bias correction over a list of float64 arrays"""

    def __init__(self, shapes: List[Tuple[int, ...]], config: TrainConfig):
        self.config = config
        self.step_count = 0
        self.m = [np.zeros(shape) for shape in shapes]
        self.v = [np.zeros(shape) for shape in shapes]

    def step(self, arrays: List[np.ndarray], grads: List[np.ndarray]) -> None:
        cfg = self.config
        self.step_count += 1
        correction1 = 1.0 - cfg.beta1 ** self.step_count
        correction2 = 1.0 - cfg.beta2 ** self.step_count
        for array, grad, m, v in zip(arrays, grads, self.m, self.v):
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * grad
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * grad ** 2
            array -= cfg.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + cfg.adam_eps)


def clip_by_global_norm(grads: List[np.ndarray], max_norm: float) -> float:
    """Scale grads in place so their joint norm is at most max_norm; returns the norm before clipping"""
    norm = float(np.sqrt(sum(float(np.sum(g ** 2)) for g in grads)))
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


class BatchPrefetcher:
    """Assembles (x0, t, z) batches on a background thread and hands them over through a queue"""

    _DONE = object()

    def __init__(
        self,
        sampler: DatasetSampler,
        schedule: NoiseSchedule,
        config: TrainConfig,
        seed_sequence: np.random.SeedSequence,
    ):
        self._sampler = sampler
        self._schedule = schedule
        self._config = config
        self._rng = np.random.default_rng(seed_sequence)
        self._queue: "queue.Queue" = queue.Queue(maxsize=config.prefetch)
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._produce, name="batch-prefetch", daemon=True)

    def __enter__(self) -> "BatchPrefetcher":
        self._thread.start()
        return self

    def __exit__(self, *exc_info) -> None:
        self._stop.set()
        while self._thread.is_alive():
            try:
                self._queue.get(timeout=0.05)
            except queue.Empty:
                pass
        self._thread.join()

    def _put(self, item) -> bool:
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.05)
                return True
            except queue.Full:
                continue
        return False

    def _produce(self) -> None:
        try:
            for _ in range(self._config.steps):
                x0 = np.asarray(self._sampler(self._rng, self._config.batch_size), dtype=np.float64)
                t = self._rng.integers(1, self._schedule.T + 1, size=x0.shape[0])
                z = self._rng.standard_normal(x0.shape)
                if not self._put((x0, t, z)):
                    return
        except Exception as e:  # handed to the consumer
            self._put(e)
            return
        self._put(self._DONE)

    def __iter__(self):
        while True:
            item = self._queue.get()
            if item is self._DONE:
                return
            if isinstance(item, Exception):
                raise item
            yield item


class TrainResult(BaseModel):
    """Trained weights and the per-step loss trace"""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    params: DenoiserParams
    losses: List[float] = Field(default_factory=list)


def train(
    sampler: DatasetSampler,
    schedule: NoiseSchedule,
    config: TrainConfig,
    dim: int,
    model: Optional[ModelConfig] = None,
    initial: Optional[DenoiserParams] = None,
) -> TrainResult:
    """
    Fit the eps-network by denoising score matching.

    Args:
        sampler: Callable (rng, batch_size) -> clean batch of shape (batch_size, dim)
        schedule: Noise schedule; timesteps are drawn uniformly from [1, T]
        config: Optimizer and loop settings
        dim: Flattened sample dimension
        model: Architecture, used when no initial params are given
        initial: Starting weights (otherwise seeded initialization)

    Returns:
        TrainResult with float32 weights and the loss of every step
    """
    init_seq, batch_seq = np.random.SeedSequence(config.seed).spawn(2)
    if initial is None:
        model = model or ModelConfig()
        initial = init_params(dim, model, seed=int(init_seq.generate_state(1)[0]))
    elif initial.dim != dim:
        raise DimensionMismatchError(f"initial params have dimension {initial.dim}, data has {dim}")

    params = initial.astype(np.float64)
    arrays = [array.copy() for array in params.arrays()]
    params = params.with_arrays(arrays)
    optimizer = AdamOptimizer([array.shape for array in arrays], config)
    losses: List[float] = []

    logger.info(
        f"Training eps-network: d={dim}, depth={params.depth}, width={params.width}, "
        f"{params.n_parameters} parameters, {config.steps} steps, batch {config.batch_size}"
    )
    with BatchPrefetcher(sampler, schedule, config, batch_seq) as batches:
        for step, (x0, t, z) in enumerate(batches, start=1):
            if x0.shape[1] != dim:
                raise DimensionMismatchError(f"sampler produced dimension {x0.shape[1]}, expected {dim}")
            loss, grad = loss_and_grad(params, x0, t, z, schedule)
            if loss > config.divergence_threshold:
                logger.error(f"Loss {loss:.3e} exceeded {config.divergence_threshold:.1e} at step {step}")
                raise TrainingDivergenceError(
                    f"Training diverged at step {step}: loss {loss:.3e} > {config.divergence_threshold:.1e}; "
                    f"lower the learning rate or the gradient clip"
                )
            grads = grad.arrays()
            clip_by_global_norm(grads, config.grad_clip)
            optimizer.step(arrays, grads)
            losses.append(loss)
            if step % config.log_every == 0 or step == config.steps:
                logger.info(f"step {step}/{config.steps} loss {loss:.5f}")

    trained = params.astype(np.float32)
    trained.metadata.update({"train": config.model_dump(), "schedule": schedule.describe()})
    return TrainResult(params=trained, losses=losses)


def dataset_sampler(data: np.ndarray) -> DatasetSampler:
    """Uniform sampling with replacement from the rows of a fixed dataset"""
    data = np.asarray(data, dtype=np.float64)

    def sample(rng: np.random.Generator, batch_size: int) -> np.ndarray:
        return data[rng.integers(0, data.shape[0], size=batch_size)]

    return sample


def save_checkpoint(params: DenoiserParams, path: Union[str, Path]) -> Path:
    """
    Write weights in the binary checkpoint layout.

    Layout: magic b"MMDP", u32 version, u32 d, depth, width, n_freqs, u64 float
    count, u32 metadata length, UTF-8 JSON metadata, then little-endian float32
    values of W_0, b_0, W_1, b_1, ... with weights in row-major (in, out) order.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = json.dumps(params.metadata, sort_keys=True).encode("utf-8")
    flat = params.flatten().astype("<f4")
    header = _HEADER.pack(
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        params.dim,
        params.depth,
        params.width,
        params.n_freqs,
        flat.size,
        len(meta),
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(meta)
        f.write(flat.tobytes())
    logger.info(f"Saved checkpoint ({params.n_parameters} parameters) to: {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> DenoiserParams:
    """Read a checkpoint written by save_checkpoint; each corruption mode has its own error"""
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path} is not a checkpoint (bad magic bytes)")
    if len(raw) < _HEADER.size:
        raise CheckpointTruncatedError(f"{path} ends inside the header")
    _, version, dim, depth, width, n_freqs, n_floats, meta_len = _HEADER.unpack_from(raw)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path} has format version {version}, expected {CHECKPOINT_VERSION}")
    expected = parameter_count(dim, depth, width, n_freqs)
    if n_floats != expected:
        raise CheckpointHeaderMismatchError(
            f"{path} declares {n_floats} floats but its architecture needs {expected}"
        )
    meta_end = _HEADER.size + meta_len
    if len(raw) < meta_end:
        raise CheckpointTruncatedError(f"{path} ends inside the metadata block")
    try:
        metadata = json.loads(raw[_HEADER.size:meta_end].decode("utf-8")) if meta_len else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointFormatError(f"{path} has unreadable metadata: {e}")
    payload = raw[meta_end:]
    if len(payload) < 4 * n_floats:
        raise CheckpointTruncatedError(
            f"{path} holds {len(payload) // 4} floats, header requires {n_floats}"
        )
    if len(payload) > 4 * n_floats:
        raise CheckpointHeaderMismatchError(f"{path} has {len(payload) - 4 * n_floats} trailing bytes")

    flat = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    arrays, offset = [], 0
    for n_in, n_out in layer_shapes(dim, depth, width, n_freqs):
        arrays.append(flat[offset:offset + n_in * n_out].reshape(n_in, n_out))
        offset += n_in * n_out
        arrays.append(flat[offset:offset + n_out].copy())
        offset += n_out
    return DenoiserParams(
        dim=dim,
        depth=depth,
        width=width,
        n_freqs=n_freqs,
        weights=arrays[0::2],
        biases=arrays[1::2],
        metadata=metadata,
    )
