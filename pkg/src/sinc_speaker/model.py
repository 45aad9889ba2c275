"""Sinc-filterbank embedding trunk.

The trunk maps a batch of raw waveform chunks to embeddings:

    sinc conv -> (max pool, layer norm, leaky relu)
    [conv -> (max pool, layer norm, leaky relu)] * len(conv_layers)
    [fc -> (layer norm, leaky relu)] * (len(fc_layers) + 1)

The last fully connected block has width ``embedding_dim``; its output is the
embedding. The classification layer lives in the loss head (``head.weight``,
``head.bias``), which ``losses`` owns.
"""

from dataclasses import dataclass, field, fields
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from . import numeric, sinc
from .errors import ConfigError, ShapeError
from .losses import CurriculumState, LossConfig

AMPLITUDE_FLOOR = 1e-12

WEIGHT_GROUPS = ("sinc cutoffs", "conv kernels", "layer norms", "fully connected", "loss head")


@dataclass
class ModelConfig:
    """Architecture of the embedding trunk."""

    sample_rate: int = 16000
    chunk_len: int = 3200
    sinc_filters: int = 80
    sinc_kernel_len: int = 251
    sinc_stride: int = 1
    sinc_pool: int = 3
    f_min: float = 30.0
    f_max: float = 0.0  # 0 means Nyquist
    min_low_hz: float = sinc.DEFAULT_MIN_LOW_HZ
    window: bool = True
    conv_layers: List[Tuple[int, int, int]] = field(default_factory=lambda: [(60, 5, 3), (60, 5, 3)])
    fc_layers: List[int] = field(default_factory=lambda: [2048, 2048])
    embedding_dim: int = 2048
    leaky_slope: float = 0.2
    layer_norm_eps: float = 1e-6

    def __post_init__(self):
        self.conv_layers = [tuple(int(v) for v in layer) for layer in self.conv_layers]
        self.fc_layers = [int(v) for v in self.fc_layers]

    @property
    def f_max_hz(self) -> float:
        return self.f_max if self.f_max > 0 else self.sample_rate / 2.0

    @property
    def sinc_min_low_hz(self) -> float:
        return sinc.init_floor_hz(self.min_low_hz, self.f_min)

    def validate(self) -> None:
        """Check invariants and that every layer has a positive output length.

        Raises:
            ConfigError: If the architecture cannot be built.
        """
        if self.embedding_dim < 2:
            raise ConfigError(f"embedding_dim must be >= 2, got {self.embedding_dim}")
        if self.chunk_len < self.sinc_kernel_len:
            raise ConfigError(
                f"chunk_len ({self.chunk_len}) must be >= sinc kernel_len ({self.sinc_kernel_len})"
            )
        if not 0.0 < self.leaky_slope < 1.0:
            raise ConfigError(f"leaky_slope must lie in (0, 1), got {self.leaky_slope}")
        if self.sinc_kernel_len % 2 == 0:
            raise ConfigError(f"sinc kernel_len must be odd, got {self.sinc_kernel_len}")
        if any(v < 1 for v in self.fc_layers) or any(v < 1 for layer in self.conv_layers for v in layer):
            raise ConfigError("layer sizes must be positive")
        self.layer_shapes()

    def layer_shapes(self) -> List[Tuple[str, int, int]]:
        """(name, channels, length) of every convolutional block output."""
        shapes = []
        length = numeric.conv_output_length(self.chunk_len, self.sinc_kernel_len, self.sinc_stride)
        length //= self.sinc_pool
        channels = self.sinc_filters
        shapes.append(("sinc", channels, length))
        for i, (filters, kernel_len, pool) in enumerate(self.conv_layers):
            length = numeric.conv_output_length(length, kernel_len) // pool
            channels = filters
            shapes.append((f"conv{i}", channels, length))
            if length < 1:
                break
        for name, _, length in shapes:
            if length < 1:
                raise ConfigError(f"layer '{name}' has no output samples for chunk_len {self.chunk_len}")
        return shapes

    def to_scalars(self) -> Dict[str, Any]:
        """Flat name -> scalar/list mapping used by checkpoints."""
        scalars = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "conv_layers":
                scalars["conv_filters"] = [layer[0] for layer in value]
                scalars["conv_kernels"] = [layer[1] for layer in value]
                scalars["conv_pools"] = [layer[2] for layer in value]
            else:
                scalars[f.name] = value
        return scalars

    @classmethod
    def from_scalars(cls, scalars: Dict[str, Any]) -> "ModelConfig":
        values = dict(scalars)
        conv = list(zip(values.pop("conv_filters"), values.pop("conv_kernels"), values.pop("conv_pools")))
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown model config fields: {sorted(unknown)}")
        return cls(conv_layers=conv, **values)


class ModelWeights:
    """All trainable arrays of the trunk and the loss head, keyed by name.

    The weights also carry what a checkpoint must restore: the class count,
    the curriculum state, the loss configuration and the speaker ordering.
    """

    def __init__(
        self,
        config: ModelConfig,
        class_count: int,
        arrays: Dict[str, np.ndarray],
        curriculum: Optional[CurriculumState] = None,
        loss_config: Optional[LossConfig] = None,
        speakers: Optional[List[str]] = None,
    ):
        self.config = config
        self.class_count = class_count
        self.arrays = arrays
        self.curriculum = curriculum or CurriculumState()
        self.loss_config = loss_config or LossConfig()
        self.speakers = list(speakers or [])

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def names(self) -> List[str]:
        return list(self.arrays)

    @property
    def head_weight(self) -> np.ndarray:
        return self.arrays["head.weight"]

    @property
    def head_bias(self) -> np.ndarray:
        return self.arrays["head.bias"]

    def sinc_params(self) -> sinc.SincFilterParams:
        cfg = self.config
        return sinc.SincFilterParams(
            f_low=self.arrays["sinc.f_low"],
            band=self.arrays["sinc.band"],
            kernel_len=cfg.sinc_kernel_len,
            sample_rate=cfg.sample_rate,
            min_low_hz=cfg.sinc_min_low_hz,
            window=cfg.window,
        )

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            self.config,
            self.class_count,
            {name: arr.copy() for name, arr in self.arrays.items()},
            CurriculumState(self.curriculum.t, self.curriculum.batch_index),
            self.loss_config,
            self.speakers,
        )


def weight_group(name: str) -> str:
    """Group label used by gradient checks and reports."""
    if name in ("sinc.f_low", "sinc.band"):
        return "sinc cutoffs"
    if name.endswith(".kernel"):
        return "conv kernels"
    if ".norm." in name:
        return "layer norms"
    if name.startswith("fc"):
        return "fully connected"
    if name.startswith("head."):
        return "loss head"
    raise KeyError(name)


def _fan_in_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_model(
    config: ModelConfig,
    class_count: int,
    seed: int,
    loss_config: Optional[LossConfig] = None,
    speakers: Optional[List[str]] = None,
) -> ModelWeights:
    """Deterministic initialization.

    Sinc cutoffs are mel-spaced, convolution and fully connected weights are
    fan-in scaled uniform, head rows are Gaussian and then L2-normalized.

    Raises:
        ConfigError: If the config is invalid or class_count < 2.
    """
    config.validate()
    if class_count < 2:
        raise ConfigError(f"class_count must be >= 2, got {class_count}")
    rng = np.random.default_rng(seed)
    arrays: Dict[str, np.ndarray] = {}

    params = sinc.mel_init(
        config.sinc_filters,
        config.sample_rate,
        config.f_min,
        config.f_max_hz,
        kernel_len=config.sinc_kernel_len,
        min_low_hz=config.min_low_hz,
        window=config.window,
    )
    arrays["sinc.f_low"] = params.f_low
    arrays["sinc.band"] = params.band

    shapes = config.layer_shapes()
    _, channels, length = shapes[0]
    arrays["sinc.norm.gain"] = np.ones(channels * length)
    arrays["sinc.norm.bias"] = np.zeros(channels * length)
    for i, (filters, kernel_len, _) in enumerate(config.conv_layers):
        arrays[f"conv{i}.kernel"] = _fan_in_uniform(
            rng, (filters, channels, kernel_len), channels * kernel_len
        )
        _, channels, length = shapes[i + 1]
        arrays[f"conv{i}.norm.gain"] = np.ones(channels * length)
        arrays[f"conv{i}.norm.bias"] = np.zeros(channels * length)

    width = channels * length
    for i, out_width in enumerate(config.fc_layers + [config.embedding_dim]):
        arrays[f"fc{i}.weight"] = _fan_in_uniform(rng, (out_width, width), width)
        arrays[f"fc{i}.bias"] = np.zeros(out_width)
        arrays[f"fc{i}.norm.gain"] = np.ones(out_width)
        arrays[f"fc{i}.norm.bias"] = np.zeros(out_width)
        width = out_width

    head = rng.standard_normal((class_count, config.embedding_dim))
    arrays["head.weight"] = numeric.l2_normalize(head)
    arrays["head.bias"] = np.zeros(class_count)

    return ModelWeights(config, class_count, arrays, loss_config=loss_config, speakers=speakers)


def normalize_amplitude(chunks: np.ndarray) -> np.ndarray:
    """Scale each chunk to unit maximum absolute amplitude (silent chunks stay zero)."""
    peak = np.max(np.abs(chunks), axis=-1, keepdims=True)
    return chunks / np.maximum(peak, AMPLITUDE_FLOOR)


def _norm_act_forward(weights: ModelWeights, name: str, z: np.ndarray, record: Dict[str, Any]) -> np.ndarray:
    cfg = weights.config
    shape = z.shape
    flat = z.reshape(shape[0], -1)
    normed, ln_cache = numeric.layer_norm(
        flat, weights[f"{name}.norm.gain"], weights[f"{name}.norm.bias"], cfg.layer_norm_eps
    )
    record["ln_cache"] = ln_cache
    record["normed"] = normed
    record["shape"] = shape
    return numeric.leaky_relu(normed, cfg.leaky_slope).reshape(shape)


def _norm_act_backward(
    weights: ModelWeights, name: str, grad: np.ndarray, record: Dict[str, Any], grads: Dict[str, np.ndarray]
) -> np.ndarray:
    shape = record["shape"]
    grad = grad.reshape(shape[0], -1)
    grad = numeric.leaky_relu_backward(grad, record["normed"], weights.config.leaky_slope)
    grad, grads[f"{name}.norm.gain"], grads[f"{name}.norm.bias"] = numeric.layer_norm_backward(
        grad, record["ln_cache"], weights[f"{name}.norm.gain"]
    )
    return grad.reshape(shape)


def forward_embed(weights: ModelWeights, chunks: np.ndarray) -> Tuple[np.ndarray, List[Dict[str, Any]]]:
    """Embeddings plus the cache that ``backward_embed`` needs.

    Raises:
        ShapeError: If chunks are not [batch, chunk_len].
    """
    cfg = weights.config
    chunks = numeric.as_tensor(chunks, "chunks")
    if chunks.ndim != 2 or chunks.shape[1] != cfg.chunk_len:
        raise ShapeError(f"expected chunks of shape [batch, {cfg.chunk_len}], got {chunks.shape}")
    batch = chunks.shape[0]
    x = normalize_amplitude(chunks)
    cache: List[Dict[str, Any]] = []

    record: Dict[str, Any] = {"name": "sinc", "input": x}
    z = sinc.sinc_forward(weights.sinc_params(), x, cfg.sinc_stride)
    record["pre_pool_len"] = z.shape[-1]
    z, record["pool_idx"] = numeric.max_pool1d(z, cfg.sinc_pool)
    h = _norm_act_forward(weights, "sinc", z, record)
    cache.append(record)

    for i, (_, _, pool) in enumerate(cfg.conv_layers):
        name = f"conv{i}"
        record = {"name": name, "input": h}
        z = numeric.conv1d(h, weights[f"{name}.kernel"])
        record["pre_pool_len"] = z.shape[-1]
        z, record["pool_idx"] = numeric.max_pool1d(z, pool)
        h = _norm_act_forward(weights, name, z, record)
        cache.append(record)

    h = h.reshape(batch, -1)
    for i in range(len(cfg.fc_layers) + 1):
        name = f"fc{i}"
        record = {"name": name, "input": h}
        z = numeric.linear(h, weights[f"{name}.weight"], weights[f"{name}.bias"])
        h = _norm_act_forward(weights, name, z, record)
        cache.append(record)

    return h, cache


def backward_embed(
    weights: ModelWeights, cache: List[Dict[str, Any]], grad_embedding: np.ndarray
) -> Dict[str, np.ndarray]:
    """Gradients of a scalar w.r.t. every trunk array, given d(scalar)/d(embedding)."""
    cfg = weights.config
    grads: Dict[str, np.ndarray] = {}
    grad = grad_embedding
    pools = [cfg.sinc_pool] + [layer[2] for layer in cfg.conv_layers]

    for record in reversed(cache):
        name = record["name"]
        grad = _norm_act_backward(weights, name, grad, record, grads)
        if name.startswith("fc"):
            grad, grads[f"{name}.weight"], grads[f"{name}.bias"] = numeric.linear_backward(
                grad, record["input"], weights[f"{name}.weight"]
            )
            if name == "fc0":
                conv_shape = cache[len(cfg.conv_layers)]["shape"]
                grad = grad.reshape(conv_shape)
            continue

        index = 0 if name == "sinc" else int(name[4:]) + 1
        grad = numeric.max_pool1d_backward(grad, record["pool_idx"], record["pre_pool_len"], pools[index])
        if name == "sinc":
            grads["sinc.f_low"], grads["sinc.band"], _ = sinc.sinc_backward(
                weights.sinc_params(), record["input"], grad, cfg.sinc_stride
            )
        else:
            grad, grads[f"{name}.kernel"] = numeric.conv1d_backward(
                grad, record["input"], weights[f"{name}.kernel"]
            )
    return grads


def embed(weights: ModelWeights, chunks: np.ndarray) -> np.ndarray:
    """Embeddings [batch, embedding_dim] of waveform chunks (not L2-normalized)."""
    embedding, _ = forward_embed(weights, chunks)
    return embedding
