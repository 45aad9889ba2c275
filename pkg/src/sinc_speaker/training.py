"""Training loop and optimizers."""

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Union

import numpy as np

from . import checkpoint, numeric
from .data import BatchPrefetcher, BatchSpec, DatasetManifest, SplitAudio, load_audio
from .errors import ClassCountMismatchError, ConfigError
from .logger import NullLogger, RunLogger
from .losses import LossConfig, compute_loss
from .model import ModelConfig, ModelWeights, backward_embed, forward_embed, init_model

LOG_FILE = "train_log.csv"
OPTIMIZERS = ["rmsprop", "sgd"]
LOG_COLUMNS = ["batch", "loss", "t", "r", "easy_fraction", "grad_norm"]
FINAL_CHECKPOINT = "final.ckpt"


@dataclass
class TrainConfig:
    """Optimization settings of one training run."""

    loss: LossConfig = field(default_factory=LossConfig)
    batch: BatchSpec = field(default_factory=BatchSpec)
    learning_rate: float = 0.01
    optimizer: str = "rmsprop"
    rmsprop_decay: float = 0.95
    rmsprop_eps: float = 1e-7
    epochs: int = 10
    batches_per_epoch: int = 800
    seed: int = 1234
    checkpoint_every: int = 1
    prefetch: int = 0
    checkpoint_dtype: str = "float64"

    def validate(self) -> None:
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.epochs < 1 or self.batches_per_epoch < 1:
            raise ConfigError("epochs and batches_per_epoch must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got '{self.optimizer}'")
        self.loss.validate()

    @property
    def total_batches(self) -> int:
        return self.epochs * self.batches_per_epoch


class SGD:
    """Plain gradient descent: ``value -= lr * grad``."""

    def __init__(self, learning_rate: float):
        self.learning_rate = learning_rate

    def step(self, params: Dict[str, numeric.GradPair]) -> None:
        for pair in params.values():
            pair.value -= self.learning_rate * pair.grad


class RMSprop:
    """RMSprop with a running mean of squared gradients per array."""

    def __init__(self, learning_rate: float, decay: float = 0.95, eps: float = 1e-7):
        self.learning_rate = learning_rate
        self.decay = decay
        self.eps = eps
        self.mean_square: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, numeric.GradPair]) -> None:
        for name, pair in params.items():
            ms = self.mean_square.get(name)
            if ms is None:
                ms = np.zeros_like(pair.value)
            ms = self.decay * ms + (1.0 - self.decay) * pair.grad * pair.grad
            self.mean_square[name] = ms
            pair.value -= self.learning_rate * pair.grad / (np.sqrt(ms) + self.eps)


def make_optimizer(config: TrainConfig):
    if config.optimizer == "sgd":
        return SGD(config.learning_rate)
    return RMSprop(config.learning_rate, config.rmsprop_decay, config.rmsprop_eps)


@dataclass
class TrainResult:
    weights: ModelWeights
    log: List[Dict[str, float]]
    checkpoints: List[Path] = field(default_factory=list)


def train_step(
    weights: ModelWeights,
    loss_config: LossConfig,
    chunks: np.ndarray,
    labels: np.ndarray,
    optimizer,
    batch_index: int,
) -> Dict[str, float]:
    """Forward, backward and one optimizer step on a single batch.

    Updates ``weights`` in place (including the curriculum state).

    Returns:
        The training-log row of this batch.

    Raises:
        NonFiniteError: If the loss or any gradient is NaN/Inf.
    """
    embedding, cache = forward_embed(weights, chunks)
    numeric.ensure_finite(embedding, "embedding", batch_index)
    result = compute_loss(
        loss_config, embedding, weights.head_weight, weights.head_bias, labels, weights.curriculum
    )
    numeric.ensure_finite(np.asarray(result.loss), "loss", batch_index)

    grads = backward_embed(weights, cache, result.grad_features)
    grads["head.weight"] = result.grad_weight
    grads["head.bias"] = result.grad_bias
    squared = 0.0
    for name, grad in grads.items():
        numeric.ensure_finite(grad, f"grad:{name}", batch_index)
        squared += float(np.sum(grad * grad))

    t_used = weights.curriculum.t
    optimizer.step({name: numeric.GradPair(weights.arrays[name], grads[name]) for name in grads})
    for name, value in weights.arrays.items():
        numeric.ensure_finite(value, name, batch_index)
    if loss_config.kind == "curricular":
        weights.curriculum = result.state

    return {
        "batch": batch_index,
        "loss": result.loss,
        "t": t_used,
        "r": result.r if result.r is not None else float("nan"),
        "easy_fraction": result.easy_fraction,
        "grad_norm": float(np.sqrt(squared)),
    }


def _format_row(row: Dict[str, float]) -> List[str]:
    return [str(row["batch"])] + [repr(float(row[c])) for c in LOG_COLUMNS[1:]]


def train(
    manifest: DatasetManifest,
    model_config: ModelConfig,
    config: TrainConfig,
    out_dir: Optional[Union[str, Path]] = None,
    logger: Optional[RunLogger] = None,
    weights: Optional[ModelWeights] = None,
    audio: Optional[SplitAudio] = None,
    on_batch: Optional[Callable[[Dict[str, float]], None]] = None,
) -> TrainResult:
    """Train the trunk and the loss head on the manifest's train split.

    With ``out_dir`` the CSV training log, per-epoch checkpoints and
    ``final.ckpt`` are written there.

    Raises:
        ClassCountMismatchError: If ``weights`` were built for another class count.
        NonFiniteError: On a non-finite loss, gradient or weight.
    """
    logger = logger or NullLogger()
    config.validate()
    if model_config.chunk_len != config.batch.chunk_len:
        raise ConfigError(
            f"model chunk_len {model_config.chunk_len} differs from batch chunk_len {config.batch.chunk_len}"
        )
    if audio is None:
        audio = load_audio(manifest, "train")

    if weights is None:
        weights = init_model(
            model_config, manifest.class_count, config.seed, config.loss, manifest.speakers
        )
    elif weights.class_count != manifest.class_count:
        raise ClassCountMismatchError(
            f"weights have {weights.class_count} classes, manifest has {manifest.class_count}"
        )
    weights.loss_config = config.loss
    weights.speakers = list(manifest.speakers)
    optimizer = make_optimizer(config)

    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    writer = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / LOG_FILE, "w", newline="", encoding="utf-8")
        writer = csv.writer(log_file, lineterminator="\n")
        writer.writerow(LOG_COLUMNS)

    rows: List[Dict[str, float]] = []
    saved: List[Path] = []
    try:
        batches = BatchPrefetcher(audio, config.batch, 0, config.total_batches, config.prefetch)
        for batch_index, chunks, labels in batches:
            row = train_step(weights, config.loss, chunks, labels, optimizer, batch_index)
            rows.append(row)
            logger.log_batch(row)
            if writer is not None:
                writer.writerow(_format_row(row))
            if on_batch is not None:
                on_batch(row)

            epoch, position = divmod(batch_index + 1, config.batches_per_epoch)
            if out is not None and position == 0 and epoch % config.checkpoint_every == 0:
                path = checkpoint.save_checkpoint(
                    weights, out / f"epoch_{epoch:03d}.ckpt", config.checkpoint_dtype
                )
                saved.append(path)
                logger.log_checkpoint(path, epoch, batch_index)
    finally:
        if log_file is not None:
            log_file.close()

    if out is not None:
        path = checkpoint.save_checkpoint(weights, out / FINAL_CHECKPOINT, config.checkpoint_dtype)
        saved.append(path)
        logger.log_checkpoint(path, config.epochs, config.total_batches - 1)
    return TrainResult(weights, rows, saved)
