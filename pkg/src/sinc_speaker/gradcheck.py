"""Finite-difference verification of every analytic gradient.

Two families are checked: the trunk weight groups (through a full forward
pass and a loss head on a miniature model) and the five loss heads (w.r.t.
features and head weights directly).
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numeric
from .logger import NullLogger, RunLogger
from .losses import LOSS_KINDS, CurriculumState, LossConfig, compute_loss
from .model import WEIGHT_GROUPS, ModelConfig, ModelWeights, backward_embed, forward_embed, init_model, weight_group

COORDS_PER_GROUP = 40
KINK_TOLERANCE = 1e-6
HEAD_SCALE = 8.0


@dataclass
class GradCheckResult:
    """Worst relative error of one weight group or loss head over all seeds."""

    name: str
    family: str  # "weights" or "loss head"
    max_rel_error: float = 0.0
    checked: int = 0
    skipped: int = 0
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error < self.tolerance

    def merge(self, error: float, checked: int, skipped: int) -> None:
        self.max_rel_error = max(self.max_rel_error, error)
        self.checked += checked
        self.skipped += skipped


def relative_error(analytic: np.ndarray, estimate: np.ndarray) -> float:
    """``max|a - n| / max(max|a|, max|n|, 1e-12)``."""
    analytic = np.asarray(analytic, dtype=numeric.DTYPE).reshape(-1)
    estimate = np.asarray(estimate, dtype=numeric.DTYPE).reshape(-1)
    if analytic.size == 0:
        return 0.0
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(estimate)), 1e-12)
    return float(np.max(np.abs(analytic - estimate)) / scale)


def check_gradient(
    f: Callable[[np.ndarray], float],
    x: np.ndarray,
    analytic: np.ndarray,
    h: float = 1e-5,
    coords: Optional[Sequence[int]] = None,
) -> Tuple[float, int, int]:
    """Compare an analytic gradient with central differences.

    A coordinate is skipped when its estimates at ``h`` and ``h / 2``
    disagree, which means a kink or jump lies inside the stencil.

    Args:
        f: Scalar function of a tensor shaped like ``x``.
        x: Evaluation point (not modified).
        analytic: Gradient to verify, same shape as ``x``.
        h: Step size.
        coords: Flat coordinates to check; all when None.

    Returns:
        Tuple of (relative error over kept coordinates, kept count, skipped count).
    """
    x = np.array(x, dtype=numeric.DTYPE)
    analytic = np.asarray(analytic, dtype=numeric.DTYPE).reshape(-1)
    if coords is None:
        coarse = numeric.finite_diff_grad(f, x, h).reshape(-1)
        fine = numeric.finite_diff_grad(f, x, h / 2.0).reshape(-1)
        coords = np.arange(x.size)
    else:
        coords = np.asarray(coords, dtype=np.int64)
        flat = x.reshape(-1)
        coarse = np.zeros(x.size)
        fine = np.zeros(x.size)
        for i in coords:
            original = flat[i]
            for step, out in ((h, coarse), (h / 2.0, fine)):
                flat[i] = original + step
                f_plus = f(x)
                flat[i] = original - step
                f_minus = f(x)
                flat[i] = original
                out[i] = (f_plus - f_minus) / (2.0 * step)

    kept = [i for i in coords if abs(coarse[i] - fine[i]) <= KINK_TOLERANCE * max(1.0, abs(coarse[i]))]
    skipped = len(coords) - len(kept)
    if not kept:
        return 0.0, 0, skipped
    return relative_error(analytic[kept], coarse[kept]), len(kept), skipped


def miniature_config() -> ModelConfig:
    """Small trunk used for gradient checks (2 sinc filters of 17 taps, 64-sample chunks)."""
    return ModelConfig(
        sample_rate=16000,
        chunk_len=64,
        sinc_filters=2,
        sinc_kernel_len=17,
        sinc_pool=2,
        f_min=80.0,
        f_max=6000.0,
        conv_layers=[(3, 5, 2)],
        fc_layers=[8],
        embedding_dim=6,
    )


def _group_arrays(weights: ModelWeights) -> Dict[str, List[str]]:
    groups: Dict[str, List[str]] = {g: [] for g in WEIGHT_GROUPS}
    for name in weights.names():
        groups[weight_group(name)].append(name)
    return groups


def _model_loss(weights: ModelWeights, chunks, labels, loss_config: LossConfig) -> float:
    embedding, _ = forward_embed(weights, chunks)
    return compute_loss(
        loss_config, embedding, weights.head_weight, weights.head_bias, labels, weights.curriculum
    ).loss


def check_weight_groups(
    seed: int,
    h: float = 1e-5,
    config: Optional[ModelConfig] = None,
    loss_config: Optional[LossConfig] = None,
    batch_size: int = 4,
    class_count: int = 4,
) -> Dict[str, Tuple[float, int, int]]:
    """Check every trunk weight group for one seed.

    Returns:
        Group name -> (relative error, checked, skipped).
    """
    config = config or miniature_config()
    loss_config = loss_config or LossConfig(kind="arcface", m=0.5, s=HEAD_SCALE)
    rng = np.random.default_rng([seed, 1])
    weights = init_model(config, class_count, seed, loss_config)
    chunks = rng.uniform(-1.0, 1.0, size=(batch_size, config.chunk_len))
    labels = rng.integers(0, class_count, size=batch_size)

    embedding, cache = forward_embed(weights, chunks)
    result = compute_loss(
        loss_config, embedding, weights.head_weight, weights.head_bias, labels, weights.curriculum
    )
    grads = backward_embed(weights, cache, result.grad_features)
    grads["head.weight"] = result.grad_weight
    grads["head.bias"] = result.grad_bias

    outcomes = {}
    for group, names in _group_arrays(weights).items():
        originals = [weights.arrays[n] for n in names]
        sizes = [a.size for a in originals]
        x0 = np.concatenate([a.reshape(-1) for a in originals])
        analytic = np.concatenate([grads[n].reshape(-1) for n in names])

        def f(vector: np.ndarray) -> float:
            offset = 0
            for name, original, size in zip(names, originals, sizes):
                weights.arrays[name] = vector[offset : offset + size].reshape(original.shape)
                offset += size
            return _model_loss(weights, chunks, labels, loss_config)

        count = min(COORDS_PER_GROUP, x0.size)
        coords = np.sort(rng.choice(x0.size, size=count, replace=False))
        outcomes[group] = check_gradient(f, x0, analytic, h, coords)
        for name, original in zip(names, originals):
            weights.arrays[name] = original
    return outcomes


def check_loss_head(
    kind: str,
    seed: int,
    h: float = 1e-5,
    batch_size: int = 4,
    dim: int = 6,
    class_count: int = 4,
) -> Tuple[float, int, int]:
    """Check one head's gradients w.r.t. features, W and b for one seed."""
    rng = np.random.default_rng([seed, 2])
    margin = 0.35 if kind == "am_softmax" else 0.5
    config = LossConfig(kind=kind, m=margin, s=HEAD_SCALE)
    features = rng.standard_normal((batch_size, dim))
    weight = rng.standard_normal((class_count, dim))
    bias = rng.standard_normal(class_count) if kind == "softmax" else np.zeros(class_count)
    labels = rng.integers(0, class_count, size=batch_size)
    state = CurriculumState(t=float(rng.uniform(0.0, 0.5)))
    result = compute_loss(config, features, weight, bias, labels, state)

    def loss_of(f_, w_, b_):
        return compute_loss(config, f_, w_, b_, labels, state).loss

    outcomes = [
        check_gradient(lambda v: loss_of(v, weight, bias), features, result.grad_features, h),
        check_gradient(lambda v: loss_of(features, v, bias), weight, result.grad_weight, h),
        check_gradient(lambda v: loss_of(features, weight, v), bias, result.grad_bias, h),
    ]
    return (
        max(o[0] for o in outcomes),
        sum(o[1] for o in outcomes),
        sum(o[2] for o in outcomes),
    )


def run_gradcheck(
    seeds: int = 20,
    h: float = 1e-5,
    tolerance: float = 1e-4,
    logger: Optional[RunLogger] = None,
    on_seed: Optional[Callable[[int], None]] = None,
) -> List[GradCheckResult]:
    """Check all weight groups and all loss heads over ``seeds`` independent draws."""
    logger = logger or NullLogger()
    results = {g: GradCheckResult(g, "weights", tolerance=tolerance) for g in WEIGHT_GROUPS}
    results.update({k: GradCheckResult(k, "loss head", tolerance=tolerance) for k in LOSS_KINDS})
    for seed in range(seeds):
        for group, outcome in check_weight_groups(seed, h).items():
            results[group].merge(*outcome)
        for kind in LOSS_KINDS:
            results[kind].merge(*check_loss_head(kind, seed, h))
        if on_seed is not None:
            on_seed(seed)
    for result in results.values():
        if not result.passed:
            logger.log_warning(
                "gradcheck_failure",
                f"{result.family} '{result.name}' failed",
                {"max_rel_error": result.max_rel_error, "checked": result.checked},
            )
    return list(results.values())
