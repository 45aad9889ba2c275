"""Classification heads and their analytic gradients.

Every head maps embeddings plus the head weights to a mean cross-entropy and
returns the gradient of that loss with respect to its logits or cosines.
``compute_loss`` chains those back to the embeddings and head weights.
"""

import math
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Optional, Tuple

import numpy as np

from . import numeric
from .errors import ConfigError, NumericError, ShapeError, ZeroNormError

LOSS_KINDS = ["softmax", "norm_softmax", "arcface", "am_softmax", "curricular"]
R_STATISTICS = ["mean", "sum"]
T_UPDATES = ["paper", "swapped"]
EVAL_LOGITS = ["plain", "margin"]

COS_TOLERANCE = 1e-9
# floor for sin(theta) in d cos(theta + m) / d cos(theta)
SIN_FLOOR = 1e-6


@dataclass
class LossConfig:
    """Head selection and hyperparameters.

    ``m`` is an angle for arcface/curricular and a cosine offset for
    am_softmax. ``r_statistic`` and ``t_update`` only matter for curricular.
    """

    kind: str = "curricular"
    m: float = 0.5
    s: float = 64.0
    alpha: float = 0.99
    r_statistic: str = "mean"
    t_update: str = "paper"

    def validate(self) -> None:
        """Raises ConfigError on any out-of-range field."""
        if self.kind not in LOSS_KINDS:
            raise ConfigError(f"unknown loss kind '{self.kind}', expected one of {LOSS_KINDS}")
        if not self.s > 0:
            raise ConfigError(f"loss scale s must be positive, got {self.s}")
        if self.kind in ("arcface", "curricular") and not 0.0 <= self.m < math.pi / 2:
            raise ConfigError(f"angular margin must lie in [0, pi/2), got {self.m}")
        if self.kind == "am_softmax" and not 0.0 <= self.m < 1.0:
            raise ConfigError(f"additive cosine margin must lie in [0, 1), got {self.m}")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.r_statistic not in R_STATISTICS:
            raise ConfigError(f"r_statistic must be one of {R_STATISTICS}, got '{self.r_statistic}'")
        if self.t_update not in T_UPDATES:
            raise ConfigError(f"t_update must be one of {T_UPDATES}, got '{self.t_update}'")

    def to_scalars(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class CurriculumState:
    """Adaptive curricular parameter ``t`` and the number of updates applied."""

    t: float = 0.0
    batch_index: int = 0

    def __post_init__(self):
        if not math.isfinite(self.t):
            raise ConfigError(f"curriculum t must be finite, got {self.t}")


@dataclass
class CosineLogits:
    """Cosines between normalized features and normalized head rows.

    Keeps the raw operands so ``backward`` can chain a cosine gradient to
    the unnormalized features and weights.
    """

    cos_theta: np.ndarray
    labels: np.ndarray
    features: Optional[np.ndarray] = field(default=None, repr=False)
    weight: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def target(self) -> np.ndarray:
        return self.cos_theta[np.arange(len(self.labels)), self.labels]

    def backward(self, grad_cos: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Gradients w.r.t. (features, weight) given d loss / d cos_theta."""
        if self.features is None or self.weight is None:
            raise ShapeError("CosineLogits built without operands cannot be differentiated")
        f_hat = numeric.l2_normalize(self.features)
        w_hat = numeric.l2_normalize(self.weight)
        grad_f = numeric.l2_normalize_backward(grad_cos @ w_hat, self.features)
        grad_w = numeric.l2_normalize_backward(grad_cos.T @ f_hat, self.weight)
        return grad_f, grad_w


@dataclass
class HeadOutput:
    """Result of one head on one batch.

    ``grad`` is d loss / d logits for the softmax head and d loss / d cos_theta
    for the cosine heads. ``state`` is the curriculum after this batch's update.
    """

    loss: float
    grad: np.ndarray
    logits: np.ndarray
    easy_fraction: float
    state: Optional[CurriculumState] = None
    r: Optional[float] = None


@dataclass
class LossResult:
    """A head's loss chained back to the embeddings and head parameters."""

    loss: float
    grad_features: np.ndarray
    grad_weight: np.ndarray
    grad_bias: np.ndarray
    logits: np.ndarray
    easy_fraction: float
    state: CurriculumState
    r: Optional[float] = None


def _check_labels(labels, batch: int, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (batch,):
        raise ShapeError(f"expected {batch} labels, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ShapeError("labels must be integer class indices")
    if batch and (labels.min() < 0 or labels.max() >= classes):
        raise ShapeError(f"labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")
    return labels.astype(np.int64)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean negative log-softmax of the target logits and its gradient.

    Uses the max-subtracted log-sum-exp so large logits do not overflow.
    """
    batch = logits.shape[0]
    labels = _check_labels(labels, batch, logits.shape[1])
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    rows = np.arange(batch)
    loss = -float(np.mean(log_probs[rows, labels]))
    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    return loss, grad / batch


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def cosine_logits(features: np.ndarray, weight: np.ndarray, labels=None) -> CosineLogits:
    """Cosines between every feature row and every head row.

    Raises:
        ZeroNormError: If a feature or head row has zero norm.
        ShapeError: On mismatched widths.
        NumericError: If a cosine leaves [-1, 1] by more than ``COS_TOLERANCE``.
    """
    features = np.asarray(features, dtype=numeric.DTYPE)
    weight = np.asarray(weight, dtype=numeric.DTYPE)
    if features.ndim != 2 or weight.ndim != 2 or features.shape[1] != weight.shape[1]:
        raise ShapeError(f"cosine_logits needs [batch, dim] and [C, dim], got {features.shape} and {weight.shape}")
    if features.shape[1] == 0:
        raise ShapeError("cosine_logits needs dim >= 1")
    if np.any(np.linalg.norm(features, axis=1) == 0.0):
        raise ZeroNormError("a feature row has zero norm")
    if np.any(np.linalg.norm(weight, axis=1) == 0.0):
        raise ZeroNormError("a head weight row has zero norm")
    cos = numeric.l2_normalize(features) @ numeric.l2_normalize(weight).T
    finite = np.isfinite(cos)
    if np.any(np.abs(cos[finite]) > 1.0 + COS_TOLERANCE):
        raise NumericError(f"cosine out of range: max |cos| = {np.max(np.abs(cos[finite])):.6g}")
    # rounding can leave |cos| a few ulps above 1; NaN passes through for the loss check
    cos = np.clip(cos, -1.0, 1.0)
    if labels is None:
        labels = np.zeros(features.shape[0], dtype=np.int64)
    labels = _check_labels(labels, features.shape[0], weight.shape[0])
    return CosineLogits(cos_theta=cos, labels=labels, features=features, weight=weight)


def margin_target(cos_theta: np.ndarray, m: float) -> Tuple[np.ndarray, np.ndarray]:
    """cos(theta + m) and its derivative w.r.t. cos(theta).

    Past theta = pi - m the angle would wrap around, so the target falls back
    to the monotone ``cos(theta) - m * sin(m)`` there.
    """
    c = np.clip(cos_theta, -1.0, 1.0)
    sin_theta = np.sqrt(np.maximum(1.0 - c * c, 0.0))
    cos_m, sin_m = math.cos(m), math.sin(m)
    target = c * cos_m - sin_theta * sin_m
    deriv = cos_m + sin_m * c / np.maximum(sin_theta, SIN_FLOOR)
    wrapped = c <= math.cos(math.pi - m)
    target = np.where(wrapped, c - m * sin_m, target)
    deriv = np.where(wrapped, 1.0, deriv)
    return target, deriv


def _easy_fraction(target: np.ndarray, compare: np.ndarray, labels: np.ndarray) -> float:
    batch, classes = compare.shape
    if classes < 2 or batch == 0:
        return 1.0
    easy = target[:, None] > compare
    easy[np.arange(batch), labels] = False
    return float(easy.sum() / (batch * (classes - 1)))


def softmax_loss(logits: np.ndarray, labels) -> HeadOutput:
    """Plain cross-entropy over affine logits ``W f + b``."""
    logits = np.asarray(logits, dtype=numeric.DTYPE)
    loss, grad = cross_entropy(logits, labels)
    labels = np.asarray(labels, dtype=np.int64)
    target = logits[np.arange(len(labels)), labels]
    return HeadOutput(loss, grad, logits, _easy_fraction(target, logits, labels))


def norm_softmax_loss(cl: CosineLogits, s: float) -> HeadOutput:
    logits = s * cl.cos_theta
    loss, grad = cross_entropy(logits, cl.labels)
    return HeadOutput(loss, s * grad, logits, _easy_fraction(cl.target, cl.cos_theta, cl.labels))


def _replace_target(values: np.ndarray, labels: np.ndarray, target: np.ndarray) -> np.ndarray:
    out = values.copy()
    out[np.arange(len(labels)), labels] = target
    return out


def arcface_loss(cl: CosineLogits, m: float, s: float) -> HeadOutput:
    """Additive angular margin on the target class only."""
    rows = np.arange(len(cl.labels))
    target, deriv = margin_target(cl.target, m)
    logits = s * _replace_target(cl.cos_theta, cl.labels, target)
    loss, grad = cross_entropy(logits, cl.labels)
    grad_cos = s * grad
    grad_cos[rows, cl.labels] *= deriv
    return HeadOutput(loss, grad_cos, logits, _easy_fraction(target, cl.cos_theta, cl.labels))


def am_softmax_loss(cl: CosineLogits, m: float, s: float) -> HeadOutput:
    """Additive cosine margin: the target logit is ``s * (cos - m)``."""
    target = cl.target - m
    logits = s * _replace_target(cl.cos_theta, cl.labels, target)
    loss, grad = cross_entropy(logits, cl.labels)
    return HeadOutput(loss, s * grad, logits, _easy_fraction(target, cl.cos_theta, cl.labels))


def modulation(t, cos_theta_j, cos_theta_k_plus_m):
    """Non-target modulation: unchanged when easy, ``c * (t + c)`` when hard.

    A pair is easy when the margin target strictly exceeds the non-target
    cosine. Works element-wise on arrays.
    """
    c = np.asarray(cos_theta_j, dtype=numeric.DTYPE)
    hard = c >= np.asarray(cos_theta_k_plus_m, dtype=numeric.DTYPE)
    out = np.where(hard, c * (t + c), c)
    return float(out) if out.ndim == 0 else out


def update_t(state: CurriculumState, r: float, alpha: float, t_update: str = "paper") -> CurriculumState:
    """One update of the curricular parameter.

    ``paper``: ``t = alpha * r + (1 - alpha) * t``.
    ``swapped``: ``t = alpha * t + (1 - alpha) * r``.
    ``t`` stays non-negative as long as every ``r`` is.
    """
    if t_update == "paper":
        t = alpha * r + (1.0 - alpha) * state.t
    elif t_update == "swapped":
        t = alpha * state.t + (1.0 - alpha) * r
    else:
        raise ConfigError(f"t_update must be one of {T_UPDATES}, got '{t_update}'")
    return CurriculumState(t=float(t), batch_index=state.batch_index + 1)


def curricular_loss(
    cl: CosineLogits,
    state: CurriculumState,
    m: float,
    s: float,
    alpha: float = 0.99,
    r_statistic: str = "mean",
    t_update: str = "paper",
) -> HeadOutput:
    """Angular margin on the target plus adaptive modulation of hard negatives.

    The logits use ``state.t`` as it was before this batch. The returned
    ``HeadOutput.state`` carries the updated ``t``; ``state`` itself is not
    mutated. The hard-branch gradient treats ``t`` as a constant.
    """
    rows = np.arange(len(cl.labels))
    c = cl.cos_theta
    target, deriv = margin_target(cl.target, m)

    hard = c >= target[:, None]
    hard[rows, cl.labels] = False
    modulated = np.where(hard, c * (state.t + c), c)
    modulated_deriv = np.where(hard, state.t + 2.0 * c, 1.0)
    modulated[rows, cl.labels] = target
    modulated_deriv[rows, cl.labels] = deriv

    logits = s * modulated
    loss, grad = cross_entropy(logits, cl.labels)
    grad_cos = s * grad * modulated_deriv

    positives = np.clip(cl.target, -1.0, 1.0)
    if r_statistic == "mean":
        r = float(np.mean(positives))
    elif r_statistic == "sum":
        r = float(np.sum(positives))
    else:
        raise ConfigError(f"r_statistic must be one of {R_STATISTICS}, got '{r_statistic}'")
    new_state = update_t(state, r, alpha, t_update)
    easy = _easy_fraction(target, c, cl.labels)
    return HeadOutput(loss, grad_cos, logits, easy, state=new_state, r=r)


def compute_loss(
    config: LossConfig,
    features: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray,
    labels,
    state: Optional[CurriculumState] = None,
) -> LossResult:
    """Run the configured head and chain its gradient to features, W and b.

    The cosine heads ignore the bias; its gradient is zero for them.
    """
    state = state or CurriculumState()
    features = np.asarray(features, dtype=numeric.DTYPE)
    labels = _check_labels(labels, features.shape[0], weight.shape[0])
    grad_bias = np.zeros_like(bias)

    if config.kind == "softmax":
        out = softmax_loss(numeric.linear(features, weight, bias), labels)
        grad_features, grad_weight, grad_bias = numeric.linear_backward(out.grad, features, weight)
        return LossResult(
            out.loss, grad_features, grad_weight, grad_bias, out.logits, out.easy_fraction, state
        )

    cl = cosine_logits(features, weight, labels)
    if config.kind == "norm_softmax":
        out = norm_softmax_loss(cl, config.s)
    elif config.kind == "arcface":
        out = arcface_loss(cl, config.m, config.s)
    elif config.kind == "am_softmax":
        out = am_softmax_loss(cl, config.m, config.s)
    elif config.kind == "curricular":
        out = curricular_loss(
            cl, state, config.m, config.s, config.alpha, config.r_statistic, config.t_update
        )
    else:
        raise ConfigError(f"unknown loss kind '{config.kind}'")

    grad_features, grad_weight = cl.backward(out.grad)
    return LossResult(
        out.loss,
        grad_features,
        grad_weight,
        grad_bias,
        out.logits,
        out.easy_fraction,
        out.state or state,
        out.r,
    )


def eval_logits(
    config: LossConfig,
    features: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray,
    mode: str = "plain",
) -> np.ndarray:
    """Logits used for posteriors at evaluation time.

    ``plain`` scores every class by ``s * cos`` (affine logits for the softmax
    head). ``margin`` scores every class with the head's target form, so each
    class is treated as if it were the label.
    """
    if mode not in EVAL_LOGITS:
        raise ConfigError(f"eval_logits must be one of {EVAL_LOGITS}, got '{mode}'")
    if config.kind == "softmax":
        return numeric.linear(np.asarray(features, dtype=numeric.DTYPE), weight, bias)
    cos = cosine_logits(features, weight).cos_theta
    if mode == "plain" or config.kind == "norm_softmax":
        return config.s * cos
    if config.kind == "am_softmax":
        return config.s * (cos - config.m)
    target, _ = margin_target(cos, config.m)
    return config.s * target


def posteriors(
    config: LossConfig,
    features: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray,
    mode: str = "plain",
) -> np.ndarray:
    """Class posteriors [batch, C] (rows sum to 1)."""
    return softmax(eval_logits(config, features, weight, bias, mode))
