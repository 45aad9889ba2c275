"""Dense tensor primitives with hand-derived backward passes.

Tensors are plain float64 numpy arrays. Every differentiable primitive comes
as a forward function plus a ``*_backward`` function that takes the upstream
gradient and returns gradients for each input.
"""

from dataclasses import dataclass
from typing import Callable, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NonFiniteError, NumericError, ShapeError, ZeroNormError

Tensor = np.ndarray

DTYPE = np.float64


@dataclass
class GradPair:
    """A parameter value together with the gradient of the loss w.r.t. it."""

    value: Tensor
    grad: Tensor

    def __post_init__(self):
        if self.grad.shape != self.value.shape:
            raise ShapeError(
                f"Gradient shape {self.grad.shape} does not match value shape "
                f"{self.value.shape}"
            )


def as_tensor(x, name: str = "tensor") -> Tensor:
    """Convert to a float64 array and reject NaN/Inf.

    Args:
        x: Array-like input.
        name: Name used in the error message.

    Returns:
        The input as a float64 numpy array.

    Raises:
        NonFiniteError: If any element is NaN or infinite.
    """
    arr = np.asarray(x, dtype=DTYPE)
    ensure_finite(arr, name)
    return arr


def ensure_finite(arr: Tensor, name: str, batch_index=None) -> None:
    """Raise NonFiniteError if ``arr`` holds NaN or Inf."""
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(name, batch_index)


# Convolution (cross-correlation, no kernel flip)


def _conv_operands(x: Tensor, kernels: Tensor) -> Tuple[Tensor, Tensor]:
    if x.ndim == 2:
        x = x[:, None, :]
    if kernels.ndim == 2:
        kernels = kernels[:, None, :]
    if x.ndim != 3 or kernels.ndim != 3:
        raise ShapeError(
            f"conv1d expects input [batch, (channels,) length] and kernels "
            f"[filters, (channels,) kernel_len], got {x.shape} and {kernels.shape}"
        )
    if x.shape[0] == 0 or x.shape[2] == 0:
        raise ShapeError("conv1d input is empty")
    if x.shape[1] != kernels.shape[1]:
        raise ShapeError(
            f"conv1d channel mismatch: input has {x.shape[1]}, kernels expect "
            f"{kernels.shape[1]}"
        )
    if kernels.shape[2] > x.shape[2]:
        raise ShapeError(
            f"conv1d kernel length {kernels.shape[2]} exceeds input length {x.shape[2]}"
        )
    return x, kernels


def conv_output_length(in_len: int, kernel_len: int, stride: int = 1) -> int:
    """Output length of a valid (no padding) convolution."""
    return (in_len - kernel_len) // stride + 1


def conv1d(x: Tensor, kernels: Tensor, stride: int = 1) -> Tensor:
    """Valid 1-D cross-correlation.

    ``y[b, f, i] = sum_{c, j} x[b, c, i*stride + j] * kernels[f, c, j]``.
    A 2-D input ``[batch, in_len]`` and 2-D kernels ``[filters, kernel_len]``
    are treated as single-channel.

    Args:
        x: Input of shape [batch, in_len] or [batch, channels, in_len].
        kernels: Kernels of shape [filters, kernel_len] or
            [filters, channels, kernel_len].
        stride: Positive step between output positions.

    Returns:
        Output of shape [batch, filters, out_len].

    Raises:
        ShapeError: On empty input or mismatched dimensions.
    """
    if stride < 1:
        raise ShapeError(f"conv1d stride must be >= 1, got {stride}")
    x, kernels = _conv_operands(x, kernels)
    batch, channels, _ = x.shape
    filters, _, kernel_len = kernels.shape
    windows = sliding_window_view(x, kernel_len, axis=2)[:, :, ::stride, :]
    out_len = windows.shape[2]
    flat_kernels = kernels.reshape(filters, channels * kernel_len)

    y = np.empty((batch, filters, out_len), dtype=DTYPE)
    for b in range(batch):
        cols = windows[b].transpose(1, 0, 2).reshape(out_len, channels * kernel_len)
        y[b] = flat_kernels @ cols.T
    return y


def conv1d_backward(
    grad_y: Tensor, x: Tensor, kernels: Tensor, stride: int = 1
) -> Tuple[Tensor, Tensor]:
    """Gradients of conv1d w.r.t. its input and kernels.

    Returned gradients have the same shapes as the ``x`` and ``kernels``
    passed in (2-D operands get 2-D gradients).
    """
    x_shape, k_shape = x.shape, kernels.shape
    x, kernels = _conv_operands(x, kernels)
    batch, channels, in_len = x.shape
    filters, _, kernel_len = kernels.shape
    windows = sliding_window_view(x, kernel_len, axis=2)[:, :, ::stride, :]
    out_len = windows.shape[2]
    flat_kernels = kernels.reshape(filters, channels * kernel_len)

    grad_k = np.zeros((filters, channels * kernel_len), dtype=DTYPE)
    grad_cols = np.empty((batch, out_len, channels, kernel_len), dtype=DTYPE)
    for b in range(batch):
        cols = windows[b].transpose(1, 0, 2).reshape(out_len, channels * kernel_len)
        grad_k += grad_y[b] @ cols
        grad_cols[b] = (grad_y[b].T @ flat_kernels).reshape(out_len, channels, kernel_len)

    grad_x = np.zeros((batch, channels, in_len), dtype=DTYPE)
    span = stride * (out_len - 1) + 1
    for j in range(kernel_len):
        grad_x[:, :, j : j + span : stride] += grad_cols[:, :, :, j].transpose(0, 2, 1)

    return grad_x.reshape(x_shape), grad_k.reshape(k_shape)


# Pooling


def max_pool1d(x: Tensor, pool_len: int) -> Tuple[Tensor, Tensor]:
    """Non-overlapping max pooling over the last axis.

    Trailing samples that do not fill a whole window are dropped.

    Returns:
        Tuple of (pooled output, argmax index within each window).
    """
    if pool_len < 1:
        raise ShapeError(f"pool length must be >= 1, got {pool_len}")
    out_len = x.shape[-1] // pool_len
    if out_len == 0:
        raise ShapeError(f"pool length {pool_len} exceeds input length {x.shape[-1]}")
    blocks = x[..., : out_len * pool_len].reshape(x.shape[:-1] + (out_len, pool_len))
    idx = np.argmax(blocks, axis=-1)
    y = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return y, idx


def max_pool1d_backward(grad_y: Tensor, idx: Tensor, in_len: int, pool_len: int) -> Tensor:
    """Route pooled gradients back to the winning positions."""
    out_len = grad_y.shape[-1]
    grad_blocks = np.zeros(grad_y.shape + (pool_len,), dtype=DTYPE)
    np.put_along_axis(grad_blocks, idx[..., None], grad_y[..., None], axis=-1)
    grad_x = np.zeros(grad_y.shape[:-1] + (in_len,), dtype=DTYPE)
    grad_x[..., : out_len * pool_len] = grad_blocks.reshape(grad_y.shape[:-1] + (-1,))
    return grad_x


# Normalization and nonlinearities


def layer_norm(
    x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-6
) -> Tuple[Tensor, Tuple[Tensor, Tensor]]:
    """Per-row layer normalization.

    Args:
        x: Input of shape [batch, features].
        gain: Per-feature scale.
        bias: Per-feature offset.
        eps: Variance floor.

    Returns:
        Tuple of (normalized output, cache for ``layer_norm_backward``).

    Raises:
        ShapeError: If there are no features or gain/bias do not match.
    """
    if x.ndim != 2 or x.shape[1] == 0:
        raise ShapeError(f"layer_norm expects [batch, features>=1], got {x.shape}")
    if gain.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise ShapeError(
            f"layer_norm gain/bias must have shape ({x.shape[1]},), got "
            f"{gain.shape} and {bias.shape}"
        )
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = np.mean(centered * centered, axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = centered * inv_std
    return x_hat * gain + bias, (x_hat, inv_std)


def layer_norm_backward(
    grad_y: Tensor, cache: Tuple[Tensor, Tensor], gain: Tensor
) -> Tuple[Tensor, Tensor, Tensor]:
    """Gradients of layer_norm w.r.t. (x, gain, bias)."""
    x_hat, inv_std = cache
    n = x_hat.shape[1]
    grad_gain = np.sum(grad_y * x_hat, axis=0)
    grad_bias = np.sum(grad_y, axis=0)
    g = grad_y * gain
    grad_x = (inv_std / n) * (
        n * g - g.sum(axis=1, keepdims=True) - x_hat * np.sum(g * x_hat, axis=1, keepdims=True)
    )
    return grad_x, grad_gain, grad_bias


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    """Element-wise max(x, slope*x) for slope in (0, 1)."""
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(grad_y: Tensor, x: Tensor, slope: float) -> Tensor:
    # the subgradient at exactly zero is the negative-side slope
    return grad_y * np.where(x > 0, 1.0, slope)


def l2_normalize(v: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale vectors along the last axis to unit norm.

    Vectors shorter than ``eps`` are divided by ``eps`` instead, so the zero
    vector maps to zero.
    """
    if v.shape[-1] == 0:
        raise ShapeError("l2_normalize needs at least one dimension")
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.maximum(norm, eps)


def l2_normalize_backward(grad_y: Tensor, v: Tensor, eps: float = 1e-12) -> Tensor:
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    denom = np.maximum(norm, eps)
    y = v / denom
    projected = grad_y - y * np.sum(y * grad_y, axis=-1, keepdims=True)
    return np.where(norm >= eps, projected, grad_y) / denom


def cosine_similarity(a: Tensor, b: Tensor) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1].

    Raises:
        ZeroNormError: If either vector has zero norm.
        ShapeError: If the shapes differ.
    """
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity shape mismatch: {a.shape} vs {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroNormError("cosine_similarity is undefined for a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


# Fully connected


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with weight of shape [out, in]."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(
            f"linear input width {x.shape[-1]} does not match weight {weight.shape}"
        )
    return x @ weight.T + bias


def linear_backward(grad_y: Tensor, x: Tensor, weight: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    return grad_y @ weight, grad_y.T @ x, grad_y.sum(axis=0)


# Gradient oracle


def finite_diff_grad(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient estimate of a scalar function.

    Args:
        f: Scalar-valued function of a tensor.
        x: Point at which to estimate the gradient.
        h: Step size.

    Returns:
        Tensor of the same shape as ``x``.

    Raises:
        NumericError: If ``f`` returns a non-finite value.
    """
    x = np.array(x, dtype=DTYPE)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    grad_flat = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        f_plus = f(x)
        flat[i] = original - h
        f_minus = f(x)
        flat[i] = original
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError(f"finite_diff_grad: non-finite function value at coordinate {i}")
        grad_flat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad
