"""Learnable band-pass sinc filterbank.

Each filter is parameterized only by its low cutoff and its bandwidth, both
in normalized frequency (cycles per sample). The kernel is the difference of
two windowed low-pass sinc functions.
"""

from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import numeric
from .errors import ConfigError, ShapeError

DEFAULT_MIN_LOW_HZ = 50.0
NYQUIST = 0.5


def hertz_to_mel(freq):
    """Mel value of a frequency in Hz (scalar or array)."""
    return 2595.0 * np.log10(1.0 + np.asarray(freq, dtype=np.float64) / 700.0)


def mel_to_hertz(mel):
    """Frequency in Hz of a mel value (scalar or array)."""
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


@dataclass
class SincFilterParams:
    """Per-filter cutoff parameters of the filterbank.

    ``f_low`` and ``band`` are free parameters; the cutoffs actually used are
    ``a1 = |f_low| + min_low_hz / sample_rate`` and
    ``a2 = min(a1 + |band|, 0.5)``.
    """

    f_low: np.ndarray
    band: np.ndarray
    kernel_len: int
    sample_rate: int
    min_low_hz: float = DEFAULT_MIN_LOW_HZ
    window: bool = True

    def __post_init__(self):
        self.f_low = np.asarray(self.f_low, dtype=np.float64).reshape(-1)
        self.band = np.asarray(self.band, dtype=np.float64).reshape(-1)
        if self.f_low.shape != self.band.shape:
            raise ShapeError(
                f"f_low and band must have the same length, got {self.f_low.size} "
                f"and {self.band.size}"
            )
        if self.kernel_len < 1 or self.kernel_len % 2 == 0:
            raise ConfigError(f"kernel_len must be odd and positive, got {self.kernel_len}")
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def count(self) -> int:
        return int(self.f_low.size)

    @property
    def f_floor(self) -> float:
        return self.min_low_hz / self.sample_rate

    @classmethod
    def from_cutoffs(
        cls,
        low,
        high,
        kernel_len: int,
        sample_rate: int,
        min_low_hz: float = DEFAULT_MIN_LOW_HZ,
        window: bool = True,
    ) -> "SincFilterParams":
        """Build parameters whose effective cutoffs are the given values.

        Args:
            low: Low cutoffs in normalized frequency, each >= min_low_hz / sample_rate.
            high: High cutoffs in normalized frequency, each >= low and <= 0.5.
        """
        low = np.atleast_1d(np.asarray(low, dtype=np.float64))
        high = np.atleast_1d(np.asarray(high, dtype=np.float64))
        floor = min_low_hz / sample_rate
        if np.any(low < floor) or np.any(high < low) or np.any(high > NYQUIST):
            raise ConfigError(
                f"cutoffs must satisfy {floor:.6g} <= low <= high <= 0.5"
            )
        return cls(
            f_low=low - floor,
            band=high - low,
            kernel_len=kernel_len,
            sample_rate=sample_rate,
            min_low_hz=min_low_hz,
            window=window,
        )

    def copy(self) -> "SincFilterParams":
        return SincFilterParams(
            f_low=self.f_low.copy(),
            band=self.band.copy(),
            kernel_len=self.kernel_len,
            sample_rate=self.sample_rate,
            min_low_hz=self.min_low_hz,
            window=self.window,
        )


@dataclass
class FilterResponse:
    """Magnitude response of one filter, in dB relative to its peak."""

    freqs: np.ndarray
    magnitude_db: np.ndarray
    low: float
    high: float
    is_silent: bool = False

    def band_edges_db(self, level_db: float = -3.0) -> Tuple[float, float]:
        """First and last frequency at which the response reaches ``level_db``."""
        above = np.nonzero(self.magnitude_db >= level_db)[0]
        if above.size == 0:
            return float("nan"), float("nan")
        return float(self.freqs[above[0]]), float(self.freqs[above[-1]])

    def peak_frequency(self) -> float:
        return float(self.freqs[int(np.argmax(self.magnitude_db))])


def init_floor_hz(min_low_hz: float, f_min: float) -> float:
    """Cutoff floor of a mel-initialized bank starting at ``f_min``."""
    return min(min_low_hz, f_min / 2.0)


def mel_init(
    count: int,
    sample_rate: int,
    f_min: float,
    f_max: float,
    kernel_len: int = 251,
    min_low_hz: float = DEFAULT_MIN_LOW_HZ,
    window: bool = True,
) -> SincFilterParams:
    """Mel-spaced initial cutoffs.

    ``count + 1`` edges are placed at equal mel distance between ``f_min`` and
    ``f_max``; filter ``i`` spans edges ``i`` and ``i + 1``. The floor is
    lowered to ``f_min / 2`` when that is below ``min_low_hz``, so the first
    filter starts exactly at ``f_min`` and every ``f_low`` starts positive.

    Raises:
        ConfigError: If the count or frequency range is invalid.
    """
    if count < 1:
        raise ConfigError(f"filter count must be >= 1, got {count}")
    if not (0 < f_min < f_max <= sample_rate / 2):
        raise ConfigError(
            f"need 0 < f_min < f_max <= {sample_rate / 2:g} Hz, got f_min={f_min}, f_max={f_max}"
        )
    edges_mel = np.linspace(hertz_to_mel(f_min), hertz_to_mel(f_max), count + 1)
    edges_hz = mel_to_hertz(edges_mel)
    edges_hz[0] = f_min
    edges_hz[-1] = f_max
    floor_hz = init_floor_hz(min_low_hz, f_min)
    edges = edges_hz / sample_rate
    return SincFilterParams.from_cutoffs(
        edges[:-1],
        edges[1:],
        kernel_len=kernel_len,
        sample_rate=sample_rate,
        min_low_hz=floor_hz,
        window=window,
    )


def effective_cutoffs(params: SincFilterParams) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return (a1, a2, clamped) after the clamping rule.

    Both cutoffs are capped at Nyquist; a filter whose low cutoff reaches it
    has an empty band and an all-zero kernel.
    """
    a1 = np.minimum(np.abs(params.f_low) + params.f_floor, NYQUIST)
    raw_high = a1 + np.abs(params.band)
    clamped = raw_high > NYQUIST
    a2 = np.where(clamped, NYQUIST, raw_high)
    return a1, a2, clamped


def resolved_filters(params: SincFilterParams) -> np.ndarray:
    """Mask of filters whose band the kernel can resolve.

    A windowed kernel of ``kernel_len`` taps smears every frequency over the
    Hamming main lobe, ``4 / kernel_len`` wide. Below that low cutoff a band
    merges with its mirror image around DC, so its response peaks near 0 and
    rolls off too slowly for a clean stop band.
    """
    a1, _, _ = effective_cutoffs(params)
    return a1 >= 4.0 / params.kernel_len


def _half_offsets(kernel_len: int) -> np.ndarray:
    # |n| for taps 0..center, i.e. center, center-1, ..., 0
    center = (kernel_len - 1) // 2
    return np.arange(center, -1, -1, dtype=np.float64)


def _mirror(half: np.ndarray) -> np.ndarray:
    return np.concatenate([half, half[..., -2::-1]], axis=-1)


def hamming_window(kernel_len: int) -> np.ndarray:
    """Symmetric Hamming window, mirrored so both halves are bit-identical."""
    if kernel_len == 1:
        return np.ones(1)
    j = np.arange((kernel_len - 1) // 2 + 1, dtype=np.float64)
    half = 0.54 - 0.46 * np.cos(2.0 * np.pi * j / (kernel_len - 1))
    return _mirror(half)


def _window_half(params: SincFilterParams) -> np.ndarray:
    center = (params.kernel_len - 1) // 2
    if params.window:
        return hamming_window(params.kernel_len)[: center + 1]
    return np.ones(center + 1)


def materialize(params: SincFilterParams) -> np.ndarray:
    """Kernels of shape [count, kernel_len].

    ``g[n] = (sin(2 pi a2 n) - sin(2 pi a1 n)) / (pi n)`` with
    ``g[0] = 2 (a2 - a1)``, multiplied by the Hamming window when enabled.
    Only the left half is evaluated; the right half is its mirror image.
    """
    a1, a2, _ = effective_cutoffs(params)
    m = _half_offsets(params.kernel_len)
    safe_m = np.where(m == 0, 1.0, m)
    high = np.sin(2.0 * np.pi * a2[:, None] * m) / (np.pi * safe_m)
    low = np.sin(2.0 * np.pi * a1[:, None] * m) / (np.pi * safe_m)
    half = np.where(m == 0, 2.0 * (a2 - a1)[:, None], high - low)
    return _mirror(half * _window_half(params))


def materialize_backward(
    params: SincFilterParams, grad_kernels: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """Chain kernel gradients back to (f_low, band).

    ``dg/da2 = 2 cos(2 pi a2 n)`` and ``dg/da1 = -2 cos(2 pi a1 n)`` for every
    tap including the center. The absolute values use the subgradient +1 at
    zero so a parameter sitting exactly at 0 still moves.
    """
    a1, a2, clamped = effective_cutoffs(params)
    n = np.arange(params.kernel_len, dtype=np.float64) - (params.kernel_len - 1) / 2.0
    weighted = grad_kernels * _mirror(_window_half(params))
    grad_a2 = np.sum(weighted * 2.0 * np.cos(2.0 * np.pi * a2[:, None] * n), axis=1)
    grad_a1 = -np.sum(weighted * 2.0 * np.cos(2.0 * np.pi * a1[:, None] * n), axis=1)
    grad_a2 = np.where(clamped, 0.0, grad_a2)
    grad_a1 = np.where(a1 >= NYQUIST, 0.0, grad_a1)
    grad_f_low = _abs_subgradient(params.f_low) * (grad_a1 + grad_a2)
    grad_band = _abs_subgradient(params.band) * grad_a2
    return grad_f_low, grad_band


def _abs_subgradient(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0.0, 1.0, -1.0)


def sinc_forward(params: SincFilterParams, waveform: np.ndarray, stride: int = 1) -> np.ndarray:
    """Filter a batch of waveform chunks: [batch, chunk_len] -> [batch, count, out_len]."""
    if waveform.ndim != 2:
        raise ShapeError(f"sinc_forward expects [batch, chunk_len], got {waveform.shape}")
    return numeric.conv1d(waveform, materialize(params), stride)


def sinc_backward(
    params: SincFilterParams, waveform: np.ndarray, grad_y: np.ndarray, stride: int = 1
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of sinc_forward w.r.t. (f_low, band, waveform)."""
    grad_x, grad_kernels = numeric.conv1d_backward(grad_y, waveform, materialize(params), stride)
    grad_f_low, grad_band = materialize_backward(params, grad_kernels)
    return grad_f_low, grad_band, grad_x


def frequency_response(
    params: SincFilterParams, filter_index: int, n_points: int = 512
) -> FilterResponse:
    """Sampled DTFT magnitude of one materialized kernel.

    The kernel is symmetric around its center tap, so its zero-phase
    response is the real cosine sum ``H(f) = sum_n k[n] cos(2 pi f n)``.

    Raises:
        IndexError: If ``filter_index`` is out of range.
    """
    if not 0 <= filter_index < params.count:
        raise IndexError(f"filter index {filter_index} out of range for {params.count} filters")
    if n_points < 2:
        raise ConfigError("frequency_response needs at least 2 points")
    kernel = materialize(params)[filter_index]
    a1, a2, _ = effective_cutoffs(params)
    n = np.arange(params.kernel_len, dtype=np.float64) - (params.kernel_len - 1) / 2.0
    freqs = np.linspace(0.0, NYQUIST, n_points)
    magnitude = np.abs(np.cos(2.0 * np.pi * np.outer(freqs, n)) @ kernel)
    peak = magnitude.max()
    if peak == 0.0:
        magnitude_db = np.full(n_points, -np.inf)
        silent = True
    else:
        with np.errstate(divide="ignore"):
            magnitude_db = 20.0 * np.log10(magnitude / peak)
        silent = False
    return FilterResponse(
        freqs=freqs,
        magnitude_db=magnitude_db,
        low=float(a1[filter_index]),
        high=float(a2[filter_index]),
        is_silent=silent,
    )
