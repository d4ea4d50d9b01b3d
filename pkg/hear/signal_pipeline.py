import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np
from scipy.signal import filtfilt, firwin, resample_poly

from .channel_dictionary import LayoutMapping
from .constants import (
    DEFAULT_AMPLITUDE_SCALE,
    DEFAULT_HIGH_FREQ,
    DEFAULT_LOW_FREQ,
    DEFAULT_SAMPLE_RATE,
    NYQUIST_MARGIN,
)
from .exceptions import (
    ConfigError,
    InvalidBandError,
    InvalidRateError,
    NonFiniteInputError,
    ShapeMismatchError,
    SignalTooShortError,
)

logger = logging.getLogger(__name__)

# Kaiser beta for the polyphase anti-aliasing filter (~80 dB stopband).
RESAMPLE_WINDOW = ('kaiser', 8.0)


@dataclass(frozen=True)
class Recording:
    """
    Multichannel EEG signal in microvolts.

    Attributes:
        data: C x T sample matrix
        sample_rate: Sampling rate in Hz
        layout: Mapping whose kept channels are the rows of ``data``
    """
    data: np.ndarray = field(repr=False)
    sample_rate: float
    layout: Optional[LayoutMapping] = None

    def __post_init__(self):
        if self.data.ndim != 2:
            raise ShapeMismatchError(f"recording data must be C x T, got shape {self.data.shape}")
        if self.data.shape[1] < 1:
            raise SignalTooShortError("recording has no samples")
        if self.layout is not None and self.layout.channel_count != self.data.shape[0]:
            raise ShapeMismatchError(
                f"layout keeps {self.layout.channel_count} channels but data has {self.data.shape[0]} rows"
            )
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteInputError("recording contains non-finite samples")

    @property
    def channel_count(self) -> int:
        return self.data.shape[0]

    @property
    def num_samples(self) -> int:
        return self.data.shape[1]

    def pick(self, indices: Sequence[int], layout: Optional[LayoutMapping] = None) -> 'Recording':
        """Select source channels, e.g. a mapping's kept indices."""
        return Recording(np.asarray(self.data[list(indices)]), self.sample_rate, layout)


@dataclass(frozen=True)
class PatchTensor:
    """Non-overlapping w-sample windows of every channel: C x N_t x w."""
    patches: np.ndarray = field(repr=False)
    window_len: int
    layout: Optional[LayoutMapping] = None

    @property
    def channel_count(self) -> int:
        return self.patches.shape[0]

    @property
    def time_patches(self) -> int:
        return self.patches.shape[1]


def average_reference(rec: Recording) -> Recording:
    """Subtract the across-channel mean from every sample."""
    referenced = rec.data - rec.data.mean(axis=0, keepdims=True)
    return replace(rec, data=referenced)


def resample(rec: Recording, target_rate: float) -> Recording:
    """
    Resample with a windowed-sinc polyphase filter.

    Output length is floor(T * target / source). Downsampling applies the
    anti-aliasing low-pass built into the polyphase filter.

    Args:
        rec: Input recording
        target_rate: Desired sampling rate in Hz

    Returns:
        Recording at ``target_rate``; the input object itself when the rates match
    """
    if rec.sample_rate <= 0 or target_rate <= 0:
        raise InvalidRateError(f"rates must be positive, got {rec.sample_rate} -> {target_rate}")
    if target_rate == rec.sample_rate:
        return rec

    ratio = (Fraction(target_rate) / Fraction(rec.sample_rate)).limit_denominator(1000)
    up, down = ratio.numerator, ratio.denominator
    out_len = (rec.num_samples * up) // down
    if out_len < 1:
        raise SignalTooShortError(f"{rec.num_samples} samples vanish when resampling by {up}/{down}")

    resampled = resample_poly(rec.data, up, down, axis=1, window=RESAMPLE_WINDOW)[:, :out_len]
    logger.debug(f"Resampled {rec.num_samples} -> {out_len} samples ({rec.sample_rate} -> {target_rate} Hz)")
    return replace(rec, data=np.ascontiguousarray(resampled), sample_rate=float(target_rate))


def filter_length(sample_rate: float) -> int:
    """Odd FIR order spanning one second of signal (201 taps at 200 Hz)."""
    taps = int(round(sample_rate))
    return taps if taps % 2 == 1 else taps + 1


def minimum_duration_samples(sample_rate: float) -> int:
    """Shortest recording (in samples) the bandpass stage accepts."""
    return 3 * filter_length(sample_rate)


def effective_band(sample_rate: float, lo: float, hi: float):
    """Clamp the upper cutoff just below Nyquist and validate the band."""
    hi_eff = min(hi, NYQUIST_MARGIN * sample_rate / 2.0)
    if not 0 < lo < hi_eff:
        raise InvalidBandError(f"invalid band ({lo}, {hi}) at {sample_rate} Hz (effective upper edge {hi_eff})")
    return lo, hi_eff


def bandpass_filter(rec: Recording, lo: float = DEFAULT_LOW_FREQ, hi: float = DEFAULT_HIGH_FREQ) -> Recording:
    """
    Zero-phase Hamming-window FIR bandpass (applied forward and backward).

    Args:
        rec: Input recording
        lo: Lower cutoff in Hz
        hi: Upper cutoff in Hz, limited to 0.999 x Nyquist

    Returns:
        Filtered recording

    Raises:
        InvalidBandError: Band is empty after clamping
        SignalTooShortError: Fewer than three filter lengths of samples
    """
    lo, hi_eff = effective_band(rec.sample_rate, lo, hi)
    numtaps = filter_length(rec.sample_rate)
    if rec.num_samples < minimum_duration_samples(rec.sample_rate):
        raise SignalTooShortError(
            f"{rec.num_samples} samples is shorter than 3 x {numtaps}-tap filter"
        )

    taps = firwin(numtaps, [lo, hi_eff], pass_zero=False, window='hamming', fs=rec.sample_rate)
    padlen = min(3 * numtaps, rec.num_samples - 1)
    filtered = filtfilt(taps, [1.0], rec.data, axis=1, padtype='odd', padlen=padlen)
    return replace(rec, data=np.ascontiguousarray(filtered))


def apply_scale(rec: Recording, factor: float = DEFAULT_AMPLITUDE_SCALE) -> Recording:
    """Global amplitude scaling applied before the model."""
    return replace(rec, data=rec.data * factor)


def segment_patches(rec: Recording, w: int) -> PatchTensor:
    """
    Cut every channel into floor(T / w) non-overlapping windows.

    The trailing remainder shorter than ``w`` is discarded.
    """
    if w < 1:
        raise ConfigError(f"window length must be >= 1, got {w}")
    n_patches = rec.num_samples // w
    used = rec.data[:, :n_patches * w]
    patches = used.reshape(rec.channel_count, n_patches, w).copy()
    return PatchTensor(patches=patches, window_len=w, layout=rec.layout)


def preprocess_recording(
    rec: Recording,
    target_rate: float = DEFAULT_SAMPLE_RATE,
    lo: float = DEFAULT_LOW_FREQ,
    hi: float = DEFAULT_HIGH_FREQ,
    scale: float = DEFAULT_AMPLITUDE_SCALE,
) -> Recording:
    """
    Fixed preprocessing order: average reference, resample, bandpass, scale.
    """
    rec = average_reference(rec)
    rec = resample(rec, target_rate)
    rec = bandpass_filter(rec, lo, hi)
    return apply_scale(rec, scale)
