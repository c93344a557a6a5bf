"""DSP primitives: band-pass filtering, envelope extraction, periodograms.

Everything here is a pure function of its inputs; operations may be invoked
concurrently on distinct clips without shared state.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import ndimage
from scipy import signal as _sps


class ConfigError(ValueError):
    """A parameter or configuration value is invalid."""


class DataError(ValueError):
    """Input data violates an operation's contract."""


# scipy design order; a band-pass doubles it, so a single pass is 4th order
# and the forward-backward application is effectively 8th order, zero phase.
_BUTTER_ORDER = 2
_EFFECTIVE_ORDER = 4 * _BUTTER_ORDER


@dataclass(frozen=True)
class AudioClip:
    """Mono sample buffer with its sample rate.

    Amplitudes are dimensionless, nominally in [-1, 1]; they must be finite.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        if samples.ndim != 1:
            raise DataError(f"expected a mono sample vector, got shape {samples.shape}")
        if samples.size and not np.all(np.isfinite(samples)):
            raise DataError("samples contain NaN or Inf")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class Spectrum:
    """One-sided power spectrum on a uniform frequency grid from 0 to Nyquist."""

    bin_freqs: np.ndarray
    power: np.ndarray

    def __post_init__(self):
        freqs = np.asarray(self.bin_freqs, dtype=np.float64)
        power = np.asarray(self.power, dtype=np.float64)
        object.__setattr__(self, "bin_freqs", freqs)
        object.__setattr__(self, "power", power)
        if freqs.shape != power.shape or freqs.ndim != 1:
            raise DataError("bin_freqs and power must be 1-D arrays of equal length")
        if len(freqs) >= 2 and not np.all(np.diff(freqs) > 0):
            raise DataError("bin_freqs must be strictly increasing")
        if np.any(power < 0):
            raise DataError("power must be nonnegative")

    def __len__(self) -> int:
        return len(self.bin_freqs)

    @property
    def bin_width_hz(self) -> float:
        if len(self.bin_freqs) < 2:
            return 0.0
        return float((self.bin_freqs[-1] - self.bin_freqs[0]) / (len(self.bin_freqs) - 1))


def _next_pow2(n: int) -> int:
    return 1 << max(n - 1, 0).bit_length()


@lru_cache(maxsize=8)
def _hamming(n: int) -> np.ndarray:
    window = np.hamming(n)
    window.flags.writeable = False
    return window


@lru_cache(maxsize=8)
def _rfft_freqs(nfft: int, sample_rate: int) -> np.ndarray:
    freqs = np.fft.rfftfreq(nfft, d=1.0 / sample_rate)
    freqs.flags.writeable = False
    return freqs


@lru_cache(maxsize=8)
def _onesided_scale(nfft: int) -> np.ndarray:
    scale = np.full(nfft // 2 + 1, 2.0)
    scale[0] = 1.0
    if nfft % 2 == 0:
        scale[-1] = 1.0
    scale /= nfft
    scale.flags.writeable = False
    return scale


def _require_nonempty(clip: AudioClip) -> None:
    if len(clip) == 0:
        raise DataError("operation requires a non-empty clip")


def bandpass_filter(clip: AudioClip, low_hz: float, high_hz: float) -> AudioClip:
    """Zero-phase Butterworth band-pass.

    The 4th-order design is applied forward and backward (sosfiltfilt), so
    click peak times are not shifted and the effective roll-off is 8th order.
    Edges are reflect-padded by 3x the effective order to suppress startup
    transients.
    """
    _require_nonempty(clip)
    nyquist = clip.sample_rate / 2.0
    if not 0.0 < low_hz < high_hz:
        raise ConfigError(f"invalid band: low={low_hz} Hz must be < high={high_hz} Hz, both > 0")
    if high_hz >= nyquist:
        raise ConfigError(f"band high={high_hz} Hz must be below Nyquist ({nyquist} Hz)")
    sos = _sps.butter(
        _BUTTER_ORDER, [low_hz, high_hz], btype="bandpass", fs=clip.sample_rate, output="sos"
    )
    padlen = min(len(clip) - 1, 3 * _EFFECTIVE_ORDER)
    filtered = _sps.sosfiltfilt(sos, clip.samples, padtype="even", padlen=padlen)
    return AudioClip(np.ascontiguousarray(filtered), clip.sample_rate)


def bandpass_sos(low_hz: float, high_hz: float, sample_rate: int) -> np.ndarray:
    """Second-order sections of the band-pass design, for response analysis."""
    return _sps.butter(
        _BUTTER_ORDER, [low_hz, high_hz], btype="bandpass", fs=sample_rate, output="sos"
    )


def envelope(clip: AudioClip, window_ms: float) -> np.ndarray:
    """Per-sample moving maximum of |samples| over a centered window.

    Output has the same length as the input and dominates |samples| pointwise.
    """
    if window_ms <= 0:
        raise ConfigError(f"window_ms must be positive, got {window_ms}")
    _require_nonempty(clip)
    window = max(1, int(round(window_ms * 1e-3 * clip.sample_rate)))
    return ndimage.maximum_filter1d(np.abs(clip.samples), size=window, mode="constant", cval=0.0)


def periodogram(clip: AudioClip) -> Spectrum:
    """Hamming-windowed power spectrum of the full clip.

    The transform is zero-padded to the next power of two so clips of equal
    length share one bin grid. Power is scaled one-sided such that the total
    equals the windowed-signal energy (Parseval).
    """
    if len(clip) < 2:
        raise DataError("periodogram requires at least 2 samples")
    windowed = clip.samples * _hamming(len(clip))
    nfft = _next_pow2(len(clip))
    spec = np.fft.rfft(windowed, n=nfft)
    power = np.abs(spec) ** 2
    power *= _onesided_scale(nfft)
    return Spectrum(_rfft_freqs(nfft, clip.sample_rate), power)


def spectrogram(clip: AudioClip, frame_len: int, hop: int) -> list[Spectrum]:
    """Sequence of Hamming-windowed frame periodograms.

    Frame count is floor((len - frame_len) / hop) + 1; each frame obeys the
    periodogram contract.
    """
    if frame_len <= 0 or hop <= 0 or hop > frame_len:
        raise ConfigError(f"require 0 < hop <= frame_len, got hop={hop}, frame_len={frame_len}")
    if frame_len > len(clip):
        raise DataError(f"frame_len={frame_len} exceeds clip length {len(clip)}")
    count = (len(clip) - frame_len) // hop + 1
    starts = hop * np.arange(count)
    frames = clip.samples[starts[:, None] + np.arange(frame_len)[None, :]]
    frames = frames * _hamming(frame_len)[None, :]
    nfft = _next_pow2(frame_len)
    spec = np.fft.rfft(frames, n=nfft, axis=1)
    power = np.abs(spec) ** 2
    power *= _onesided_scale(nfft)[None, :]
    freqs = _rfft_freqs(nfft, clip.sample_rate)
    return [Spectrum(freqs, row) for row in power]
