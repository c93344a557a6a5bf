"""Outcome extraction: click counts, ICI statistics, spectral statistics.

A measurement composes the detector with the spectral estimators into one
ObservableRecord per (unit, bit, dose). Fields that need a minimum click
count are absent (None) rather than zero when that minimum is not met.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .detector import ClickTrain, DetectorConfig, detect_clicks, effective_band
from .signal import AudioClip, ConfigError, DataError, Spectrum, bandpass_filter, periodogram


@dataclass(frozen=True)
class ObservablesConfig:
    # 512 samples at 32 kHz is ~16 ms, enough to cover a click's multipulse
    # structure while staying well inside the minimum click separation.
    click_window_samples: int = 512

    def __post_init__(self):
        if self.click_window_samples < 2:
            raise ConfigError(
                f"click_window_samples must be >= 2, got {self.click_window_samples}"
            )


@dataclass(frozen=True)
class ObservableRecord:
    """Per-(unit, bit, dose) measurements; None marks an absent value."""

    unit_id: int
    bit: int
    dose: float
    n_clicks: int
    mean_ici: float | None
    std_ici: float | None
    spectral_mean_hz: float | None
    spectral_mean_std_hz: float | None
    coda_spectral_mean_hz: float | None
    coda_spectrum: Spectrum | None = None


def ici_stats(train: ClickTrain) -> tuple[float | None, float | None]:
    """Mean and population standard deviation of the inter-click intervals.

    Absent (None, None) with fewer than two clicks; the divisor is the number
    of gaps for both statistics.
    """
    if len(train) < 2:
        return None, None
    gaps = np.diff(train.times)
    return float(gaps.mean()), float(gaps.std())


def _weighted_mean_hz(spectrum: Spectrum) -> float | None:
    total = float(spectrum.power.sum())
    if total <= 0.0:
        return None
    return float(np.dot(spectrum.bin_freqs, spectrum.power) / total)


def _filtered(clip: AudioClip, det_cfg: DetectorConfig) -> AudioClip:
    low, high = effective_band(det_cfg, clip.sample_rate)
    return bandpass_filter(clip, low, high)


def _click_windows(filtered: AudioClip, train: ClickTrain, window: int):
    n = len(filtered)
    width = min(window, n)
    for t in train.times:
        center = int(round(t * filtered.sample_rate))
        start = min(max(center - width // 2, 0), n - width)
        yield filtered.samples[start : start + width]


def _click_spectral_from_filtered(
    filtered: AudioClip, train: ClickTrain, obs_cfg: ObservablesConfig
) -> tuple[float | None, float | None]:
    means = []
    for window in _click_windows(filtered, train, obs_cfg.click_window_samples):
        m = _weighted_mean_hz(periodogram(AudioClip(window, filtered.sample_rate)))
        if m is not None:  # zero-power windows are excluded
            means.append(m)
    if not means:
        return None, None
    arr = np.asarray(means)
    mean = float(arr.mean())
    std = float(arr.std()) if len(arr) >= 2 else None
    return mean, std


def click_spectral_stats(
    clip: AudioClip,
    train: ClickTrain,
    det_cfg: DetectorConfig | None = None,
    obs_cfg: ObservablesConfig | None = None,
) -> tuple[float | None, float | None]:
    """Power-weighted mean frequency per click, aggregated over the coda.

    Each click contributes the weighted mean of the Hamming periodogram of a
    click_window_samples window centered on it (clamped at clip edges) in the
    band-passed clip. Returns (average of per-click means, their population
    standard deviation); the std needs at least two clicks.
    """
    det_cfg = det_cfg or DetectorConfig()
    obs_cfg = obs_cfg or ObservablesConfig()
    if len(train) < 1:
        return None, None
    return _click_spectral_from_filtered(_filtered(clip, det_cfg), train, obs_cfg)


def _coda_spectral_from_filtered(filtered: AudioClip) -> tuple[float | None, Spectrum | None]:
    spectrum = periodogram(filtered)
    total = float(spectrum.power.sum())
    if total <= 0.0:
        return None, None
    mean = float(np.dot(spectrum.bin_freqs, spectrum.power) / total)
    return mean, Spectrum(spectrum.bin_freqs, spectrum.power / total)


def coda_spectral_stats(
    clip: AudioClip, det_cfg: DetectorConfig | None = None
) -> tuple[float | None, Spectrum | None]:
    """Weighted mean frequency and unit-mass spectrum of the whole coda.

    The clip is band-passed, its full-clip Hamming periodogram taken, and the
    spectrum normalized to total power 1. Both values are absent for a
    zero-power clip.
    """
    det_cfg = det_cfg or DetectorConfig()
    if len(clip) == 0:
        raise DataError("coda_spectral_stats requires a non-empty clip")
    return _coda_spectral_from_filtered(_filtered(clip, det_cfg))


def measure(
    clip: AudioClip,
    unit_id: int,
    bit: int,
    dose: float,
    det_cfg: DetectorConfig | None = None,
    obs_cfg: ObservablesConfig | None = None,
    *,
    keep_spectrum: bool = False,
) -> ObservableRecord:
    """Measure one clip into an ObservableRecord.

    The clip is band-passed once; detection and all spectral statistics share
    the filtered signal. keep_spectrum controls whether the normalized coda
    spectrum is retained on the record (they are large).
    """
    det_cfg = det_cfg or DetectorConfig()
    obs_cfg = obs_cfg or ObservablesConfig()
    filtered = _filtered(clip, det_cfg)
    train = detect_clicks(filtered, det_cfg, prefiltered=True)
    mean_ici, std_ici = ici_stats(train)
    if len(train) >= 1:
        spec_mean, spec_std = _click_spectral_from_filtered(filtered, train, obs_cfg)
    else:
        spec_mean, spec_std = None, None
    coda_mean, coda_spectrum = _coda_spectral_from_filtered(filtered)
    return ObservableRecord(
        unit_id=unit_id,
        bit=bit,
        dose=dose,
        n_clicks=len(train),
        mean_ici=mean_ici,
        std_ici=std_ici,
        spectral_mean_hz=spec_mean,
        spectral_mean_std_hz=spec_std,
        coda_spectral_mean_hz=coda_mean,
        coda_spectrum=coda_spectrum if keep_spectrum else None,
    )
