"""Click detection: thresholded peak picking with an even-spacing tie-break.

The detector prefers well-spaced peaks over counting one jagged peak several
times: conflicting peak clusters are enumerated and the selection whose
consecutive gaps have maximal entropy wins.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np
from scipy.signal import find_peaks

from .signal import AudioClip, ConfigError, DataError, bandpass_filter, envelope

# Absolute floor below which nothing counts as a peak, even on silent input.
_FLOOR_EPS = 1e-12


@dataclass(frozen=True)
class DetectorConfig:
    band_low_hz: float = 2000.0
    band_high_hz: float = 16000.0
    min_separation_s: float = 0.040
    rel_threshold: float = 0.4
    abs_floor_factor: float = 5.0
    envelope_window_ms: float = 2.0
    max_candidates: int = 256
    per_group_peaks: int = 3

    def __post_init__(self):
        for name in (
            "band_low_hz",
            "band_high_hz",
            "min_separation_s",
            "rel_threshold",
            "abs_floor_factor",
            "envelope_window_ms",
            "max_candidates",
            "per_group_peaks",
        ):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 < self.rel_threshold < 1.0:
            raise ConfigError(f"rel_threshold must be in (0, 1), got {self.rel_threshold}")
        if self.band_low_hz >= self.band_high_hz:
            raise ConfigError(
                f"band_low_hz={self.band_low_hz} must be below band_high_hz={self.band_high_hz}"
            )


@dataclass(frozen=True)
class ClickTrain:
    """Detected click onset times (seconds, strictly increasing) and their
    envelope amplitudes. reference_level is the maximum detected amplitude,
    interpreted as the primary vocalizer's volume level (0 when empty)."""

    times: np.ndarray
    amplitudes: np.ndarray
    reference_level: float

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        amps = np.asarray(self.amplitudes, dtype=np.float64)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "amplitudes", amps)
        if times.shape != amps.shape or times.ndim != 1:
            raise DataError("times and amplitudes must be 1-D arrays of equal length")
        if len(times) >= 2 and not np.all(np.diff(times) > 0):
            raise DataError("click times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.times)


def effective_band(cfg: DetectorConfig, sample_rate: int) -> tuple[float, float]:
    """Band edges actually passed to the filter for a given sample rate.

    A configured upper edge at or above Nyquist is pulled down to 99% of
    Nyquist so the default 16 kHz edge remains usable on 32 kHz audio.
    """
    high = min(cfg.band_high_hz, 0.99 * sample_rate / 2.0)
    if cfg.band_low_hz >= high:
        raise ConfigError(
            f"band [{cfg.band_low_hz}, {cfg.band_high_hz}] Hz is empty at "
            f"sample rate {sample_rate}"
        )
    return cfg.band_low_hz, high


def spacing_entropy(times) -> float:
    """Entropy of the normalized consecutive-gap distribution.

    With gaps g_i and p_i = g_i / sum(g), returns -sum(p_i * ln p_i); maximal
    exactly when all gaps are equal. Defined as 0 for fewer than two times.
    """
    t = np.asarray(times, dtype=np.float64)
    if t.size < 2:
        return 0.0
    gaps = np.diff(t)
    if np.any(gaps <= 0):
        raise DataError("times must be strictly increasing")
    p = gaps / gaps.sum()
    return float(-np.sum(p * np.log(p)))


def _greedy_by_amplitude(times, amps, min_sep):
    order = np.lexsort((times, -amps))
    chosen_times: list[float] = []
    chosen_amps: list[float] = []
    for i in order:
        if all(abs(times[i] - t) >= min_sep for t in chosen_times):
            chosen_times.append(times[i])
            chosen_amps.append(amps[i])
    idx = np.argsort(chosen_times)
    return np.asarray(chosen_times)[idx], np.asarray(chosen_amps)[idx]


def _group_conflicts(times, min_sep):
    """Split sorted peak indices into transitive-closure conflict groups."""
    groups = [[0]]
    for i in range(1, len(times)):
        if times[i] - times[i - 1] < min_sep:
            groups[-1].append(i)
        else:
            groups.append([i])
    return groups


def resolve_conflicts(times, amps, cfg: DetectorConfig):
    """Resolve minimum-separation conflicts among candidate peaks.

    Peaks closer than min_separation_s to a neighbor are clustered; each
    cluster contributes one of its per_group_peaks largest members to a
    candidate selection. Among valid selections (all pairwise gaps at least
    min_separation_s) the winner has, in order: the most clicks, the largest
    spacing entropy, the largest total amplitude, the earliest first click.
    Beyond max_candidates selections, a greedy-by-amplitude fallback is used.
    """
    times = np.asarray(times, dtype=np.float64)
    amps = np.asarray(amps, dtype=np.float64)
    if times.size == 0:
        return times, amps
    order = np.argsort(times, kind="stable")
    times, amps = times[order], amps[order]

    min_sep = cfg.min_separation_s
    groups = _group_conflicts(times, min_sep)

    alternatives = []
    for group in groups:
        g_amps = amps[group]
        top = np.lexsort((times[group], -g_amps))[: cfg.per_group_peaks]
        alternatives.append([group[i] for i in top])

    # One peak per group is always pairwise valid (adjacent groups are at
    # least min_sep apart by construction); the empty choice is only offered
    # if a group's best peak conflicts with another group's best.
    best_peaks = [alts[0] for alts in alternatives]
    for g, alts in enumerate(alternatives):
        conflicted = any(
            h != g and abs(times[best_peaks[g]] - times[best_peaks[h]]) < min_sep
            for h in range(len(best_peaks))
        )
        if conflicted:
            alternatives[g] = alts + [None]

    n_candidates = 1
    for alts in alternatives:
        n_candidates *= len(alts)
        if n_candidates > cfg.max_candidates:
            return _greedy_by_amplitude(times, amps, min_sep)

    best_key = None
    best_sel: tuple[int, ...] = ()
    for combo in itertools.product(*alternatives):
        sel = sorted(i for i in combo if i is not None)
        sel_times = times[sel]
        if len(sel) >= 2 and np.any(np.diff(sel_times) < min_sep):
            continue
        key = (
            len(sel),
            spacing_entropy(sel_times),
            float(amps[sel].sum()),
            -(sel_times[0] if len(sel) else np.inf),
        )
        if best_key is None or key > best_key:
            best_key = key
            best_sel = tuple(sel)

    sel = list(best_sel)
    return times[sel], amps[sel]


def detect_clicks(clip: AudioClip, cfg: DetectorConfig | None = None, *, prefiltered: bool = False) -> ClickTrain:
    """Detect clicks in a clip.

    Pipeline: band-pass filter, moving-max envelope, local maxima above
    max(abs_floor_factor * median envelope, epsilon), discard peaks below
    rel_threshold of the loudest peak, then resolve minimum-separation
    conflicts (resolve_conflicts). Noisy input degrades to fewer or zero
    clicks; an empty ClickTrain is a valid result, not an error.

    Pass prefiltered=True when the clip has already been band-passed with
    this config's band.
    """
    cfg = cfg or DetectorConfig()
    if len(clip) == 0:
        raise DataError("cannot detect clicks in an empty clip")
    if prefiltered:
        filtered = clip
    else:
        low, high = effective_band(cfg, clip.sample_rate)
        filtered = bandpass_filter(clip, low, high)
    env = envelope(filtered, cfg.envelope_window_ms)

    floor = max(cfg.abs_floor_factor * float(np.median(env)), _FLOOR_EPS)
    peaks, _ = find_peaks(env, height=floor)
    if peaks.size == 0:
        return ClickTrain(np.empty(0), np.empty(0), 0.0)

    amps = env[peaks]
    reference = float(amps.max())
    keep = amps >= cfg.rel_threshold * reference
    peaks, amps = peaks[keep], amps[keep]

    times = peaks / clip.sample_rate
    times, amps = resolve_conflicts(times, amps, cfg)
    if times.size == 0:
        return ClickTrain(np.empty(0), np.empty(0), 0.0)
    return ClickTrain(times, amps, float(amps.max()))
