"""Deterministic parametric coda generator with planted bit encodings.

Stands in for a trained black-box generator: each encoding bit can be planted
to drive one observable with a known slope above the training range, while
every bit exerts small saturating cross-effects inside it. Audio is a pure
function of (covariates, treatment, config), so repeated calls with the same
inputs are bit-identical.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass

import numpy as np

from .signal import AudioClip, ConfigError, DataError

log = logging.getLogger(__name__)

TARGETS = ("n_clicks", "mean_ici", "ici_std", "spectral_mean", "spectral_std", "none")

# Hard cap on white-noise amplitude so primary clicks stay above the
# detector's relative threshold across the whole dose range.
_NOISE_CAP = 0.05
# Synthesis never places clicks closer than this, leaving margin over the
# detector's 40 ms separation threshold.
_MIN_GAP_S = 0.07


@dataclass(frozen=True)
class LatentInput:
    """Covariate vector x (unit identity) and treatment vector t (doses)."""

    x: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        t = np.asarray(self.t, dtype=np.float64)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "t", t)
        if x.ndim != 1 or t.ndim != 1:
            raise DataError("x and t must be 1-D vectors")
        if not np.all(np.isfinite(x)) or not np.all(np.isfinite(t)):
            raise DataError("latent input must be finite")
        if x.size and np.abs(x).max() > 1.0:
            raise DataError("covariate entries must lie in [-1, 1]")


@dataclass(frozen=True)
class BitEffect:
    """Planted behavior of one encoding bit.

    slope acts on the target observable per unit dose above 1.0;
    entangle_amp scales saturating (tanh) cross-effects on the other
    observables; noise_coeff grows the output noise per unit dose above 1.0.
    """

    target: str = "none"
    slope: float = 0.0
    entangle_amp: float = 0.0
    noise_coeff: float = 0.0

    def __post_init__(self):
        if self.target not in TARGETS:
            raise ConfigError(f"unknown target {self.target!r}, expected one of {TARGETS}")
        for name in ("slope", "entangle_amp", "noise_coeff"):
            if not math.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")


@dataclass(frozen=True)
class PlantedEncoding:
    bits: tuple[BitEffect, ...]

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(self.bits))
        if not self.bits:
            raise ConfigError("encoding needs at least one bit")

    @property
    def n_bits(self) -> int:
        return len(self.bits)


def default_encoding(n_bits: int = 5) -> PlantedEncoding:
    """Default planted map: bit 1 drives the click count (ICI spacing and
    regularity follow through the click-count coupling), bit 0 the spectral
    mean, bit 3 the within-coda spectral spread. Remaining bits are inert
    apart from entangled cross-effects."""
    if n_bits < 4:
        raise ConfigError(f"default planted map needs at least 4 bits, got {n_bits}")
    bits = [
        BitEffect("spectral_mean", slope=1.0, entangle_amp=0.5, noise_coeff=0.002),
        BitEffect("n_clicks", slope=0.5, entangle_amp=-0.35, noise_coeff=0.002),
        BitEffect("none", slope=0.0, entangle_amp=0.6, noise_coeff=0.002),
        BitEffect("spectral_std", slope=-0.8, entangle_amp=-0.45, noise_coeff=0.002),
    ]
    extra_amps = (0.55, 0.4, 0.3, 0.25)
    for i in range(n_bits - 4):
        amp = extra_amps[i % len(extra_amps)]
        bits.append(BitEffect("none", slope=0.0, entangle_amp=amp, noise_coeff=0.002))
    return PlantedEncoding(tuple(bits[:n_bits]))


@dataclass(frozen=True)
class GeneratorConfig:
    sample_rate: int = 32000
    clip_len: int = 65536  # ~2.05 s; power of two fixes the FFT bin grid
    base_clicks: float = 5.0
    base_ici_s: float = 0.2
    ici_coupling_exp: float = 0.7  # mean ICI shrinks as (base/nu)^exp
    base_ici_jitter_s: float = 0.02
    jitter_coupling_exp: float = 1.0  # ICI spread shrinks as (base/nu)^exp
    carrier_hz: float = 6000.0
    carrier_jitter_hz: float = 300.0
    click_amp: float = 0.9
    click_decay_s: float = 0.003
    onset_s: float = 0.12
    noise_base: float = 0.001
    # units of planted slope per dose above 1.0, by target kind
    clicks_per_dose: float = 1.0
    ici_per_dose: float = 0.01
    ici_std_per_dose: float = 0.004
    hz_per_dose: float = 300.0
    hz_std_per_dose: float = 30.0
    # saturated cross-effect magnitude per unit of entangle_amp, by observable
    entangle_clicks: float = 0.6
    entangle_ici_s: float = 0.003
    entangle_ici_std_s: float = 0.001
    entangle_hz: float = 200.0
    entangle_hz_std: float = 40.0

    def __post_init__(self):
        if self.sample_rate <= 0 or self.clip_len <= 0:
            raise ConfigError("sample_rate and clip_len must be positive")
        if self.base_ici_s <= 0 or self.base_clicks < 1:
            raise ConfigError("base_ici_s must be positive and base_clicks >= 1")

    @property
    def duration_s(self) -> float:
        return self.clip_len / self.sample_rate


@dataclass(frozen=True)
class PlantedTargets:
    """Ground-truth observable values the generator aims for on one clip."""

    n_clicks: int
    mean_ici_s: float
    ici_std_s: float
    carrier_hz: float
    carrier_jitter_hz: float
    noise_level: float
    degenerate: bool = False


def derive_seed(x) -> int:
    """Stable 64-bit seed: SHA-256 over the little-endian float64 bytes of x."""
    vec = np.ascontiguousarray(np.asarray(x, dtype="<f8"))
    if not np.all(np.isfinite(vec)):
        raise DataError("covariate vector must be finite")
    digest = hashlib.sha256(vec.tobytes()).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(x) -> np.random.Generator:
    """Deterministic PCG64 stream keyed by the covariate vector.

    The same x always yields the same stream, implementing the consistency
    assumption that a unit's output is a function of its inputs alone.
    """
    return np.random.Generator(np.random.PCG64(derive_seed(x)))


def _relu(v: float) -> float:
    return v if v > 0.0 else 0.0


def _round_half_up(v: float) -> int:
    return math.floor(v + 0.5)


_DRIVER_OF_TARGET = {
    "n_clicks": "n_clicks",
    "mean_ici": "mean_ici",
    "ici_std": "ici_std",
    "spectral_mean": "spectral_mean",
    "spectral_std": "spectral_std",
    "none": None,
}


def planted_targets(inp: LatentInput, enc: PlantedEncoding, cfg: GeneratorConfig) -> PlantedTargets:
    """Resolve the treatment vector into the generator's target observables.

    Each bit adds slope * relu(t - 1) * <per-dose scale> to its own target and
    entangle_amp * <cross scale> * tanh(t) to every other one, so cross-effects
    saturate to constants beyond the training range.
    """
    if len(inp.t) != enc.n_bits:
        raise ConfigError(f"treatment has {len(inp.t)} entries for {enc.n_bits} planted bits")

    scale_per_dose = {
        "n_clicks": cfg.clicks_per_dose,
        "mean_ici": cfg.ici_per_dose,
        "ici_std": cfg.ici_std_per_dose,
        "spectral_mean": cfg.hz_per_dose,
        "spectral_std": cfg.hz_std_per_dose,
    }
    cross_scale = {
        "n_clicks": cfg.entangle_clicks,
        "mean_ici": cfg.entangle_ici_s,
        "ici_std": cfg.entangle_ici_std_s,
        "spectral_mean": cfg.entangle_hz,
        "spectral_std": cfg.entangle_hz_std,
    }
    boost = dict.fromkeys(scale_per_dose, 0.0)
    cross = dict.fromkeys(scale_per_dose, 0.0)
    noise = cfg.noise_base
    for dose, eff in zip(inp.t, enc.bits):
        own = _DRIVER_OF_TARGET[eff.target]
        if own is not None:
            boost[own] += eff.slope * _relu(dose - 1.0) * scale_per_dose[own]
        sat = math.tanh(dose)
        for driver in cross:
            if driver != own:
                cross[driver] += eff.entangle_amp * cross_scale[driver] * sat
        noise += eff.noise_coeff * _relu(dose - 1.0)

    nu = cfg.base_clicks + boost["n_clicks"] + cross["n_clicks"]
    nu_eff = max(nu, 1.0)
    n = max(_round_half_up(nu), 0)

    shrink = cfg.base_clicks / nu_eff
    mean_ici = cfg.base_ici_s * shrink**cfg.ici_coupling_exp
    mean_ici += boost["mean_ici"] + cross["mean_ici"]
    mean_ici = max(mean_ici, 0.08)
    ici_std = cfg.base_ici_jitter_s * shrink**cfg.jitter_coupling_exp
    ici_std = max(ici_std + boost["ici_std"] + cross["ici_std"], 0.0)

    carrier = cfg.carrier_hz + boost["spectral_mean"] + cross["spectral_mean"]
    carrier = min(max(carrier, 2500.0), 0.45 * cfg.sample_rate)
    carrier_jitter = max(
        cfg.carrier_jitter_hz + boost["spectral_std"] + cross["spectral_std"], 10.0
    )

    degenerate = False
    max_span = cfg.duration_s - cfg.onset_s - 0.05
    if n >= 2 and (n - 1) * mean_ici * 1.15 > max_span:
        n = 1 + int(max_span / (mean_ici * 1.15))
        degenerate = True

    return PlantedTargets(
        n_clicks=n,
        mean_ici_s=mean_ici,
        ici_std_s=ici_std,
        carrier_hz=carrier,
        carrier_jitter_hz=carrier_jitter,
        noise_level=min(noise, _NOISE_CAP),
        degenerate=degenerate,
    )


def synth_coda(
    inp: LatentInput, enc: PlantedEncoding | None = None, cfg: GeneratorConfig | None = None
) -> AudioClip:
    """Render one coda clip for a (covariates, treatment) pair.

    Clicks are exponentially decaying sinusoids at per-click carriers, placed
    at jittered onsets, on top of white noise whose level grows with dose.
    Deterministic: the RNG stream is derived from x alone, and all draws occur
    in a fixed order (onset offset, gap jitter, carrier jitter, noise).
    """
    enc = enc or default_encoding()
    cfg = cfg or GeneratorConfig()
    tg = planted_targets(inp, enc, cfg)
    if tg.degenerate:
        log.warning(
            "planted click count exceeds clip duration; clamped to %d clicks", tg.n_clicks
        )
    rng = derive_rng(inp.x)
    sr = cfg.sample_rate
    n = tg.n_clicks

    onset = cfg.onset_s + rng.uniform(-0.01, 0.01)
    if n >= 2:
        # keep every gap above the synthesis floor regardless of jitter target
        sigma = min(tg.ici_std_s, max(0.0, (tg.mean_ici_s - _MIN_GAP_S) / 3.0))
        jitter = np.clip(rng.normal(0.0, 1.0, n - 1), -3.0, 3.0)
        gaps = tg.mean_ici_s + sigma * jitter
        times = onset + np.concatenate(([0.0], np.cumsum(gaps)))
    else:
        times = np.full(n, onset)
    if n >= 1:
        carriers = tg.carrier_hz + tg.carrier_jitter_hz * np.clip(
            rng.normal(0.0, 1.0, n), -3.0, 3.0
        )
        carriers = np.clip(carriers, 2200.0, 0.47 * sr)

    samples = rng.normal(0.0, 1.0, cfg.clip_len) * tg.noise_level
    click_len = int(6 * cfg.click_decay_s * sr)
    k = np.arange(click_len)
    decay = np.exp(-k / (cfg.click_decay_s * sr))
    for i in range(n):
        start = int(round(times[i] * sr))
        if start >= cfg.clip_len:
            break
        stop = min(start + click_len, cfg.clip_len)
        span = stop - start
        samples[start:stop] += (
            cfg.click_amp * decay[:span] * np.sin(2.0 * np.pi * carriers[i] * k[:span] / sr)
        )
    np.clip(samples, -1.0, 1.0, out=samples)
    return AudioClip(samples, sr)
