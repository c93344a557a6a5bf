"""Causal disentanglement with extreme values (CDEV) for black-box audio
generators: randomized continuous-treatment experiments over a generator's
encoding bits, bioacoustic observable extraction, and effect estimation,
verified against a built-in synthesizer with planted encodings."""

from .signal import AudioClip, ConfigError, DataError, Spectrum, bandpass_filter, envelope, periodogram, spectrogram
from .detector import ClickTrain, DetectorConfig, detect_clicks, resolve_conflicts, spacing_entropy
from .observables import ObservableRecord, ObservablesConfig, click_spectral_stats, coda_spectral_stats, ici_stats, measure
from .synthgen import (
    BitEffect,
    GeneratorConfig,
    LatentInput,
    PlantedEncoding,
    PlantedTargets,
    default_encoding,
    derive_rng,
    derive_seed,
    planted_targets,
    synth_coda,
)
from .corpus import (
    Manifest,
    default_dose_grid,
    draw_covariates,
    generate_corpus,
    measure_builtin,
    measure_corpus,
    read_observables_csv,
    read_wav,
    write_observables_csv,
    write_wav,
)
from .causal import (
    EffectCurve,
    OutcomeGrid,
    ate_curve,
    build_grid,
    curve_theta_fs,
    dispersion_curve,
    ice_curve,
    sign_score,
    spectral_distance_curve,
    stratify,
    theta_fs,
    wasserstein_1d,
)
from .surrogate import GBRTModel, SurrogateConfig, consistency_scan, fit_gbrt, permutation_importance

__version__ = "0.1.0"
