"""Shared helpers: independent construction of synthetic click audio."""

import numpy as np
import pytest

from cdev.signal import AudioClip

SR = 32000


def render_clicks(
    onsets_s,
    amplitudes=None,
    carrier_hz=8000.0,
    decay_s=0.003,
    length=None,
    sr=SR,
    noise=0.0,
    seed=0,
):
    """Place exponentially decaying tone bursts at known onsets.

    Built here, independently of the library's generator, so detector tests
    have inputs with known ground truth.
    """
    onsets_s = np.asarray(onsets_s, dtype=float)
    if amplitudes is None:
        amplitudes = np.ones(len(onsets_s))
    if length is None:
        length = int(sr * (onsets_s.max() + 0.1)) if len(onsets_s) else sr
    samples = np.zeros(length)
    if noise:
        samples += np.random.default_rng(seed).normal(0.0, noise, length)
    burst_len = int(6 * decay_s * sr)
    k = np.arange(burst_len)
    shape = np.exp(-k / (decay_s * sr)) * np.sin(2 * np.pi * carrier_hz * k / sr)
    for onset, amp in zip(onsets_s, amplitudes):
        start = int(round(onset * sr))
        stop = min(start + burst_len, length)
        if start < length:
            samples[start:stop] += amp * shape[: stop - start]
    return AudioClip(np.clip(samples, -1.0, 1.0), sr)


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
