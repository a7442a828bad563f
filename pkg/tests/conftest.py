"""Shared helpers for the test suite."""

import numpy as np
import pytest

from svda.dataio import Manifest, UtteranceRecord, Waveform


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_record(i, speaker=None, domain="source", labeled=True, duration=2.0):
    return UtteranceRecord(
        id=f"u{i:05d}",
        speaker=speaker if speaker is not None else f"spk{i % 7}",
        path=f"audio/u{i:05d}.wav",
        duration=duration,
        domain=domain,
        labeled=labeled,
    )


def make_manifest(n, **kwargs):
    return Manifest(records=[make_record(i, **kwargs) for i in range(n)])


def make_tone(freq_hz, seconds=1.0, rate=16000, amplitude=0.5):
    t = np.arange(int(round(seconds * rate))) / rate
    return Waveform(samples=amplitude * np.sin(2.0 * np.pi * freq_hz * t),
                    sample_rate=rate)


def rel_err(numeric, analytic):
    """Scaled max relative error between a numeric and analytic gradient."""
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-12)
    return np.abs(numeric - analytic).max() / scale
