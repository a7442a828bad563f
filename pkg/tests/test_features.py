"""DSP frontend: fbank, CMN, crop, augmentation, manifest expansion."""

import numpy as np
import pytest

from svda import features
from svda.dataio import Waveform
from svda.errors import IncompletePlan, InvalidFactor, TooShort
from svda.features import (
    AUGMENT_KINDS,
    AugmentationPlan,
    FbankConfig,
    FeatureMatrix,
    build_full_plan,
    cmn,
    crop,
    expand_manifest,
    fbank,
    iter_expanded_records,
    mel_filterbank,
    mix_noise,
    reverb,
    speed,
)

from conftest import make_manifest, make_tone


# --- fbank ---

def test_fbank_frame_count_two_seconds():
    wav = Waveform(samples=np.zeros(32000), sample_rate=16000)
    assert fbank(wav).n_frames == 198  # (32000 - 400) / 160 + 1


def test_fbank_silence_hits_floor():
    wav = Waveform(samples=np.zeros(16000), sample_rate=16000)
    out = fbank(wav)
    assert np.allclose(out.frames, np.log(1e-10))


def test_fbank_tone_argmax_bin():
    """A 1 kHz tone must peak in the mel filter whose center is nearest 1 kHz."""
    config = FbankConfig()
    out = fbank(make_tone(1000.0), config)
    mean_spectrum = out.frames.mean(axis=0)

    # independent reference: locate the filter center closest to 1 kHz on
    # the mel axis used for the bank
    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    low, high = hz_to_mel(config.fmin), hz_to_mel(config.fmax)
    centers_mel = np.linspace(low, high, config.n_mels + 2)[1:-1]
    expected = int(np.argmin(np.abs(centers_mel - hz_to_mel(1000.0))))
    assert abs(int(np.argmax(mean_spectrum)) - expected) <= 1


def test_fbank_too_short():
    wav = Waveform(samples=np.zeros(100), sample_rate=16000)
    with pytest.raises(TooShort):
        fbank(wav)


def test_mel_filterbank_shape_and_coverage():
    bank = mel_filterbank(FbankConfig())
    assert bank.shape == (64, 257)
    assert (bank >= 0).all()
    assert (bank.sum(axis=1) > 0).all()


# --- cmn ---

def test_cmn_constant_matrix():
    feat = FeatureMatrix(frames=np.full((10, 64), 3.7))
    assert np.allclose(cmn(feat).frames, 0.0)


def test_cmn_idempotent(rng):
    feat = FeatureMatrix(frames=rng.standard_normal((50, 64)))
    once = cmn(feat)
    twice = cmn(once)
    np.testing.assert_allclose(once.frames, twice.frames, atol=1e-12)


def test_cmn_zero_means(rng):
    out = cmn(FeatureMatrix(frames=rng.standard_normal((200, 64))))
    assert np.abs(out.frames.mean(axis=0)).max() < 1e-6


# --- crop ---

def test_crop_identity(rng):
    feat = FeatureMatrix(frames=rng.standard_normal((198, 64)))
    out = crop(feat, 198, rng=np.random.default_rng(0))
    np.testing.assert_array_equal(out.frames, feat.frames)


def test_crop_wrap():
    values = np.arange(100, dtype=np.float64)[:, None] * np.ones((1, 64))
    out = crop(FeatureMatrix(frames=values), 200, rng=np.random.default_rng(0))
    np.testing.assert_array_equal(out.frames[:100], values)
    np.testing.assert_array_equal(out.frames[100:], values)


def test_crop_deterministic(rng):
    feat = FeatureMatrix(frames=rng.standard_normal((500, 64)))
    a = crop(feat, 198, rng=np.random.default_rng(7))
    b = crop(feat, 198, rng=np.random.default_rng(7))
    np.testing.assert_array_equal(a.frames, b.frames)
    assert a.frames.shape == (198, 64)


# --- noise / reverb / speed ---

def test_mix_noise_equal_power_zero_db(rng):
    sig = Waveform(samples=rng.standard_normal(8000) * 0.1, sample_rate=16000)
    p_sig = float(np.mean(sig.samples**2))
    noise = Waveform(samples=rng.standard_normal(8000), sample_rate=16000)
    noise.samples *= np.sqrt(p_sig / np.mean(noise.samples**2))
    out = mix_noise(sig, noise, snr_db=0.0, rng=np.random.default_rng(0))
    residual = out.samples - sig.samples
    assert np.mean(residual**2) == pytest.approx(p_sig, rel=1e-6)


def test_mix_noise_scale_arithmetic():
    # signal power 0.04, noise power 0.01, snr 6 dB -> scale ~ 1.0024
    scale = np.sqrt(0.04 / (0.01 * 10 ** 0.6))
    assert scale == pytest.approx(1.0024, abs=5e-4)
    sig = Waveform(samples=np.full(4000, 0.2), sample_rate=16000)
    noise = Waveform(samples=np.tile([0.1, -0.1], 2000).astype(np.float64),
                     sample_rate=16000)
    out = mix_noise(sig, noise, snr_db=6.0, rng=np.random.default_rng(0))
    residual = out.samples - sig.samples
    assert np.abs(residual).max() == pytest.approx(0.1 * scale, rel=1e-9)


def test_mix_noise_measured_snr(rng):
    for snr_db in (-5.0, 0.0, 10.0, 20.0):
        sig = Waveform(samples=rng.standard_normal(16000) * 0.05,
                       sample_rate=16000)
        noise = Waveform(samples=rng.standard_normal(20000) * 0.3,
                         sample_rate=16000)
        out = mix_noise(sig, noise, snr_db=snr_db, rng=np.random.default_rng(1))
        residual = out.samples - sig.samples
        measured = 10.0 * np.log10(np.mean(sig.samples**2) / np.mean(residual**2))
        assert abs(measured - snr_db) < 0.1


def test_reverb_unit_impulse(rng):
    sig = Waveform(samples=rng.standard_normal(4000) * 0.1, sample_rate=16000)
    rir = Waveform(samples=np.array([1.0, 0.0, 0.0]), sample_rate=16000)
    out = reverb(sig, rir)
    np.testing.assert_allclose(out.samples, sig.samples, atol=1e-12)


def test_reverb_delayed_impulse(rng):
    sig = Waveform(samples=rng.standard_normal(4000) * 0.1, sample_rate=16000)
    delay = 5
    rir = Waveform(samples=np.eye(1, 16, delay).ravel(), sample_rate=16000)
    out = reverb(sig, rir)
    np.testing.assert_allclose(out.samples[delay:], sig.samples[:-delay],
                               atol=1e-12)
    np.testing.assert_allclose(out.samples[:delay], 0.0, atol=1e-12)


def test_reverb_matches_brute_force(rng):
    sig = rng.standard_normal(500) * 0.05
    rir = rng.standard_normal(32) * 0.2
    rir[0] = 1.0
    out = reverb(Waveform(samples=sig, sample_rate=16000),
                 Waveform(samples=rir, sample_rate=16000))
    full = np.zeros(len(sig) + len(rir) - 1)
    for i, s in enumerate(sig):
        for j, h in enumerate(rir):
            full[i + j] += s * h
    truncated = full[: len(sig)]
    expected = truncated * (np.abs(sig).max() / np.abs(truncated).max())
    np.testing.assert_allclose(out.samples, expected, atol=1e-6)


def test_speed_identity(rng):
    sig = Waveform(samples=rng.standard_normal(2000), sample_rate=16000)
    np.testing.assert_array_equal(speed(sig, 1.0).samples, sig.samples)


def test_speed_length():
    sig = Waveform(samples=np.zeros(16000), sample_rate=16000)
    assert len(speed(sig, 0.9)) == 17778  # round(16000 / 0.9)
    assert len(speed(sig, 1.1)) == round(16000 / 1.1)


def test_speed_linear_ramp():
    ramp = Waveform(samples=np.linspace(0.0, 1.0, 1000), sample_rate=16000)
    out = speed(ramp, 0.9)
    expected = np.linspace(0.0, 1.0, 1000)
    resampled = np.interp(np.linspace(0, 999, len(out)), np.arange(1000),
                          expected)
    assert np.abs(np.diff(out.samples, 2)).max() < 1e-6  # still affine
    assert out.samples[0] == pytest.approx(0.0, abs=1e-9)
    assert out.samples[-1] == pytest.approx(1.0, rel=1e-3)


def test_speed_bad_factor():
    sig = Waveform(samples=np.zeros(100), sample_rate=16000)
    with pytest.raises(InvalidFactor):
        speed(sig, 0.0)
    with pytest.raises(InvalidFactor):
        speed(sig, -1.0)


# --- augmentation bookkeeping ---

def test_expand_manifest_unit_scale():
    expanded = expand_manifest(make_manifest(1))
    assert len(expanded) == 9
    assert len(expanded.speakers()) == 3


def test_expand_speaker_partition():
    manifest = make_manifest(4, speaker="spkA")
    expanded = expand_manifest(manifest)
    base = "spkA"
    assert expanded.speakers() == {base, f"{base}#sp0.9", f"{base}#sp1.1"}
    by_source = {}
    for rec in expanded.records:
        source_id = rec.id.split("#")[0]
        by_source.setdefault(source_id, set()).add(rec.speaker)
    for speakers in by_source.values():
        assert speakers == {base, f"{base}#sp0.9", f"{base}#sp1.1"}


def test_expand_counts_scale_linearly():
    manifest = make_manifest(12)
    expanded = expand_manifest(manifest)
    assert len(expanded) == 12 * 9
    assert len(expanded.speakers()) == len(manifest.speakers()) * 3


def test_iter_expanded_matches_expand(rng):
    manifest = make_manifest(5)
    streamed = list(iter_expanded_records(manifest))
    assert streamed == expand_manifest(manifest).records


def test_incomplete_plan_rejected():
    manifest = make_manifest(2)
    plan = build_full_plan(manifest)
    plan = AugmentationPlan(entries=[e for e in plan.entries
                                     if e.kind != "reverb"])
    with pytest.raises(IncompletePlan):
        list(iter_expanded_records(manifest, plan))


def test_augment_kinds_inventory():
    assert len(AUGMENT_KINDS) == 9
    assert AUGMENT_KINDS[0] == "orig"
    assert {"speed_0.9", "speed_1.1"} <= set(AUGMENT_KINDS)


def test_derive_rng_stable():
    a = features.derive_rng(3, "u1", "noise").standard_normal(4)
    b = features.derive_rng(3, "u1", "noise").standard_normal(4)
    c = features.derive_rng(3, "u1", "music").standard_normal(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
