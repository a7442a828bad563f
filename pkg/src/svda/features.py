"""Acoustic front-end: log-Mel filterbanks with utterance-level CMN, training
crops, and the augmentation catalog (noise mixing, reverb, speed) together
with the 9-copy manifest expansion that treats speed-perturbed copies as new
speakers.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from .dataio import Manifest, UtteranceRecord, Waveform, _write_text
from .errors import (
    ConfigError,
    DegenerateNoise,
    DegenerateRir,
    IncompletePlan,
    InvalidFactor,
    ParseError,
    TooShort,
)

SAMPLE_RATE = 16000

# one original plus eight perturbed copies per source utterance
AUGMENT_KINDS = (
    "orig",
    "noise",
    "music",
    "babble",
    "reverb",
    "tempo_0.9",
    "tempo_1.1",
    "speed_0.9",
    "speed_1.1",
)

# kinds that change utterance duration by 1/factor
_RATE_FACTORS = {"tempo_0.9": 0.9, "tempo_1.1": 1.1, "speed_0.9": 0.9, "speed_1.1": 1.1}
# speed-perturbed copies become new speakers; tempo copies do not
_SPEAKER_FACTORS = {"speed_0.9": "0.9", "speed_1.1": "1.1"}


@dataclass
class FbankConfig:
    n_mels: int = 64
    frame_length: int = 400
    frame_shift: int = 160
    fft_size: int = 512
    window: str = "hamming"
    dither: float = 0.0
    floor: float = 1e-10
    fmin: float = 20.0
    fmax: float = 7600.0

    def __post_init__(self):
        if self.frame_length > self.fft_size:
            raise ConfigError("frame_length must not exceed fft_size")
        if self.window not in ("hamming", "hann", "rectangular"):
            raise ConfigError(f"unknown window {self.window!r}")


@dataclass
class FeatureMatrix:
    frames: np.ndarray  # (T, n_mels)
    frame_shift: int = 160

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ParseError("feature matrix must be (T, n_mels) with T >= 1")
        if not np.all(np.isfinite(self.frames)):
            raise ParseError("feature matrix contains non-finite entries")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(config: FbankConfig) -> np.ndarray:
    """Triangular mel filters as an (n_mels, fft_size//2 + 1) matrix."""
    n_bins = config.fft_size // 2 + 1
    mel_points = np.linspace(
        hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_mels + 2
    )
    hz_points = mel_to_hz(mel_points)
    bin_freqs = np.arange(n_bins) * SAMPLE_RATE / config.fft_size
    filters = np.zeros((config.n_mels, n_bins))
    for m in range(config.n_mels):
        left, center, right = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        up = (bin_freqs - left) / (center - left)
        down = (right - bin_freqs) / (right - center)
        filters[m] = np.maximum(0.0, np.minimum(up, down))
    return filters


def _window(config: FbankConfig) -> np.ndarray:
    n = config.frame_length
    if config.window == "hamming":
        return np.hamming(n)
    if config.window == "hann":
        return np.hanning(n)
    return np.ones(n)


def fbank(waveform: Waveform, config: FbankConfig = FbankConfig(),
          rng: Optional[np.random.Generator] = None) -> FeatureMatrix:
    """Log mel-filterbank energies, one row per frame."""
    samples = np.asarray(waveform.samples, dtype=np.float64)
    n = len(samples)
    if n < config.frame_length:
        raise TooShort(f"waveform of {n} samples is shorter than one frame")
    n_frames = (n - config.frame_length) // config.frame_shift + 1
    idx = (
        np.arange(config.frame_length)[None, :]
        + config.frame_shift * np.arange(n_frames)[:, None]
    )
    frames = samples[idx]
    if config.dither > 0:
        if rng is None:
            rng = np.random.default_rng(0)
        frames = frames + config.dither * rng.standard_normal(frames.shape)
    frames = frames * _window(config)
    spectrum = np.fft.rfft(frames, n=config.fft_size, axis=1)
    power = np.abs(spectrum) ** 2
    energies = power @ mel_filterbank(config).T
    return FeatureMatrix(
        frames=np.log(np.maximum(config.floor, energies)),
        frame_shift=config.frame_shift,
    )


def cmn(features: FeatureMatrix) -> FeatureMatrix:
    """Subtract the per-dimension mean over the whole utterance."""
    frames = features.frames - features.frames.mean(axis=0, keepdims=True)
    return FeatureMatrix(frames=frames, frame_shift=features.frame_shift)


def crop(features: FeatureMatrix, target_frames: int,
         rng: np.random.Generator) -> FeatureMatrix:
    """Random contiguous window of target_frames rows; short inputs wrap."""
    if target_frames < 1:
        raise ConfigError("target_frames must be >= 1")
    frames = features.frames
    t = frames.shape[0]
    if t < target_frames:
        reps = -(-target_frames // t)
        frames = np.tile(frames, (reps, 1))[:target_frames]
    else:
        offset = int(rng.integers(0, t - target_frames + 1))
        frames = frames[offset : offset + target_frames]
    return FeatureMatrix(frames=frames.copy(), frame_shift=features.frame_shift)


def mix_noise(waveform: Waveform, noise: Waveform, snr_db: float,
              rng: np.random.Generator) -> Waveform:
    """Add noise scaled to the requested SNR; output clipped to [-1, 1].

    Shorter noise is looped (not zero-padded) so the measured SNR stays
    stationary; longer noise contributes a random contiguous window.
    """
    if not np.isfinite(snr_db):
        raise ConfigError("snr_db must be finite")
    signal = np.asarray(waveform.samples, dtype=np.float64)
    noise_samples = np.asarray(noise.samples, dtype=np.float64)
    n = len(signal)
    if len(noise_samples) < n:
        reps = -(-n // len(noise_samples))
        noise_samples = np.tile(noise_samples, reps)[:n]
    elif len(noise_samples) > n:
        offset = int(rng.integers(0, len(noise_samples) - n + 1))
        noise_samples = noise_samples[offset : offset + n]
    p_signal = float(np.mean(signal**2))
    p_noise = float(np.mean(noise_samples**2))
    if p_noise <= 0:
        raise DegenerateNoise("noise has zero power")
    scale = np.sqrt(p_signal / (p_noise * 10.0 ** (snr_db / 10.0)))
    mixed = np.clip(signal + scale * noise_samples, -1.0, 1.0)
    return Waveform(samples=mixed, sample_rate=waveform.sample_rate)


def reverb(waveform: Waveform, rir: Waveform) -> Waveform:
    """Convolve with a room impulse response, keep input length and peak."""
    rir_samples = np.asarray(rir.samples, dtype=np.float64)
    if not np.any(rir_samples):
        raise DegenerateRir("all-zero impulse response")
    signal = np.asarray(waveform.samples, dtype=np.float64)
    out = np.convolve(signal, rir_samples)[: len(signal)]
    peak_in = float(np.max(np.abs(signal)))
    peak_out = float(np.max(np.abs(out)))
    if peak_out > 0:
        out = out * (peak_in / peak_out)
    return Waveform(samples=out, sample_rate=waveform.sample_rate)


def speed(waveform: Waveform, factor: float) -> Waveform:
    """Time-axis resampling by linear interpolation (pitch shifts with speed)."""
    if factor <= 0:
        raise InvalidFactor(f"speed factor must be positive, got {factor}")
    signal = np.asarray(waveform.samples, dtype=np.float64)
    n = len(signal)
    out_len = int(round(n / factor))
    positions = np.minimum(np.arange(out_len) * factor, n - 1)
    out = np.interp(positions, np.arange(n), signal)
    return Waveform(samples=out, sample_rate=waveform.sample_rate)


# --- augmentation plans and manifest expansion ---

@dataclass
class PlanEntry:
    utt_id: str
    kind: str
    asset: Optional[str] = None
    snr_db: Optional[float] = None

    def __post_init__(self):
        if self.kind not in AUGMENT_KINDS:
            raise IncompletePlan(f"unknown augmentation kind {self.kind!r}")


@dataclass
class AugmentationPlan:
    entries: list[PlanEntry] = field(default_factory=list)

    def by_utterance(self) -> dict[str, list[PlanEntry]]:
        grouped: dict[str, list[PlanEntry]] = {}
        for entry in self.entries:
            grouped.setdefault(entry.utt_id, []).append(entry)
        return grouped


# default SNR windows, one per additive kind
_DEFAULT_SNRS = {"noise": 10.0, "music": 8.0, "babble": 15.0}


def build_full_plan(manifest: Manifest, assets: Optional[dict[str, str]] = None,
                    global_seed: int = 0) -> AugmentationPlan:
    """One entry per (utterance, kind) with per-utterance deterministic SNRs."""
    assets = assets or {}
    entries = []
    for rec in manifest.records:
        for kind in AUGMENT_KINDS:
            snr = None
            if kind in _DEFAULT_SNRS:
                jitter = derive_rng(global_seed, rec.id, kind).uniform(-5.0, 5.0)
                snr = _DEFAULT_SNRS[kind] + jitter
            entries.append(
                PlanEntry(utt_id=rec.id, kind=kind, asset=assets.get(kind), snr_db=snr)
            )
    return AugmentationPlan(entries)


def derive_rng(global_seed: int, utt_id: str, kind: str) -> np.random.Generator:
    """Per-(utterance, kind) RNG so parallel augmentation stays deterministic."""
    digest = hashlib.sha256(f"{global_seed}\x00{utt_id}\x00{kind}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def write_plan(plan: AugmentationPlan, path) -> None:
    lines = ["\t".join(("utt_id", "kind", "asset", "snr_db"))]
    for entry in plan.entries:
        lines.append(
            "\t".join(
                [
                    entry.utt_id,
                    entry.kind,
                    entry.asset or "",
                    "" if entry.snr_db is None else repr(entry.snr_db),
                ]
            )
        )
    _write_text(path, "\n".join(lines) + "\n")


def _expanded_record(rec: UtteranceRecord, entry: PlanEntry) -> UtteranceRecord:
    kind = entry.kind
    if kind == "orig":
        return rec
    speaker = rec.speaker
    if speaker is not None and kind in _SPEAKER_FACTORS:
        speaker = f"{speaker}#sp{_SPEAKER_FACTORS[kind]}"
    duration = rec.duration
    if kind in _RATE_FACTORS:
        duration = rec.duration / _RATE_FACTORS[kind]
    return UtteranceRecord(
        id=f"{rec.id}#{kind}",
        speaker=speaker,
        path=rec.path,
        duration=duration,
        domain=rec.domain,
        labeled=rec.labeled,
    )


def iter_expanded_records(manifest: Manifest,
                          plan: Optional[AugmentationPlan] = None) -> Iterator[UtteranceRecord]:
    """Stream the 9-copy expansion without materializing the output manifest."""
    grouped = plan.by_utterance() if plan is not None else None
    for rec in manifest.records:
        if grouped is None:
            entries = [PlanEntry(utt_id=rec.id, kind=kind) for kind in AUGMENT_KINDS]
        else:
            entries = grouped.get(rec.id, [])
            kinds = [e.kind for e in entries]
            if sorted(kinds) != sorted(AUGMENT_KINDS):
                raise IncompletePlan(
                    f"utterance {rec.id!r} has kinds {kinds}, expected all of {AUGMENT_KINDS}"
                )
        for entry in entries:
            yield _expanded_record(rec, entry)


def expand_manifest(manifest: Manifest, plan: Optional[AugmentationPlan] = None) -> Manifest:
    """Utterances x9, speakers x3: speed copies become `<spk>#sp0.9` / `<spk>#sp1.1`."""
    return Manifest(list(iter_expanded_records(manifest, plan)))
