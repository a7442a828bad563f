"""Training hyperparameter schedules and the plain SGD-with-weight-decay step.

Every schedule is a pure function of (config, progress), so the stated
constants are directly testable: lr 0.1 decayed by 0.9 every 50,000 batches
in initial training, fixed 1e-4 in large-margin fine-tuning, fixed 1e-3 in
adaptation fine-tuning; margin warmed up linearly over the first two epochs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError

PHASES = ("initial", "large_margin_finetune", "adaptation_finetune")
TRACKS = ("track1", "track3")

SAMPLE_RATE = 16000
FRAME_LENGTH = 400
FRAME_SHIFT = 160


@dataclass
class TrainPhaseConfig:
    phase: str = "initial"
    track: str = "track1"
    lr0: float = 0.1
    lr_decay: float = 0.9
    decay_interval_batches: int = 50_000
    batch_size: int = 128
    weight_decay: float = 2e-5
    margin_start: float = 0.0
    margin_end: float = 0.25
    warmup_epochs: float = 2.0
    crop_seconds: float = 2.0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"unknown phase {self.phase!r}")
        if self.track not in TRACKS:
            raise ConfigError(f"unknown track {self.track!r}")
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if not (0 <= self.margin_start <= self.margin_end):
            raise ConfigError("need 0 <= margin_start <= margin_end")


# (track, phase) -> (lr0, margin_end, crop_seconds)
_PHASE_DEFAULTS = {
    ("track1", "initial"): (0.1, 0.25, 2.0),
    ("track1", "large_margin_finetune"): (1e-4, 0.35, 4.0),
    ("track1", "adaptation_finetune"): (1e-3, 0.25, 2.0),
    ("track3", "initial"): (0.1, 0.15, 2.0),
    ("track3", "large_margin_finetune"): (1e-4, 0.25, 4.0),
    ("track3", "adaptation_finetune"): (1e-3, 0.15, 2.0),
}


def phase_config(phase: str, track: str = "track1", **overrides) -> TrainPhaseConfig:
    """TrainPhaseConfig pre-filled with the published constants for a phase."""
    if (track, phase) not in _PHASE_DEFAULTS:
        raise ConfigError(f"unknown phase/track {phase!r}/{track!r}")
    lr0, margin_end, crop_seconds = _PHASE_DEFAULTS[(track, phase)]
    margin_start = 0.0 if phase == "initial" else margin_end
    kwargs = dict(
        phase=phase,
        track=track,
        lr0=lr0,
        margin_start=margin_start,
        margin_end=margin_end,
        crop_seconds=crop_seconds,
    )
    kwargs.update(overrides)
    return TrainPhaseConfig(**kwargs)


def lr_at(config: TrainPhaseConfig, batch_index: int) -> float:
    if batch_index < 0:
        raise ConfigError("batch_index must be >= 0")
    if config.phase == "initial":
        return config.lr0 * config.lr_decay ** (batch_index // config.decay_interval_batches)
    # both fine-tuning phases hold the learning rate constant
    return config.lr0


def margin_at(config: TrainPhaseConfig, epoch_progress: float) -> float:
    if epoch_progress < 0:
        raise ConfigError("epoch_progress must be >= 0")
    if config.phase != "initial":
        return config.margin_end
    ramp = min(1.0, epoch_progress / config.warmup_epochs)
    return config.margin_start + (config.margin_end - config.margin_start) * ramp


def seconds_to_frames(seconds: float) -> int:
    n_samples = int(round(seconds * SAMPLE_RATE))
    return (n_samples - FRAME_LENGTH) // FRAME_SHIFT + 1


def crop_frames(config: TrainPhaseConfig) -> int:
    return seconds_to_frames(config.crop_seconds)


def sgd_step(params: np.ndarray, grads: np.ndarray, lr: float,
             weight_decay: float = 0.0) -> np.ndarray:
    params = np.asarray(params)
    grads = np.asarray(grads)
    if params.shape != grads.shape:
        raise ShapeError(f"param shape {params.shape} != grad shape {grads.shape}")
    return params - lr * (grads + weight_decay * params)
