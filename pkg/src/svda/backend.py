"""Scoring back-end: cosine trials, sub-mean centering, duration-based
symmetric score calibration, calibration-trial generation, and equal-weight
fusion.

Calibration fits a regularized logistic regression on (score, standardized
min-duration) and emits unsquashed log-odds, so downstream EER/MinDCF are
unchanged by the monotone part while fusion gets a linear scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import EmbeddingSet, Manifest, ScoreSet, TrialList, _read_text, _write_text
from .errors import (
    AlignmentError,
    DegenerateLabels,
    NormError,
    NotEnoughData,
    ParseError,
    ShapeError,
    UnknownUtterance,
)


@dataclass
class CalibrationModel:
    w0: float
    w1: float
    w2: float
    quality_mean: float
    quality_std: float

    def __post_init__(self):
        if self.quality_std <= 0:
            raise ValueError("quality_std must be positive")
        for value in (self.w0, self.w1, self.w2, self.quality_mean, self.quality_std):
            if not np.isfinite(value):
                raise ValueError("calibration model has non-finite coefficients")


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < 1e-300 or nb < 1e-300:
        raise NormError("cosine of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def sub_mean(embedding_set: EmbeddingSet, pool: EmbeddingSet) -> EmbeddingSet:
    """Subtract the pool's mean embedding from every vector in the set."""
    if embedding_set.dim != pool.dim:
        raise ShapeError(f"dim mismatch: {embedding_set.dim} vs {pool.dim}")
    if len(pool) == 0:
        raise ShapeError("empty centering pool")
    mean = pool.matrix().astype(np.float64).mean(axis=0)
    entries = [(uid, np.asarray(vec, dtype=np.float64) - mean)
               for uid, vec in embedding_set.entries]
    return EmbeddingSet(dim=embedding_set.dim, entries=entries)


def score_trials(embeddings: EmbeddingSet, trials: TrialList) -> ScoreSet:
    vectors = embeddings.lookup()
    entries = []
    for enroll, test, _ in trials.trials:
        for uid in (enroll, test):
            if uid not in vectors:
                raise UnknownUtterance(f"no embedding for {uid!r}")
        entries.append((enroll, test, cosine(vectors[enroll], vectors[test])))
    return ScoreSet(entries)


def make_calibration_trials(manifest: Manifest, rng: np.random.Generator,
                            n_target: int = 10_000,
                            n_nontarget: int = 10_000) -> TrialList:
    """Sample labeled same/cross-speaker pairs without replacement."""
    by_speaker: dict[str, list[str]] = {}
    for rec in manifest.records:
        if rec.labeled and rec.speaker is not None:
            by_speaker.setdefault(rec.speaker, []).append(rec.id)
    all_ids = [uid for ids in by_speaker.values() for uid in ids]
    n = len(all_ids)

    same_pairs = [
        (ids[i], ids[j])
        for ids in by_speaker.values()
        for i in range(len(ids))
        for j in range(i + 1, len(ids))
    ]
    n_cross_available = n * (n - 1) // 2 - len(same_pairs)
    if n_target > len(same_pairs) or n_nontarget > n_cross_available:
        raise NotEnoughData(
            f"requested {n_target}/{n_nontarget} pairs, "
            f"have {len(same_pairs)}/{n_cross_available}"
        )

    target_idx = rng.choice(len(same_pairs), size=n_target, replace=False)
    trials = [(same_pairs[i][0], same_pairs[i][1], True) for i in target_idx]

    speaker_of = {uid: spk for spk, ids in by_speaker.items() for uid in ids}
    chosen: set[tuple[str, str]] = set()
    max_draws = 50 * (n_nontarget + 10)
    draws = 0
    while len(chosen) < n_nontarget:
        draws += 1
        if draws > max_draws:
            raise NotEnoughData("cross-speaker pair sampling did not converge")
        i, j = rng.integers(0, n, size=2)
        if i == j:
            continue
        a, b = all_ids[int(i)], all_ids[int(j)]
        if speaker_of[a] == speaker_of[b]:
            continue
        pair = (a, b) if a < b else (b, a)
        if pair in chosen:
            continue
        chosen.add(pair)
        trials.append((pair[0], pair[1], False))
    return TrialList(trials)


def _quality(trials: TrialList, durations: dict[str, float]) -> np.ndarray:
    values = []
    for enroll, test, _ in trials.trials:
        for uid in (enroll, test):
            if uid not in durations:
                raise UnknownUtterance(f"no duration for {uid!r}")
        values.append(min(durations[enroll], durations[test]))
    return np.array(values, dtype=np.float64)


def train_calibration(scores: ScoreSet, trials: TrialList,
                      durations: dict[str, float], max_iters: int = 1000,
                      l2: float = 1e-4, lr: float = 0.1) -> CalibrationModel:
    """Fit sigma(w0 + w1*s + w2*q_hat) to the trial labels by gradient descent."""
    if len(scores) != len(trials):
        raise AlignmentError("scores and trials have different lengths")
    y = np.array(trials.labels(), dtype=np.float64)
    if y.min() == y.max():
        raise DegenerateLabels("calibration needs both target and non-target trials")
    s = scores.scores()
    q = _quality(trials, durations)
    q_mean = float(q.mean())
    q_std = float(q.std())
    if q_std <= 0:
        q_std = 1.0
    features = np.column_stack([np.ones_like(s), s, (q - q_mean) / q_std])

    w = np.zeros(3)
    reg_mask = np.array([0.0, 1.0, 1.0])  # no penalty on the offset
    loss = _logistic_loss(features, y, w, l2, reg_mask)
    for _ in range(max_iters):
        p = _sigmoid(features @ w)
        grad = features.T @ (p - y) / len(y) + 2.0 * l2 * reg_mask * w
        candidate = w - lr * grad
        new_loss = _logistic_loss(features, y, candidate, l2, reg_mask)
        if new_loss > loss:
            lr *= 0.5
            if lr < 1e-12:
                break
            continue
        w, loss = candidate, new_loss
    return CalibrationModel(w0=float(w[0]), w1=float(w[1]), w2=float(w[2]),
                            quality_mean=q_mean, quality_std=q_std)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _logistic_loss(features, y, w, l2, reg_mask):
    z = features @ w
    # log(1 + exp(-z*sign)) written stably
    margin = np.where(y > 0.5, z, -z)
    ce = np.mean(np.logaddexp(0.0, -margin))
    return float(ce + l2 * np.sum(reg_mask * w**2))


def apply_calibration(model: CalibrationModel, scores: ScoreSet,
                      durations: dict[str, float]) -> ScoreSet:
    entries = []
    for enroll, test, s in scores.entries:
        for uid in (enroll, test):
            if uid not in durations:
                raise UnknownUtterance(f"no duration for {uid!r}")
        q_hat = (min(durations[enroll], durations[test]) - model.quality_mean) / model.quality_std
        entries.append((enroll, test, model.w0 + model.w1 * s + model.w2 * q_hat))
    return ScoreSet(entries)


def fuse(score_sets: list[ScoreSet]) -> ScoreSet:
    """Elementwise mean of score sets aligned to the same trial list."""
    if not score_sets:
        raise AlignmentError("nothing to fuse")
    pairs = score_sets[0].pairs()
    for other in score_sets[1:]:
        if other.pairs() != pairs:
            raise AlignmentError("score sets are not aligned to the same trials")
    stacked = np.stack([s.scores() for s in score_sets])
    fused = stacked.mean(axis=0)
    return ScoreSet([(e, t, float(v)) for (e, t), v in zip(pairs, fused)])


def write_calibration(model: CalibrationModel, path) -> None:
    fields = (model.w0, model.w1, model.w2, model.quality_mean, model.quality_std)
    _write_text(path, "\t".join(repr(v) for v in fields) + "\n")


def read_calibration(path) -> CalibrationModel:
    from pathlib import Path

    cols = _read_text(path).split()
    if len(cols) != 5:
        raise ParseError(f"{path}: expected 5 fields, got {len(cols)}")
    w0, w1, w2, q_mean, q_std = (float(c) for c in cols)
    return CalibrationModel(w0=w0, w1=w1, w2=w2, quality_mean=q_mean, quality_std=q_std)
