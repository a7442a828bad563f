"""Detection-error tradeoff metrics: exact DET curve, EER and MinDCF.

Convention at a threshold t: a trial is accepted when its score >= t, so
fa(t) = P(score >= t | non-target) and miss(t) = P(score < t | target).
EER is found by linear interpolation between the two DET points bracketing
the miss = fa crossing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateLabels


@dataclass
class DcfParams:
    p_target: float = 0.05
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.p_target < 1.0):
            raise ValueError("p_target must be in (0, 1)")
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise ValueError("costs must be positive")


@dataclass
class DetCurve:
    thresholds: np.ndarray  # distinct scores plus -inf/+inf, ascending
    fa_rates: np.ndarray
    miss_rates: np.ndarray


def _split(scores, labels):
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be aligned 1-D arrays")
    targets = scores[labels]
    nontargets = scores[~labels]
    if len(targets) == 0 or len(nontargets) == 0:
        raise DegenerateLabels("need at least one target and one non-target trial")
    return targets, nontargets


def det_curve(scores, labels) -> DetCurve:
    targets, nontargets = _split(scores, labels)
    thresholds = np.concatenate(
        ([-np.inf], np.unique(np.concatenate((targets, nontargets))), [np.inf])
    )
    sorted_targets = np.sort(targets)
    sorted_nontargets = np.sort(nontargets)
    # miss: targets strictly below t; fa: non-targets at or above t
    miss = np.searchsorted(sorted_targets, thresholds, side="left") / len(targets)
    fa = (
        len(nontargets) - np.searchsorted(sorted_nontargets, thresholds, side="left")
    ) / len(nontargets)
    return DetCurve(thresholds=thresholds, fa_rates=fa, miss_rates=miss)


def eer(scores, labels) -> float:
    value, _ = eer_with_threshold(scores, labels)
    return value


def eer_with_threshold(scores, labels) -> tuple[float, float]:
    """EER plus the (interpolated) threshold at which miss = fa."""
    curve = det_curve(scores, labels)
    diff = curve.miss_rates - curve.fa_rates
    # diff goes from -1 at -inf to +1 at +inf; find the first sign change
    idx = int(np.argmax(diff >= 0))
    if diff[idx] == 0:
        return float(curve.miss_rates[idx]), float(curve.thresholds[idx])
    m1, m2 = curve.miss_rates[idx - 1], curve.miss_rates[idx]
    f1, f2 = curve.fa_rates[idx - 1], curve.fa_rates[idx]
    alpha = (f1 - m1) / ((m2 - m1) + (f1 - f2))
    value = m1 + alpha * (m2 - m1)
    t1, t2 = curve.thresholds[idx - 1], curve.thresholds[idx]
    threshold = t1 + alpha * (t2 - t1) if np.isfinite(t1) and np.isfinite(t2) else t2
    return float(value), float(threshold)


def min_dcf(scores, labels, params: DcfParams = DcfParams()) -> float:
    curve = det_curve(scores, labels)
    cost = (
        params.c_miss * params.p_target * curve.miss_rates
        + params.c_fa * (1.0 - params.p_target) * curve.fa_rates
    )
    norm = min(params.c_miss * params.p_target, params.c_fa * (1.0 - params.p_target))
    return float(np.min(cost) / norm)
