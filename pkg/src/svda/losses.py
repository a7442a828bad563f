"""Angular-margin and triplet losses with analytic gradients.

All losses L2-normalize their inputs internally, reduce by the batch mean,
and return gradients w.r.t. the raw (unnormalized) embeddings and classifier
weights. Gradients are exact up to the usual subgradient conventions at the
hinge boundary and at sub-center argmax ties (lowest index wins).

Margin logit for the target class: s*cos(theta + m) while theta + m <= pi,
with the monotone fallback s*(cos(theta) - m*sin(m)) beyond it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import EmptyBatch, LabelError, NormError, ShapeError

_COS_CLAMP = 1.0 - 1e-7


@dataclass
class ClassifierHead:
    weights: np.ndarray  # (n_classes, n_subcenters, dim)
    scale: float = 32.0
    margin: float = 0.25

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 3:
            raise ShapeError("head weights must be (n_classes, n_subcenters, dim)")
        if self.scale <= 0:
            raise ValueError("scale must be positive")
        if not (0.0 <= self.margin <= 0.5):
            raise ValueError("margin must lie in [0, 0.5]")

    @property
    def n_classes(self) -> int:
        return self.weights.shape[0]

    @property
    def n_subcenters(self) -> int:
        return self.weights.shape[1]


def init_head(n_classes: int, dim: int, n_subcenters: int = 1, scale: float = 32.0,
              margin: float = 0.25, seed: int = 0) -> ClassifierHead:
    rng = np.random.default_rng(seed)
    weights = rng.standard_normal((n_classes, n_subcenters, dim))
    return ClassifierHead(weights=weights, scale=scale, margin=margin)


@dataclass
class LossOutput:
    loss: float
    grad_embeddings: np.ndarray
    grad_weights: Optional[np.ndarray] = None


@dataclass
class TripletOutput:
    loss: float
    grad_anchor: np.ndarray
    grad_positive: np.ndarray
    grad_negative: np.ndarray


@dataclass
class JointOutput:
    loss: float
    source: Optional[LossOutput]
    target_triplet: Optional[TripletOutput]
    target_labeled: Optional[LossOutput]


def _normalize(x: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms < 1e-12):
        raise NormError(f"zero-norm vector in {what}")
    return x / norms, norms


def _normalize_backward(grad_unit: np.ndarray, unit: np.ndarray,
                        norms: np.ndarray) -> np.ndarray:
    # d(x/|x|) pullback: project onto the tangent of the sphere, then scale
    radial = np.sum(grad_unit * unit, axis=-1, keepdims=True)
    return (grad_unit - radial * unit) / norms


def _margin_logits_and_slope(cos_target: np.ndarray, s: float, m: float):
    """Target logit psi(cos) and dpsi/dcos for the chosen margin rule."""
    cos_t = np.clip(cos_target, -_COS_CLAMP, _COS_CLAMP)
    sin_t = np.sqrt(1.0 - cos_t**2)
    # theta + m <= pi  <=>  cos(theta) >= cos(pi - m)
    easy = cos_t >= np.cos(np.pi - m)
    with_margin = cos_t * np.cos(m) - sin_t * np.sin(m)
    fallback = cos_t - m * np.sin(m)
    logits = s * np.where(easy, with_margin, fallback)
    slope = s * np.where(easy, np.cos(m) + np.sin(m) * cos_t / sin_t, 1.0)
    return logits, slope


def _aam_common(embeddings: np.ndarray, labels: np.ndarray, head: ClassifierHead,
                margin: float):
    """Shared forward/backward for plain and sub-center AAM-softmax.

    Returns (loss, grad_embeddings, grad_weights).
    """
    x = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if x.ndim != 2:
        raise ShapeError("embeddings must be (B, dim)")
    batch, dim = x.shape
    if batch < 1:
        raise EmptyBatch("empty embedding batch")
    n_classes, n_sub, w_dim = head.weights.shape
    if w_dim != dim:
        raise ShapeError(f"embedding dim {dim} != head dim {w_dim}")
    if labels.shape != (batch,):
        raise ShapeError("labels must be (B,)")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise LabelError("label outside [0, n_classes)")

    x_unit, x_norms = _normalize(x, "embeddings")
    w_flat = head.weights.reshape(n_classes * n_sub, dim)
    w_unit, w_norms = _normalize(w_flat, "head weights")

    cos_all = np.clip(x_unit @ w_unit.T, -_COS_CLAMP, _COS_CLAMP)
    cos_sub = cos_all.reshape(batch, n_classes, n_sub)
    sub_idx = np.argmax(cos_sub, axis=2)  # ties: lowest index
    cos = np.take_along_axis(cos_sub, sub_idx[:, :, None], axis=2)[:, :, 0]

    rows = np.arange(batch)
    cos_target = cos[rows, labels]
    target_logits, target_slope = _margin_logits_and_slope(cos_target, head.scale, margin)
    logits = head.scale * cos
    logits[rows, labels] = target_logits

    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    loss = float(-np.mean(shifted[rows, labels] - np.log(exp.sum(axis=1))))

    grad_logits = probs.copy()
    grad_logits[rows, labels] -= 1.0
    grad_logits /= batch

    grad_cos = grad_logits * head.scale
    grad_cos[rows, labels] = grad_logits[rows, labels] * target_slope

    # scatter per-class grads onto the argmax subcenter
    grad_cos_sub = np.zeros((batch, n_classes, n_sub))
    np.put_along_axis(grad_cos_sub, sub_idx[:, :, None], grad_cos[:, :, None], axis=2)
    grad_cos_flat = grad_cos_sub.reshape(batch, n_classes * n_sub)

    grad_x_unit = grad_cos_flat @ w_unit
    grad_w_unit = grad_cos_flat.T @ x_unit

    grad_x = _normalize_backward(grad_x_unit, x_unit, x_norms)
    grad_w = _normalize_backward(grad_w_unit, w_unit, w_norms)
    return loss, grad_x, grad_w.reshape(head.weights.shape)


def aam_softmax(embeddings, labels, head: ClassifierHead,
                margin_override: Optional[float] = None) -> LossOutput:
    """Additive angular margin softmax (single weight vector per class)."""
    if head.n_subcenters != 1:
        raise ShapeError("aam_softmax requires n_subcenters == 1")
    margin = head.margin if margin_override is None else margin_override
    loss, grad_x, grad_w = _aam_common(embeddings, labels, head, margin)
    return LossOutput(loss=loss, grad_embeddings=grad_x, grad_weights=grad_w)


def subcenter_aam_softmax(embeddings, labels, head: ClassifierHead,
                          margin_override: Optional[float] = None) -> LossOutput:
    """AAM-softmax where each class logit is the max over its 2 subcenters."""
    if head.n_subcenters < 2:
        raise ShapeError("subcenter_aam_softmax requires n_subcenters >= 2")
    margin = head.margin if margin_override is None else margin_override
    loss, grad_x, grad_w = _aam_common(embeddings, labels, head, margin)
    return LossOutput(loss=loss, grad_embeddings=grad_x, grad_weights=grad_w)


def triplet(anchor, positive, negative, margin_t: float = 0.2) -> TripletOutput:
    """Cosine-distance triplet hinge: mean of max(0, d(a,p) - d(a,n) + m)."""
    a = np.asarray(anchor, dtype=np.float64)
    p = np.asarray(positive, dtype=np.float64)
    n = np.asarray(negative, dtype=np.float64)
    if not (a.shape == p.shape == n.shape) or a.ndim != 2:
        raise ShapeError("anchor/positive/negative must share a (B, dim) shape")
    if a.shape[0] < 1:
        raise EmptyBatch("empty triplet batch")
    a_unit, a_norms = _normalize(a, "anchor")
    p_unit, p_norms = _normalize(p, "positive")
    n_unit, n_norms = _normalize(n, "negative")

    sim_ap = np.sum(a_unit * p_unit, axis=1)
    sim_an = np.sum(a_unit * n_unit, axis=1)
    per_item = sim_an - sim_ap + margin_t  # = d(a,p) - d(a,n) + m
    active = per_item > 0
    loss = float(np.mean(np.maximum(0.0, per_item)))

    batch = a.shape[0]
    weight = active.astype(np.float64)[:, None] / batch
    grad_a = _normalize_backward(weight * (n_unit - p_unit), a_unit, a_norms)
    grad_p = _normalize_backward(-weight * a_unit, p_unit, p_norms)
    grad_n = _normalize_backward(weight * a_unit, n_unit, n_norms)
    return TripletOutput(loss=loss, grad_anchor=grad_a, grad_positive=grad_p,
                         grad_negative=grad_n)


def joint_loss(src_batch, tgt_triplet_batch, tgt_labeled_batch,
               src_head: Optional[ClassifierHead], tgt_head: Optional[ClassifierHead],
               triplet_margin: float = 0.2,
               weights: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> JointOutput:
    """Sum of source AAM, target triplet, and labeled-target AAM components.

    Each batch may be None (contributes 0). src_batch / tgt_labeled_batch are
    (embeddings, labels) pairs; tgt_triplet_batch is (anchor, positive,
    negative).
    """
    w_src, w_tri, w_lab = weights
    source = target_triplet = target_labeled = None
    total = 0.0
    if src_batch is not None:
        source = aam_softmax(src_batch[0], src_batch[1], src_head)
        _scale_loss_output(source, w_src)
        total += source.loss
    if tgt_triplet_batch is not None:
        target_triplet = triplet(*tgt_triplet_batch, margin_t=triplet_margin)
        target_triplet.loss *= w_tri
        target_triplet.grad_anchor *= w_tri
        target_triplet.grad_positive *= w_tri
        target_triplet.grad_negative *= w_tri
        total += target_triplet.loss
    if tgt_labeled_batch is not None:
        target_labeled = aam_softmax(tgt_labeled_batch[0], tgt_labeled_batch[1], tgt_head)
        _scale_loss_output(target_labeled, w_lab)
        total += target_labeled.loss
    if source is None and target_triplet is None and target_labeled is None:
        raise EmptyBatch("all joint-loss components are empty")
    return JointOutput(loss=total, source=source, target_triplet=target_triplet,
                       target_labeled=target_labeled)


def _scale_loss_output(out: LossOutput, weight: float) -> None:
    if weight != 1.0:
        out.loss *= weight
        out.grad_embeddings *= weight
        if out.grad_weights is not None:
            out.grad_weights *= weight
