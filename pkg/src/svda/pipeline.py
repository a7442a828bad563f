"""Two-stage domain adaptation loop over a pluggable embedder.

Stage 1 trains the embedder's output layer jointly: source batches under
AAM-softmax, unlabeled target triplets (two crops of one utterance as
anchor/positive), and a small labeled-target AAM component. Stage 2 repeats
extract -> mini-batch k-means -> AHC -> filter -> supervised adapt ->
evaluate rounds until the validation EER stops improving.

The heavy convolutional stack never backpropagates: adaptation trains the
affine output map (and classifier heads) through the losses module, so every
gradient in the loop is finite-difference checkable. `SyntheticEmbedder` is
a desk-scale stand-in whose domain-shift transform provably shrinks toward
identity by a configured factor per adaptation call.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Protocol, Sequence

import numpy as np

from . import backend, clustering, losses, metrics, resunet, schedule
from .dataio import EmbeddingSet, ScoreSet, TrialList
from .errors import EmptyData
from .schedule import TrainPhaseConfig, phase_config


@dataclass
class LabeledData:
    utt_ids: list[str]
    labels: dict[str, int]
    n_classes: int


@dataclass
class ValidationSet:
    utt_ids: list[str]
    trials: TrialList  # labeled


@dataclass
class PipelineConfig:
    kmeans_k: int = 20_000
    ahc_candidates: tuple[int, ...] = (1000, 2000, 3000, 4000)
    min_count: int = 10
    max_rounds: int = 3
    converge_epsilon: float = 0.001  # absolute EER improvement, as a fraction
    seed: int = 0
    selected_n_clusters: Optional[int] = None
    kmeans_batch_size: int = 4096
    kmeans_max_iters: int = 100
    kmeans_tol: float = 1e-4
    adapt_steps: int = 60
    adapt_batch_size: int = 64
    dcf: metrics.DcfParams = field(default_factory=metrics.DcfParams)
    adapt_config: TrainPhaseConfig = field(
        default_factory=lambda: phase_config("adaptation_finetune", "track3")
    )

    def __post_init__(self):
        if not self.ahc_candidates:
            raise ValueError("ahc_candidates must be non-empty")
        if self.max_rounds < 1:
            raise ValueError("max_rounds must be >= 1")


@dataclass
class RoundReport:
    round: int
    n_clusters: int
    n_pseudo_speakers_after_filter: int
    eer: float  # fraction in [0, 1]
    min_dcf: float


class Embedder(Protocol):
    @property
    def dim(self) -> int: ...

    def extract(self, utt_id: str) -> np.ndarray: ...

    def adapt(self, embeddings: EmbeddingSet, labels: dict[str, int],
              config: TrainPhaseConfig) -> "Embedder": ...


def _stable_seed(*parts) -> int:
    digest = hashlib.sha256("\x00".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


class SyntheticEmbedder:
    """Test embedder with planted speakers and a shrinking domain shift.

    Target-domain utterances pass through a fixed orthogonal rotation plus
    bias, scaled by `shift_scale`; a small fraction of utterances is pulled
    toward another speaker's mean (channel confusion) with the same scale.
    `adapt` multiplies the scale by `shrink_factor` and ignores the pseudo
    labels, which makes round-over-round behavior predictable by
    construction.
    """

    def __init__(self, speaker_means: dict[str, np.ndarray],
                 utterances: dict[str, tuple[str, str]],
                 noise_scale: float = 0.06,
                 shift_scale: float = 1.0,
                 shift_angle: float = 0.4,
                 shrink_factor: float = 0.5,
                 corrupt_fraction: float = 0.04,
                 corrupt_strength: float = 3.0,
                 seed: int = 0,
                 output_weight: Optional[np.ndarray] = None,
                 output_bias: Optional[np.ndarray] = None):
        self.speaker_means = speaker_means
        self.utterances = utterances
        self.noise_scale = noise_scale
        self.shift_scale = shift_scale
        self.shift_angle = shift_angle
        self.shrink_factor = shrink_factor
        self.corrupt_fraction = corrupt_fraction
        self.corrupt_strength = corrupt_strength
        self.seed = seed
        d = next(iter(speaker_means.values())).shape[0]
        self._dim = d
        rng = np.random.default_rng(_stable_seed(seed, "shift"))
        basis, _ = np.linalg.qr(rng.standard_normal((d, d)))
        self._basis = basis
        self._bias = _unit(rng.standard_normal(d))
        self.output_weight = np.eye(d) if output_weight is None else output_weight
        self.output_bias = np.zeros(d) if output_bias is None else output_bias

    @property
    def dim(self) -> int:
        return self._dim

    def _rotate(self, v: np.ndarray, angle: float) -> np.ndarray:
        z = self._basis.T @ v
        half = self._dim // 2
        a, b = z[:half].copy(), z[half : 2 * half].copy()
        c, s = np.cos(angle), np.sin(angle)
        z[:half] = c * a - s * b
        z[half : 2 * half] = s * a + c * b
        return self._basis @ z

    def base_vector(self, utt_id: str, crop: int = 0) -> np.ndarray:
        speaker, domain = self.utterances[utt_id]
        rng = np.random.default_rng(_stable_seed(self.seed, utt_id, crop))
        v = self.speaker_means[speaker] + self.noise_scale * rng.standard_normal(self._dim)
        if domain == "target":
            corrupt_draw = np.random.default_rng(
                _stable_seed(self.seed, utt_id, "corrupt")
            )
            v = self._rotate(v, self.shift_angle * self.shift_scale)
            v = v + 0.2 * self.shift_scale * self._bias
            if corrupt_draw.uniform() < self.corrupt_fraction:
                others = [s for s in self.speaker_means if s != speaker]
                confusion = others[int(corrupt_draw.integers(len(others)))]
                v = v + (self.corrupt_strength * self.shift_scale
                         * self.speaker_means[confusion])
        return v

    def extract(self, utt_id: str) -> np.ndarray:
        return _unit(self.output_weight @ self.base_vector(utt_id) + self.output_bias)

    def output_params(self) -> tuple[np.ndarray, np.ndarray]:
        return self.output_weight, self.output_bias

    def with_output(self, weight: np.ndarray, bias: np.ndarray) -> "SyntheticEmbedder":
        clone = self._clone()
        clone.output_weight = weight
        clone.output_bias = bias
        return clone

    def adapt(self, embeddings: EmbeddingSet, labels: dict[str, int],
              config: TrainPhaseConfig) -> "SyntheticEmbedder":
        clone = self._clone()
        clone.shift_scale = self.shift_scale * self.shrink_factor
        return clone

    def _clone(self) -> "SyntheticEmbedder":
        clone = SyntheticEmbedder(
            speaker_means=self.speaker_means,
            utterances=self.utterances,
            noise_scale=self.noise_scale,
            shift_scale=self.shift_scale,
            shift_angle=self.shift_angle,
            shrink_factor=self.shrink_factor,
            corrupt_fraction=self.corrupt_fraction,
            corrupt_strength=self.corrupt_strength,
            seed=self.seed,
            output_weight=self.output_weight.copy(),
            output_bias=self.output_bias.copy(),
        )
        clone._basis = self._basis
        clone._bias = self._bias
        return clone


class ResUnetEmbedder:
    """Embedder backed by a frozen ResUnet stack plus a trainable affine map.

    `base_vector` is the network's pooled (pre-affine) representation of a
    deterministic crop; `adapt` retrains the affine map and a fresh
    2-subcenter classifier head on pseudo-labeled embeddings.
    """

    def __init__(self, network: resunet.ResUnet,
                 features: dict[str, np.ndarray],
                 output_weight: Optional[np.ndarray] = None,
                 output_bias: Optional[np.ndarray] = None,
                 seed: int = 0):
        self.network = network
        self.features = features
        self.seed = seed
        if output_weight is None:
            output_weight = network.affine.weight.detach().numpy().astype(np.float64)
            output_bias = network.affine.bias.detach().numpy().astype(np.float64)
        self.output_weight = output_weight
        self.output_bias = output_bias
        self._pooled_cache: dict[tuple[str, int], np.ndarray] = {}

    @property
    def dim(self) -> int:
        return self.output_weight.shape[0]

    def base_vector(self, utt_id: str, crop: int = 0) -> np.ndarray:
        key = (utt_id, crop)
        if key not in self._pooled_cache:
            frames = self.features[utt_id]
            t = frames.shape[0]
            window = min(t, schedule.seconds_to_frames(2.0))
            offset = 0 if crop == 0 or t <= window else (t - window) * crop % (t - window + 1)
            pooled = resunet.forward_pooled(self.network, frames[offset : offset + window])
            self._pooled_cache[key] = pooled.astype(np.float64)
        return self._pooled_cache[key]

    def extract(self, utt_id: str) -> np.ndarray:
        return _unit(self.output_weight @ self.base_vector(utt_id) + self.output_bias)

    def output_params(self) -> tuple[np.ndarray, np.ndarray]:
        return self.output_weight, self.output_bias

    def with_output(self, weight: np.ndarray, bias: np.ndarray) -> "ResUnetEmbedder":
        clone = ResUnetEmbedder(self.network, self.features, weight, bias, self.seed)
        clone._pooled_cache = self._pooled_cache
        return clone

    def adapt(self, embeddings: EmbeddingSet, labels: dict[str, int],
              config: TrainPhaseConfig) -> "ResUnetEmbedder":
        ids = [uid for uid in embeddings.ids() if uid in labels]
        if not ids:
            raise EmptyData("no labeled embeddings to adapt on")
        n_classes = max(labels[uid] for uid in ids) + 1
        base = np.stack([self.base_vector(uid) for uid in ids])
        y = np.array([labels[uid] for uid in ids])
        head = losses.init_head(
            n_classes, self.dim, n_subcenters=2, scale=32.0,
            margin=config.margin_end, seed=_stable_seed(self.seed, "adapt-head"),
        )
        weight = self.output_weight.copy()
        bias = self.output_bias.copy()
        rng = np.random.default_rng(_stable_seed(self.seed, "adapt-batches"))
        steps = 50
        batch_size = min(len(ids), 64)
        for step in range(steps):
            idx = rng.choice(len(ids), size=batch_size, replace=False)
            feats = base[idx]
            emb = feats @ weight.T + bias
            out = losses.subcenter_aam_softmax(emb, y[idx], head)
            lr = schedule.lr_at(config, step)
            grad_w = out.grad_embeddings.T @ feats
            grad_b = out.grad_embeddings.sum(axis=0)
            weight = schedule.sgd_step(weight, grad_w, lr, config.weight_decay)
            bias = schedule.sgd_step(bias, grad_b, lr, config.weight_decay)
            head.weights = schedule.sgd_step(head.weights, out.grad_weights, lr,
                                             config.weight_decay)
        return self.with_output(weight, bias)


# --- stage 1: joint adaptation ---

def stage1_joint_adapt(embedder, source_data: LabeledData,
                       target_unlabeled: Sequence[str],
                       target_labeled: LabeledData,
                       config: TrainPhaseConfig,
                       steps: int = 200, batch_size: int = 32,
                       triplet_margin: float = 0.2,
                       seed: int = 0):
    """Train the embedder's output map on the summed joint objective.

    Returns (adapted_embedder, per-step loss trace).
    """
    if not source_data.utt_ids or not target_unlabeled or not target_labeled.utt_ids:
        raise EmptyData("stage 1 needs source, unlabeled-target and labeled-target data")
    weight, bias = (a.copy() for a in embedder.output_params())
    dim = weight.shape[0]
    src_head = losses.init_head(source_data.n_classes, dim, scale=32.0,
                                seed=_stable_seed(seed, "src-head"))
    tgt_head = losses.init_head(target_labeled.n_classes, dim, scale=32.0,
                                seed=_stable_seed(seed, "tgt-head"))
    rng = np.random.default_rng(_stable_seed(seed, "stage1"))
    trace = []
    current = embedder

    def batch_embeddings(ids, crops):
        feats = np.stack([current.base_vector(uid, crop) for uid, crop in zip(ids, crops)])
        return feats, feats @ weight.T + bias

    for step in range(steps):
        lr = schedule.lr_at(config, step)
        epoch_progress = step * batch_size / max(1, len(source_data.utt_ids))
        margin = schedule.margin_at(config, epoch_progress)

        src_ids = [source_data.utt_ids[i] for i in
                   rng.choice(len(source_data.utt_ids), size=min(batch_size, len(source_data.utt_ids)), replace=False)]
        src_feats, src_emb = batch_embeddings(src_ids, [0] * len(src_ids))
        src_y = np.array([source_data.labels[uid] for uid in src_ids])
        src_out = losses.aam_softmax(src_emb, src_y, src_head, margin_override=margin)

        n_tri = min(batch_size, len(target_unlabeled) - 1)
        anchor_ids = [target_unlabeled[i] for i in
                      rng.choice(len(target_unlabeled), size=n_tri, replace=False)]
        neg_ids = []
        for uid in anchor_ids:
            other = uid
            while other == uid:
                other = target_unlabeled[int(rng.integers(len(target_unlabeled)))]
            neg_ids.append(other)
        a_feats, a_emb = batch_embeddings(anchor_ids, [0] * n_tri)
        p_feats, p_emb = batch_embeddings(anchor_ids, [1] * n_tri)
        n_feats, n_emb = batch_embeddings(neg_ids, [0] * n_tri)
        tri_out = losses.triplet(a_emb, p_emb, n_emb, margin_t=triplet_margin)

        lab_ids = [target_labeled.utt_ids[i] for i in
                   rng.choice(len(target_labeled.utt_ids), size=min(batch_size, len(target_labeled.utt_ids)), replace=False)]
        lab_feats, lab_emb = batch_embeddings(lab_ids, [0] * len(lab_ids))
        lab_y = np.array([target_labeled.labels[uid] for uid in lab_ids])
        lab_out = losses.aam_softmax(lab_emb, lab_y, tgt_head, margin_override=margin)

        total = src_out.loss + tri_out.loss + lab_out.loss
        trace.append(total)

        grad_w = src_out.grad_embeddings.T @ src_feats
        grad_w += tri_out.grad_anchor.T @ a_feats
        grad_w += tri_out.grad_positive.T @ p_feats
        grad_w += tri_out.grad_negative.T @ n_feats
        grad_w += lab_out.grad_embeddings.T @ lab_feats
        grad_b = (src_out.grad_embeddings.sum(axis=0)
                  + tri_out.grad_anchor.sum(axis=0)
                  + tri_out.grad_positive.sum(axis=0)
                  + tri_out.grad_negative.sum(axis=0)
                  + lab_out.grad_embeddings.sum(axis=0))

        weight = schedule.sgd_step(weight, grad_w, lr, config.weight_decay)
        bias = schedule.sgd_step(bias, grad_b, lr, config.weight_decay)
        src_head.weights = schedule.sgd_step(src_head.weights, src_out.grad_weights,
                                             lr, config.weight_decay)
        tgt_head.weights = schedule.sgd_step(tgt_head.weights, lab_out.grad_weights,
                                             lr, config.weight_decay)

    return current.with_output(weight, bias), trace


# --- stage 2: iterative clustering and supervised adaptation ---

def extract_embedding_set(embedder, utt_ids: Sequence[str]) -> EmbeddingSet:
    entries = [(uid, embedder.extract(uid).astype(np.float64)) for uid in utt_ids]
    return EmbeddingSet(dim=embedder.dim, entries=entries)


def evaluate_embedder(embedder, validation: ValidationSet,
                      dcf: metrics.DcfParams) -> tuple[float, float]:
    embeddings = extract_embedding_set(embedder, validation.utt_ids)
    centered = backend.sub_mean(embeddings, embeddings)
    scores = backend.score_trials(centered, validation.trials)
    labels = validation.trials.labels()
    return (metrics.eer(scores.scores(), labels),
            metrics.min_dcf(scores.scores(), labels, dcf))


def cluster_and_label(embeddings: EmbeddingSet, n_clusters: int,
                      config: PipelineConfig) -> clustering.PseudoLabelSet:
    k = min(config.kmeans_k, len(embeddings))
    kmeans = clustering.minibatch_kmeans(
        embeddings, k=k, seed=config.seed,
        batch_size=config.kmeans_batch_size,
        max_iters=config.kmeans_max_iters, tol=config.kmeans_tol,
    )
    center_labels = clustering.ahc(kmeans.centers, min(n_clusters, k))
    composed = clustering.compose_pseudo_labels(kmeans, center_labels)
    return clustering.filter_min_count(composed, config.min_count)


def run_round(embedder, target_utt_ids: Sequence[str], validation: ValidationSet,
              config: PipelineConfig, round_idx: int):
    """One extract -> cluster -> pseudo-label -> adapt -> evaluate round."""
    n_clusters = config.selected_n_clusters or config.ahc_candidates[0]
    embeddings = extract_embedding_set(embedder, target_utt_ids)
    labelset = cluster_and_label(embeddings, n_clusters, config)
    adapted = embedder.adapt(embeddings, labelset.labels, config.adapt_config)
    eer_value, dcf_value = evaluate_embedder(adapted, validation, config.dcf)
    report = RoundReport(
        round=round_idx,
        n_clusters=n_clusters,
        n_pseudo_speakers_after_filter=labelset.n_speakers,
        eer=eer_value,
        min_dcf=dcf_value,
    )
    return adapted, report


def select_cluster_count(embedder, target_utt_ids: Sequence[str],
                         validation: ValidationSet, candidates: Sequence[int],
                         config: PipelineConfig,
                         evaluate: Optional[Callable[[int], tuple[float, float]]] = None):
    """Try each candidate from the same starting embedder; pick the best EER.

    Ties prefer the smaller MinDCF, then the smaller candidate. `evaluate`
    can replace the cluster->adapt->score leg (used to inject recorded
    sweeps).
    """
    if not candidates:
        raise EmptyData("no candidate cluster counts")
    if evaluate is None:
        def evaluate(n):
            trial_config = replace(config, selected_n_clusters=n)
            _, report = run_round(embedder, target_utt_ids, validation,
                                  trial_config, round_idx=1)
            return report.eer, report.min_dcf

    reports = []
    for n in candidates:
        eer_value, dcf_value = evaluate(n)
        reports.append((n, eer_value, dcf_value))
    best = min(reports, key=lambda r: (r[1], r[2], r[0]))
    return best[0], reports


def run_until_converged(embedder, target_utt_ids: Sequence[str],
                        validation: ValidationSet, config: PipelineConfig):
    """Repeat rounds until EER improvement < epsilon or max_rounds."""
    reports: list[RoundReport] = []
    current = embedder
    previous_eer = None
    for round_idx in range(1, config.max_rounds + 1):
        current, report = run_round(current, target_utt_ids, validation,
                                    config, round_idx)
        reports.append(report)
        if previous_eer is not None and previous_eer - report.eer < config.converge_epsilon:
            break
        previous_eer = report.eer
    return current, reports


def fuse_systems(eval_scores_per_system: Sequence[ScoreSet],
                 eval_trials: TrialList,
                 calib_scores_per_system: Sequence[ScoreSet],
                 calib_trials: TrialList,
                 durations: dict[str, float],
                 dcf: metrics.DcfParams = metrics.DcfParams()):
    """Calibrate each system on its calibration trials, fuse, evaluate.

    Returns (fused ScoreSet, eer, min_dcf).
    """
    if len(eval_scores_per_system) != len(calib_scores_per_system) or not eval_scores_per_system:
        raise EmptyData("need one calibration score set per system")
    calibrated = []
    for eval_scores, calib_scores in zip(eval_scores_per_system, calib_scores_per_system):
        model = backend.train_calibration(calib_scores, calib_trials, durations)
        calibrated.append(backend.apply_calibration(model, eval_scores, durations))
    fused = backend.fuse(calibrated)
    labels = eval_trials.labels()
    return fused, metrics.eer(fused.scores(), labels), metrics.min_dcf(fused.scores(), labels, dcf)


def write_round_log(reports: Sequence[RoundReport], path) -> None:
    lines = ["\t".join(("round", "n_clusters", "n_speakers", "eer_percent", "min_dcf"))]
    for r in reports:
        lines.append(
            f"{r.round}\t{r.n_clusters}\t{r.n_pseudo_speakers_after_filter}"
            f"\t{100.0 * r.eer:.4f}\t{r.min_dcf:.5f}"
        )
    from .dataio import _write_text

    _write_text(path, "\n".join(lines) + "\n")


# --- synthetic planted-partition scenario ---

@dataclass
class SyntheticScenario:
    embedder: SyntheticEmbedder
    target_utt_ids: list[str]
    validation: ValidationSet
    truth: dict[str, str]  # utt id -> true speaker


def make_synthetic_scenario(n_speakers: int = 50, utts_per_speaker: int = 40,
                            dim: int = 256, n_val_utts_per_speaker: int = 8,
                            seed: int = 0, shift_scale: float = 1.0,
                            shrink_factor: float = 0.5,
                            intra_degrees: float = 5.0) -> SyntheticScenario:
    """Planted target-domain corpus with well-separated speakers."""
    rng = np.random.default_rng(_stable_seed(seed, "scenario"))
    speakers = [f"spk{s:03d}" for s in range(n_speakers)]
    means = {spk: _unit(rng.standard_normal(dim)) for spk in speakers}
    noise_scale = np.tan(np.radians(intra_degrees)) / np.sqrt(dim)

    utterances: dict[str, tuple[str, str]] = {}
    target_ids = []
    val_ids = []
    for spk in speakers:
        for u in range(utts_per_speaker):
            uid = f"{spk}-t{u:03d}"
            utterances[uid] = (spk, "target")
            target_ids.append(uid)
        for u in range(n_val_utts_per_speaker):
            uid = f"{spk}-v{u:03d}"
            utterances[uid] = (spk, "target")
            val_ids.append(uid)

    trial_rng = np.random.default_rng(_stable_seed(seed, "val-trials"))
    trials = []
    for spk in speakers:
        ids = [uid for uid in val_ids if utterances[uid][0] == spk]
        for i in range(len(ids)):
            for j in range(i + 1, len(ids)):
                trials.append((ids[i], ids[j], True))
    n_target_trials = len(trials)
    chosen = set()
    while len(chosen) < 4 * n_target_trials:
        i, j = trial_rng.integers(0, len(val_ids), size=2)
        a, b = val_ids[int(i)], val_ids[int(j)]
        if a == b or utterances[a][0] == utterances[b][0]:
            continue
        pair = (a, b) if a < b else (b, a)
        chosen.add(pair)
    trials.extend((a, b, False) for a, b in sorted(chosen))

    embedder = SyntheticEmbedder(
        speaker_means=means,
        utterances=utterances,
        noise_scale=noise_scale,
        shift_scale=shift_scale,
        shrink_factor=shrink_factor,
        seed=seed,
    )
    return SyntheticScenario(
        embedder=embedder,
        target_utt_ids=target_ids,
        validation=ValidationSet(utt_ids=val_ids, trials=TrialList(trials)),
        truth={uid: spk for uid, (spk, _) in utterances.items()},
    )
