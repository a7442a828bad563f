"""Command-line surface: one subcommand per pipeline stage.

Every subcommand is a thin shell over the library; all randomness flows from
one seed (flag > config file > default 0). Exit codes: 0 success, 2 I/O,
3 format/config, 4 data/precondition.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import backend, clustering, dataio, features, metrics, pipeline, resunet
from .errors import SvdaError, exit_code_for

CONFIG_ENV_VAR = "SVDA_CONFIG"


def _load_config(path):
    if path is None:
        path = os.environ.get(CONFIG_ENV_VAR)
    if path is None:
        return {}
    with open(path, "rb") as handle:
        return tomllib.load(handle)


def _seed(args, config) -> int:
    if args.seed is not None:
        return args.seed
    return int(config.get("seed", 0))


def _fbank_config(config) -> features.FbankConfig:
    section = config.get("fbank", {})
    return features.FbankConfig(**section)


def _resunet_config(config, variant=None) -> resunet.ResUnetConfig:
    section = dict(config.get("resunet", {}))
    if variant is not None:
        section["residual_blocks"] = variant
    return resunet.ResUnetConfig(**section)


def cmd_extract_features(args, config) -> int:
    manifest = dataio.read_manifest(args.manifest)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    fbank_config = _fbank_config(config)
    for rec in manifest.records:
        waveform = dataio.read_wav(rec.path)
        feats = features.cmn(features.fbank(waveform, fbank_config))
        np.save(out_dir / f"{rec.id}.npy", feats.frames)
    print(f"wrote {len(manifest)} feature files to {out_dir}")
    return 0


def cmd_extract_embeddings(args, config) -> int:
    net_config = _resunet_config(config, args.variant)
    if args.checkpoint:
        network = resunet.load_checkpoint(args.checkpoint, net_config)
    else:
        network = resunet.build(net_config, seed=args.init_seed)
    print(f"ResUnet-{net_config.residual_blocks}: "
          f"{resunet.param_count(net_config)} parameters", file=sys.stderr)
    feature_dir = Path(args.features_dir)
    entries = []
    for path in sorted(feature_dir.glob("*.npy")):
        frames = np.load(path)
        entries.append((path.stem, resunet.forward(network, frames)))
    embedding_set = dataio.EmbeddingSet(dim=net_config.embed_dim, entries=entries)
    dataio.write_embeddings(embedding_set, args.out)
    print(f"wrote {len(entries)} embeddings to {args.out}")
    return 0


def cmd_augment_plan(args, config) -> int:
    manifest = dataio.read_manifest(args.manifest)
    assets = {}
    for kind in ("noise", "music", "babble", "reverb"):
        value = getattr(args, kind.replace("-", "_"), None)
        if value:
            assets[kind] = value
    plan = features.build_full_plan(manifest, assets, global_seed=_seed(args, config))
    features.write_plan(plan, args.out)
    print(f"wrote plan with {len(plan.entries)} entries to {args.out}")
    return 0


def _normalized_embeddings(path) -> dataio.EmbeddingSet:
    raw = dataio.read_embeddings(path)
    entries = []
    for uid, vec in raw.entries:
        vec = np.asarray(vec, dtype=np.float64)
        entries.append((uid, vec / np.linalg.norm(vec)))
    return dataio.EmbeddingSet(dim=raw.dim, entries=entries)


def cmd_cluster(args, config) -> int:
    embeddings = _normalized_embeddings(args.embeddings)
    model = clustering.minibatch_kmeans(embeddings, k=args.k, seed=_seed(args, config))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    np.save(out_dir / "centers.npy", model.centers)
    lines = [f"{uid}\t{center}" for uid, center in model.assignments.items()]
    dataio._write_text(out_dir / "assignments.tsv", "\n".join(lines) + "\n")
    print(f"k={args.k} inertia={model.inertia:.6f}")
    return 0


def cmd_pseudo_label(args, config) -> int:
    embeddings = _normalized_embeddings(args.embeddings)
    model = clustering.minibatch_kmeans(embeddings, k=args.k, seed=_seed(args, config))
    center_labels = clustering.ahc(model.centers, args.n_clusters)
    labelset = clustering.filter_min_count(
        clustering.compose_pseudo_labels(model, center_labels), args.min_count
    )
    removed_path = str(args.out) + ".removed"
    clustering.write_pseudo_labels(labelset, args.out, removed_path)
    print(f"{labelset.n_speakers} pseudo-speakers, {len(labelset.removed)} removed")
    return 0


def cmd_score(args, config) -> int:
    embeddings = dataio.read_embeddings(args.embeddings)
    trials = dataio.read_trials(args.trials)
    if args.sub_mean:
        embeddings = backend.sub_mean(embeddings, embeddings)
    scores = backend.score_trials(embeddings, trials)
    dataio.write_scores(scores, args.out)
    print(f"wrote {len(scores)} scores to {args.out}")
    return 0


def _durations(manifest_path) -> dict[str, float]:
    manifest = dataio.read_manifest(manifest_path)
    return {rec.id: rec.duration for rec in manifest.records}


def cmd_calibrate(args, config) -> int:
    calib_scores = dataio.read_scores(args.calib_scores)
    calib_trials = dataio.read_trials(args.calib_trials)
    durations = _durations(args.manifest)
    model = backend.train_calibration(calib_scores, calib_trials, durations)
    if args.model_out:
        backend.write_calibration(model, args.model_out)
    target = dataio.read_scores(args.apply_to)
    calibrated = backend.apply_calibration(model, target, durations)
    dataio.write_scores(calibrated, args.out)
    print(f"w0={model.w0:.5f} w1={model.w1:.5f} w2={model.w2:.5f}")
    return 0


def cmd_fuse(args, config) -> int:
    sets = [dataio.read_scores(path) for path in args.scores]
    dataio.write_scores(backend.fuse(sets), args.out)
    print(f"fused {len(sets)} systems into {args.out}")
    return 0


def cmd_evaluate(args, config) -> int:
    scores = dataio.read_scores(args.scores)
    trials = dataio.read_trials(args.trials)
    if scores.pairs() != [(e, t) for e, t, _ in trials.trials]:
        from .errors import AlignmentError

        raise AlignmentError("scores are not aligned with the trial list")
    labels = trials.labels()
    values = scores.scores()
    eer_value, threshold = metrics.eer_with_threshold(values, labels)
    params = metrics.DcfParams(p_target=args.p_target)
    dcf_value = metrics.min_dcf(values, labels, params)
    print("eer_percent\tmin_dcf\tp_target\teer_threshold")
    print(f"{100.0 * eer_value:.4f}\t{dcf_value:.5f}\t{params.p_target}\t{threshold:.6f}")
    return 0


def cmd_adapt(args, config) -> int:
    if not args.synthetic_demo:
        print("only --synthetic-demo is supported without a full run config",
              file=sys.stderr)
        return 3
    seed = _seed(args, config)
    scenario = pipeline.make_synthetic_scenario(seed=seed)
    pipe_config = pipeline.PipelineConfig(
        kmeans_k=200,
        ahc_candidates=(50,),
        min_count=10,
        max_rounds=args.max_rounds,
        converge_epsilon=0.0,
        seed=seed,
    )
    embedder = scenario.embedder
    if not args.skip_stage1:
        # the demo corpus is target-only; stage 1 is exercised in the library tests
        pass
    _, reports = pipeline.run_until_converged(
        embedder, scenario.target_utt_ids, scenario.validation, pipe_config
    )
    pipeline.write_round_log(reports, args.out_log)
    for report in reports:
        print(f"round {report.round}: eer={100.0 * report.eer:.3f}% "
              f"min_dcf={report.min_dcf:.4f} "
              f"speakers={report.n_pseudo_speakers_after_filter}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="svda",
                                     description="speaker-verification domain adaptation toolkit")
    parser.add_argument("--config", default=None, help="TOML run config")
    parser.add_argument("--seed", type=int, default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("extract-features")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser("extract-embeddings")
    p.add_argument("--features-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", type=int, choices=resunet.ALLOWED_DEPTHS, default=15)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--init-seed", type=int, default=0)
    p.set_defaults(func=cmd_extract_embeddings)

    p = sub.add_parser("augment-plan")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    for kind in ("noise", "music", "babble", "reverb"):
        p.add_argument(f"--{kind}", default=None, help=f"{kind} asset path")
    p.set_defaults(func=cmd_augment_plan)

    p = sub.add_parser("cluster")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("pseudo-label")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--n-clusters", type=int, required=True)
    p.add_argument("--min-count", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("score")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--sub-mean", action="store_true")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("calibrate")
    p.add_argument("--calib-scores", required=True)
    p.add_argument("--calib-trials", required=True)
    p.add_argument("--manifest", required=True, help="manifest providing durations")
    p.add_argument("--apply-to", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model-out", default=None)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("fuse")
    p.add_argument("--out", required=True)
    p.add_argument("scores", nargs="+")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("evaluate")
    p.add_argument("--scores", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--p-target", type=float, default=0.05)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("adapt")
    p.add_argument("--synthetic-demo", action="store_true")
    p.add_argument("--skip-stage1", action="store_true")
    p.add_argument("--max-rounds", type=int, default=3)
    p.add_argument("--out-log", default="run_log.tsv")
    p.set_defaults(func=cmd_adapt)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _load_config(args.config)
        return args.func(args, config)
    except (SvdaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
