"""Command-line entry point: ``reidforge <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .benchmark import QUERIES_PER_IDENTITY, split_benchmark
from .evalkit import EvalProtocol, evaluate
from .featstore import FeatureMatrix, read_features, read_manifest, write_features, write_manifest
from .malw import trajectory_csv
from .pipeline import SEED_ENV, StageError, load_config, run_pipeline
from .reidnet import MixStyleConfig, load_head, save_head
from .retrieval import (
    DistanceMatrix,
    FusionParams,
    RerankParams,
    ensemble_distances,
    fuse_distances,
    k_reciprocal_rerank,
    pairwise_distance,
    tracklet_rerank,
)
from .synth import SyntheticSpec, generate_synthetic
from .training import TrainConfig, embed, train_head


def _seed(args_seed: int) -> int:
    env = os.environ.get(SEED_ENV, "").strip()
    return int(env) if env else args_seed


def _write_dist(d: DistanceMatrix, path) -> None:
    write_features(FeatureMatrix(d.data), path)


def _read_dist(path) -> DistanceMatrix:
    return DistanceMatrix(read_features(path).data)


def cmd_gen(args) -> None:
    spec = SyntheticSpec(
        num_identities=args.num_identities, samples_per_identity=args.samples, dim=args.dim,
        domain_scale=args.scale, domain_offset=args.offset, noise_sigma=args.noise,
        seed=_seed(args.seed), num_cameras=args.cameras, tracklet_len=args.tracklet_len,
        tracklet_sigma=args.tracklet_sigma,
    )
    feats, manifest = generate_synthetic(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if args.train_identities is None:
        write_features(feats, out / "all.feat")
        write_manifest(manifest, out / "all.csv")
        return
    data = split_benchmark(feats, manifest, args.train_identities, args.queries_per_identity)
    for part in ("train", "query", "gallery"):
        write_features(getattr(data, part), out / f"{part}.feat")
        write_manifest(getattr(data, f"{part}_meta"), out / f"{part}.csv")


def cmd_train(args) -> None:
    feats = read_features(args.features)
    manifest = read_manifest(args.manifest)
    cfg = TrainConfig(
        epochs=args.epochs, P=args.P, K_inst=args.K, lr=args.lr, num_heads=args.heads,
        head_dim=args.head_dim, metric_loss=args.metric_loss, tau=args.tau, margin=args.margin,
        malw=not args.no_malw, malw_k=args.malw_k, malw_alpha=args.malw_alpha, malw_mode=args.malw_mode,
        mixstyle=MixStyleConfig(alpha=args.mixstyle_alpha, active=args.mixstyle), seed=_seed(args.seed),
    )
    result = train_head(feats, manifest, cfg)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_head(result.params, out / "head.fpak")
    (out / "losses.csv").write_text(result.losses_csv())
    (out / "malw_trajectory.csv").write_text(trajectory_csv(result.trajectory))


def cmd_dist(args) -> None:
    q, g = read_features(args.query), read_features(args.gallery)
    if args.head:
        params = load_head(args.head)
        q, g = embed(q, params), embed(g, params)
    _write_dist(pairwise_distance(q, g, args.metric), args.out)


def cmd_fuse(args) -> None:
    d_o, d_c = read_features(args.orientation).data, read_features(args.camera).data
    if args.aux_kind == "distance":
        d_o, d_c = -d_o, -d_c
    fused = fuse_distances(_read_dist(args.dist), d_o, d_c, FusionParams(args.lambda1, args.lambda2))
    _write_dist(fused, args.out)


def cmd_rerank(args) -> None:
    params = RerankParams(args.k1, args.k2, args.lambda_jaccard)
    out = k_reciprocal_rerank(_read_dist(args.qg), _read_dist(args.qq), _read_dist(args.gg), params)
    _write_dist(out, args.out)


def cmd_tracklet(args) -> None:
    feats = read_features(args.features)
    write_features(tracklet_rerank(feats, read_manifest(args.manifest), args.tracklet_window), args.out)


def cmd_ensemble(args) -> None:
    _write_dist(ensemble_distances([_read_dist(p) for p in args.members], args.ensemble_norm), args.out)


def cmd_eval(args) -> None:
    protocol = EvalProtocol(cross_camera_filter=not args.no_cross_camera_filter, truncate=args.truncate)
    report = evaluate(_read_dist(args.dist), read_manifest(args.query_manifest),
                      read_manifest(args.gallery_manifest), protocol, args.max_rank)
    sys.stdout.write(report.to_text())
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(report.to_text())
        (out / "per_query_ap.csv").write_text(report.per_query_csv())


PIPELINE_FLAGS = {
    "k1": "rerank.k1", "k2": "rerank.k2", "lambda_jaccard": "rerank.lambda_jaccard",
    "lambda1": "fuse.lambda1", "lambda2": "fuse.lambda2", "tracklet_window": "tracklet.window",
    "ensemble_norm": "ensemble.norm", "seed": "run.seed",
}


def cmd_pipeline(args) -> None:
    overrides = {key: getattr(args, flag) for flag, key in PIPELINE_FLAGS.items()
                 if getattr(args, flag, None) is not None}
    if args.out_dir is not None:
        overrides["run.output_dir"] = str(Path(args.out_dir).resolve())
    result = run_pipeline(load_config(args.config, overrides))
    sys.stdout.write(result.report.to_text())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reidforge", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="write a synthetic two-domain dataset")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--num-identities", type=int, default=50)
    p.add_argument("--samples", type=int, default=16, help="samples per identity")
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--scale", type=float, default=3.0, help="synthetic-domain scale")
    p.add_argument("--offset", type=float, default=2.0, help="synthetic-domain offset")
    p.add_argument("--noise", type=float, default=0.25)
    p.add_argument("--cameras", type=int, default=2, help="cameras per domain")
    p.add_argument("--tracklet-len", type=int, default=1)
    p.add_argument("--tracklet-sigma", type=float, default=0.0)
    p.add_argument("--train-identities", type=int, default=None,
                   help="split into train/query/gallery; otherwise write one file")
    p.add_argument("--queries-per-identity", type=int, default=QUERIES_PER_IDENTITY)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen, stage="gen")

    defaults = TrainConfig()
    p = sub.add_parser("train", help="train the attention head")
    p.add_argument("--features", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--epochs", type=int, default=defaults.epochs)
    p.add_argument("--P", type=int, default=defaults.P)
    p.add_argument("--K", type=int, default=defaults.K_inst)
    p.add_argument("--lr", type=float, default=defaults.lr)
    p.add_argument("--heads", type=int, default=defaults.num_heads)
    p.add_argument("--head-dim", type=int, default=None)
    p.add_argument("--metric-loss", choices=["supcon", "triplet"], default=defaults.metric_loss)
    p.add_argument("--tau", type=float, default=defaults.tau)
    p.add_argument("--margin", type=float, default=defaults.margin)
    p.add_argument("--no-malw", action="store_true", help="fixed 1:1 loss weights")
    p.add_argument("--malw-k", type=int, default=defaults.malw_k)
    p.add_argument("--malw-alpha", type=float, default=defaults.malw_alpha)
    p.add_argument("--malw-mode", choices=["literal", "ema"], default=defaults.malw_mode)
    p.add_argument("--mixstyle", action="store_true")
    p.add_argument("--mixstyle-alpha", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train, stage="train")

    p = sub.add_parser("dist", help="query x gallery distance matrix")
    p.add_argument("--query", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--head", help="embed through a trained head first")
    p.add_argument("--metric", choices=["euclidean", "cosine"], default="euclidean")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_dist, stage="distance")

    p = sub.add_parser("fuse", help="D = D_v - lambda1 * D_o - lambda2 * D_c")
    p.add_argument("--dist", required=True)
    p.add_argument("--orientation", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--aux-kind", choices=["affinity", "distance"], required=True,
                   help="whether the orientation/camera matrices grow with agreement or disagreement")
    p.add_argument("--lambda1", type=float, default=0.1)
    p.add_argument("--lambda2", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse, stage="fuse")

    p = sub.add_parser("rerank", help="k-reciprocal re-ranking")
    p.add_argument("--qg", required=True)
    p.add_argument("--qq", required=True)
    p.add_argument("--gg", required=True)
    p.add_argument("--k1", type=int, default=20)
    p.add_argument("--k2", type=int, default=6)
    p.add_argument("--lambda-jaccard", type=float, default=0.3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rerank, stage="rerank")

    p = sub.add_parser("tracklet", help="average features over consecutive tracklet frames")
    p.add_argument("--features", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--tracklet-window", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_tracklet, stage="tracklet")

    p = sub.add_parser("ensemble", help="average several distance matrices")
    p.add_argument("members", nargs="+")
    p.add_argument("--ensemble-norm", choices=["minmax", "raw"], default="minmax")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ensemble, stage="ensemble")

    p = sub.add_parser("eval", help="mAP and CMC of a distance matrix")
    p.add_argument("--dist", required=True)
    p.add_argument("--query-manifest", required=True)
    p.add_argument("--gallery-manifest", required=True)
    p.add_argument("--no-cross-camera-filter", action="store_true")
    p.add_argument("--max-rank", type=int, default=10)
    p.add_argument("--truncate", type=int, default=None, help="mAP@T")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_eval, stage="evaluate")

    p = sub.add_parser("pipeline", help="run a config file end to end")
    p.add_argument("config")
    p.add_argument("--out-dir")
    p.add_argument("--seed", type=int)
    p.add_argument("--k1", type=int)
    p.add_argument("--k2", type=int)
    p.add_argument("--lambda-jaccard", type=float)
    p.add_argument("--lambda1", type=float)
    p.add_argument("--lambda2", type=float)
    p.add_argument("--tracklet-window", type=int)
    p.add_argument("--ensemble-norm", choices=["minmax", "raw"])
    p.set_defaults(func=cmd_pipeline, stage="pipeline")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except StageError as exc:
        print(f"reidforge: error {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError) as exc:
        print(f"reidforge: error [{args.stage}] {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
