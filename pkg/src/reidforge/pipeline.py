"""Config-driven end-to-end run: data, optional training, distances, post-processing, evaluation.

The config is an INI file. Every section except ``[data]`` is optional::

    [run]
    seed = 0
    output_dir = out
    order = fuse, rerank          ; distance-level stages in application order

    [data]
    source = synthetic            ; or "files"
    num_identities = 50
    ...                           ; remaining SyntheticSpec fields, plus
    train_identities = 40         ; train_identities / queries_per_identity
    ; files: train_features, train_manifest, query_features, query_manifest,
    ;        gallery_features, gallery_manifest

    [train]     enabled, epochs, P, K_inst, lr, ... (TrainConfig fields), mixstyle, mixstyle_alpha
    [distance]  metric = euclidean | cosine, normalize = false
    [fuse]      enabled, orientation, camera (FEAT paths), aux_kind = affinity | distance, lambda1, lambda2
    [rerank]    enabled, k1, k2, lambda_jaccard
    [tracklet]  enabled, window
    [ensemble]  enabled, members (comma-separated FEAT paths), norm = minmax | raw
    [eval]      cross_camera_filter, max_rank, no_match, truncate, junk_ids

The tracklet stage rewrites gallery features, so it always runs before
distances are formed; ensemble always runs last, just before evaluation.
"""
from __future__ import annotations

import configparser
import dataclasses
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path


from .benchmark import QUERIES_PER_IDENTITY, BenchmarkData, split_benchmark
from .evalkit import EvalProtocol, EvalReport, evaluate
from .featstore import FeatureMatrix, l2_normalize_rows, read_features, read_manifest, write_features
from .reidnet import MixStyleConfig, save_head
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
from .malw import trajectory_csv
from .synth import SyntheticSpec, generate_synthetic
from .training import TrainConfig, embed, train_head

log = logging.getLogger(__name__)

SEED_ENV = "REIDFORGE_SEED"
DISTANCE_STAGES = ("fuse", "rerank")


class StageError(RuntimeError):
    """A pipeline failure tagged with the stage that raised it."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    output_dir: Path | None = None
    order: tuple[str, ...] = DISTANCE_STAGES
    data_source: str = "synthetic"
    synthetic: SyntheticSpec = SyntheticSpec()
    train_identities: int = 40
    queries_per_identity: int = QUERIES_PER_IDENTITY
    files: dict = field(default_factory=dict)
    train: TrainConfig | None = None
    metric: str = "euclidean"
    normalize: bool = False
    fusion: FusionParams | None = None
    fusion_inputs: tuple[str, str] | None = None
    aux_kind: str | None = None
    rerank: RerankParams | None = None
    tracklet_window: int | None = None
    ensemble_members: tuple[str, ...] | None = None
    ensemble_norm: str = "minmax"
    protocol: EvalProtocol = EvalProtocol()
    max_rank: int = 10


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value.strip()


def _fill(cls, section, skip=(), **extra):
    """Build dataclass ``cls`` from an INI section, typed after the defaults."""
    defaults = cls()
    kwargs = dict(extra)
    for f in dataclasses.fields(cls):
        if f.name in skip or f.name in kwargs or f.name not in section:
            continue
        like = getattr(defaults, f.name)
        if like is None:
            kwargs[f.name] = None if section[f.name].strip().lower() == "none" else int(section[f.name])
        else:
            kwargs[f.name] = _coerce(section[f.name], like)
    return cls(**kwargs)


def _enabled(parser, name) -> bool:
    return parser.has_section(name) and parser.getboolean(name, "enabled", fallback=True)


def _resolve(base: Path, value: str) -> str:
    p = Path(value.strip())
    return str(p if p.is_absolute() else base / p)


def load_config(path: str | Path, overrides: dict | None = None) -> PipelineConfig:
    """Parse an INI config. ``overrides`` maps ``"section.key"`` to string values.

    Relative paths resolve against the config file's directory. The
    ``REIDFORGE_SEED`` environment variable replaces ``run.seed``.
    """
    path = Path(path)
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise StageError("config", str(exc)) from None
    for key, value in (overrides or {}).items():
        section, name = key.split(".", 1)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, name, str(value))
    try:
        return _build(parser, path.parent)
    except (ValueError, KeyError, TypeError) as exc:
        raise StageError("config", str(exc)) from None


def _build(parser: configparser.ConfigParser, base: Path) -> PipelineConfig:
    run = parser["run"] if parser.has_section("run") else {}
    seed = int(run.get("seed", 0))
    if os.environ.get(SEED_ENV, "").strip():
        seed = int(os.environ[SEED_ENV])
    order = tuple(s.strip() for s in run.get("order", ",".join(DISTANCE_STAGES)).split(",") if s.strip())
    unknown = set(order) - set(DISTANCE_STAGES)
    if unknown or len(set(order)) != len(order):
        raise ValueError(f"run.order must list distinct stages from {DISTANCE_STAGES}, got {order}")
    out = run.get("output_dir")

    if not parser.has_section("data"):
        raise KeyError("missing [data] section")
    data = parser["data"]
    source = data.get("source", "synthetic").strip()
    files = {}
    if source == "files":
        for key in ("train_features", "train_manifest", "query_features", "query_manifest",
                    "gallery_features", "gallery_manifest"):
            if key in data:
                files[key] = _resolve(base, data[key])
    elif source != "synthetic":
        raise ValueError(f"data.source must be 'synthetic' or 'files', got {source!r}")
    synthetic = _fill(SyntheticSpec, data, seed=seed)

    train = None
    if _enabled(parser, "train"):
        sec = parser["train"]
        mix = MixStyleConfig(alpha=float(sec.get("mixstyle_alpha", 0.1)),
                             active=sec.getboolean("mixstyle", fallback=False))
        train = _fill(TrainConfig, sec, mixstyle=mix, seed=seed)

    fusion = fusion_inputs = aux_kind = None
    if _enabled(parser, "fuse"):
        sec = parser["fuse"]
        fusion = _fill(FusionParams, sec)
        fusion_inputs = (_resolve(base, sec["orientation"]), _resolve(base, sec["camera"]))
        if "aux_kind" not in sec:
            raise KeyError("fuse.aux_kind must declare the auxiliary matrices as 'affinity' or 'distance'")
        aux_kind = sec["aux_kind"].strip()
        if aux_kind not in ("affinity", "distance"):
            raise ValueError(f"fuse.aux_kind must be 'affinity' or 'distance', got {aux_kind!r}")

    rerank = _fill(RerankParams, parser["rerank"]) if _enabled(parser, "rerank") else None
    window = parser.getint("tracklet", "window", fallback=3) if _enabled(parser, "tracklet") else None

    members = None
    ens_norm = "minmax"
    if _enabled(parser, "ensemble"):
        sec = parser["ensemble"]
        members = tuple(_resolve(base, m) for m in sec.get("members", "").split(",") if m.strip())
        ens_norm = sec.get("norm", "minmax").strip()

    ev = parser["eval"] if parser.has_section("eval") else {}
    truncate = ev.get("truncate", "none").strip().lower()
    junk = frozenset(int(j) for j in ev.get("junk_ids", "").split(",") if j.strip())
    protocol = EvalProtocol(
        cross_camera_filter=_coerce(ev.get("cross_camera_filter", "true"), True),
        junk_ids=junk,
        no_match=ev.get("no_match", "exclude").strip(),
        truncate=None if truncate == "none" else int(truncate),
    )
    dist = parser["distance"] if parser.has_section("distance") else {}
    return PipelineConfig(
        seed=seed,
        output_dir=Path(_resolve(base, out)) if out else None,
        order=order,
        data_source=source,
        synthetic=synthetic,
        train_identities=int(data.get("train_identities", 40)),
        queries_per_identity=int(data.get("queries_per_identity", QUERIES_PER_IDENTITY)),
        files=files,
        train=train,
        metric=dist.get("metric", "euclidean").strip(),
        normalize=_coerce(dist.get("normalize", "false"), True),
        fusion=fusion,
        fusion_inputs=fusion_inputs,
        aux_kind=aux_kind,
        rerank=rerank,
        tracklet_window=window,
        ensemble_members=members,
        ensemble_norm=ens_norm,
        protocol=protocol,
        max_rank=int(ev.get("max_rank", 10)),
    )


@dataclass
class PipelineResult:
    report: EvalReport
    distances: dict[str, DistanceMatrix]
    train: object | None = None
    files: list[Path] = field(default_factory=list)


def _load_data(cfg: PipelineConfig) -> BenchmarkData:
    if cfg.data_source == "synthetic":
        feats, manifest = generate_synthetic(cfg.synthetic)
        return split_benchmark(feats, manifest, cfg.train_identities, cfg.queries_per_identity)
    f = cfg.files
    for key in ("query_features", "query_manifest", "gallery_features", "gallery_manifest"):
        if key not in f:
            raise ValueError(f"data.{key} is required for file input")
    loaded = {}
    for part in ("train", "query", "gallery"):
        if f"{part}_features" not in f:
            loaded[part] = (None, None)
            continue
        feats = read_features(f[f"{part}_features"])
        manifest = read_manifest(f[f"{part}_manifest"])
        if feats.rows != len(manifest):
            raise ValueError(f"{part}: {feats.rows} feature rows but {len(manifest)} manifest entries")
        loaded[part] = (feats, manifest)
    return BenchmarkData(*loaded["train"], *loaded["query"], *loaded["gallery"])


def _stage(name):
    """Returns a caller that runs ``fn`` and tags ordinary failures with ``name``."""
    def run(fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except StageError:
            raise
        except (ValueError, OSError, KeyError, ArithmeticError, RuntimeError) as exc:
            raise StageError(name, str(exc)) from exc
    return run


def run_pipeline(cfg: PipelineConfig) -> PipelineResult:
    """Execute the configured chain and, if ``output_dir`` is set, write its artifacts."""
    data = _stage("data")(_load_data, cfg)
    query, gallery = data.query, data.gallery
    trained = None

    if cfg.train is not None:
        if data.train is None:
            raise StageError("train", "training is enabled but no training features were given")
        trained = _stage("train")(train_head, data.train, data.train_meta, cfg.train)
        query = _stage("embed")(embed, query, trained.params)
        gallery = _stage("embed")(embed, gallery, trained.params)
    elif cfg.normalize or cfg.metric == "cosine":
        query, gallery = l2_normalize_rows(query), l2_normalize_rows(gallery)

    if cfg.tracklet_window is not None:
        gallery = _stage("tracklet")(tracklet_rerank, gallery, data.gallery_meta, cfg.tracklet_window)

    distances = {"initial": _stage("distance")(pairwise_distance, query, gallery, cfg.metric)}
    current = distances["initial"]
    for name in cfg.order:
        if name == "fuse" and cfg.fusion is not None:
            current = _stage("fuse")(_fuse, current, cfg)
            distances["fused"] = current
        elif name == "rerank" and cfg.rerank is not None:
            run = _stage("rerank")
            qq = run(pairwise_distance, query, query, cfg.metric)
            gg = run(pairwise_distance, gallery, gallery, cfg.metric)
            current = run(k_reciprocal_rerank, current, qq, gg, cfg.rerank)
            distances["reranked"] = current
    if cfg.ensemble_members is not None:
        current = _stage("ensemble")(_ensemble, current, cfg)
        distances["ensemble"] = current
    distances["final"] = current

    report = _stage("evaluate")(evaluate, current, data.query_meta, data.gallery_meta, cfg.protocol, cfg.max_rank)
    log.info("evaluated %d queries: map=%.4f", report.num_evaluated, report.map)
    result = PipelineResult(report, distances, trained)
    if cfg.output_dir is not None:
        result.files = _stage("output")(_write_outputs, result, cfg.output_dir)
    return result


def _fuse(d_v: DistanceMatrix, cfg: PipelineConfig) -> DistanceMatrix:
    d_o, d_c = (read_features(p).data for p in cfg.fusion_inputs)
    if cfg.aux_kind == "distance":
        # a distance grows with dissimilarity; negate so both kinds reward agreement
        d_o, d_c = -d_o, -d_c
    return fuse_distances(d_v, d_o, d_c, cfg.fusion)


def _ensemble(current: DistanceMatrix, cfg: PipelineConfig) -> DistanceMatrix:
    members = [current] + [DistanceMatrix(read_features(p).data) for p in cfg.ensemble_members]
    return ensemble_distances(members, cfg.ensemble_norm)


def _write_outputs(result: PipelineResult, out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []

    def text(name, body):
        p = out_dir / name
        p.write_text(body)
        written.append(p)

    text("report.txt", result.report.to_text())
    text("per_query_ap.csv", result.report.per_query_csv())
    for name, d in result.distances.items():
        p = out_dir / f"dist_{name}.feat"
        write_features(FeatureMatrix(d.data), p)
        written.append(p)
    if result.train is not None:
        text("losses.csv", result.train.losses_csv())
        text("malw_trajectory.csv", trajectory_csv(result.train.trajectory))
        p = out_dir / "head.fpak"
        save_head(result.train.params, p)
        written.append(p)
    return written

