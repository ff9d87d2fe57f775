"""mAP and CMC for query/gallery retrieval."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .featstore import GalleryManifest
from .retrieval import rank


@dataclass(frozen=True)
class EvalProtocol:
    cross_camera_filter: bool = True
    junk_ids: frozenset[int] = frozenset()
    no_match: Literal["exclude", "zero"] = "exclude"
    truncate: int | None = None


@dataclass(frozen=True)
class EvalReport:
    map: float
    cmc: np.ndarray
    per_query_ap: np.ndarray          # NaN for queries that were skipped
    evaluated: np.ndarray = field(repr=False)

    @property
    def num_evaluated(self) -> int:
        return int(self.evaluated.sum())

    def to_text(self) -> str:
        lines = [f"map={self.map!r}", f"queries={self.num_evaluated}"]
        lines += [f"cmc_{k}={float(v)!r}" for k, v in enumerate(self.cmc, start=1)]
        return "\n".join(lines) + "\n"

    def per_query_csv(self) -> str:
        rows = ["query_index,ap"]
        rows += [f"{i},{float(ap)!r}" for i, ap in enumerate(self.per_query_ap) if self.evaluated[i]]
        return "\n".join(rows) + "\n"


class NoEvaluableQueriesError(ValueError):
    pass


def average_precision(ranked_relevance, truncate: int | None = None) -> float:
    """AP of one ranked list given per-position relevance flags.

    With ``truncate=T`` only the top T positions count and the sum of
    precisions is divided by ``min(n_relevant, T)``.
    """
    rel = np.asarray(ranked_relevance, dtype=bool)
    n_rel = int(rel.sum())
    if n_rel == 0:
        raise ValueError("average precision is undefined without a relevant item")
    hits = np.flatnonzero(rel)
    precisions = np.arange(1, n_rel + 1) / (hits + 1)
    if truncate is not None:
        precisions = precisions[hits < truncate]
        return float(precisions.sum() / min(n_rel, truncate))
    return float(precisions.mean())


def evaluate(dist, query_meta: GalleryManifest, gallery_meta: GalleryManifest,
             protocol: EvalProtocol = EvalProtocol(), max_rank: int = 10) -> EvalReport:
    ranks = rank(dist)
    Q, G = ranks.shape
    if len(query_meta) != Q or len(gallery_meta) != G:
        raise ValueError(f"distance shape {(Q, G)} does not match metadata ({len(query_meta)}, {len(gallery_meta)})")
    q_ids, q_cams = query_meta.identities, query_meta.cameras
    g_ids, g_cams = gallery_meta.identities, gallery_meta.cameras
    junk_gallery = np.isin(g_ids, list(protocol.junk_ids))

    aps = np.full(Q, np.nan)
    cmc_sum = np.zeros(max_rank)
    evaluated = np.zeros(Q, dtype=bool)
    for i in range(Q):
        if q_ids[i] in protocol.junk_ids:
            continue
        order = ranks[i]
        keep = ~junk_gallery[order]
        if protocol.cross_camera_filter:
            keep &= ~((g_ids[order] == q_ids[i]) & (g_cams[order] == q_cams[i]))
        matches = g_ids[order][keep] == q_ids[i]
        if not matches.any():
            if protocol.no_match == "zero":
                aps[i] = 0.0
                evaluated[i] = True
            continue
        aps[i] = average_precision(matches, protocol.truncate)
        first = int(np.argmax(matches))
        if first < max_rank:
            cmc_sum[first:] += 1
        evaluated[i] = True
    n = int(evaluated.sum())
    if n == 0:
        raise NoEvaluableQueriesError("no query has a valid gallery match under this protocol")
    return EvalReport(float(np.nanmean(aps[evaluated])), cmc_sum / n, aps, evaluated)
