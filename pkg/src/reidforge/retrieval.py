"""Query-to-gallery distances and the post-processing stack applied to them."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from .featstore import FeatureMatrix, GalleryManifest, as_array

Metric = Literal["euclidean", "cosine", "jaccard-fused", "custom"]


@dataclass(frozen=True)
class DistanceMatrix:
    data: np.ndarray
    metric: Metric = "custom"

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 2:
            raise ValueError(f"distance matrix must be 2-D, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("distance matrix contains non-finite entries")
        if self.metric in ("euclidean", "cosine") and arr.size and arr.min() < 0:
            raise ValueError(f"{self.metric} distances must be non-negative")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def to_features(self) -> FeatureMatrix:
        return FeatureMatrix(self.data)


def _dist_array(d) -> np.ndarray:
    return d.data if isinstance(d, DistanceMatrix) else np.asarray(d, dtype=np.float64)


@dataclass(frozen=True)
class RerankParams:
    k1: int = 20
    k2: int = 6
    lambda_jaccard: float = 0.3

    def __post_init__(self):
        if not self.k1 >= self.k2 >= 1:
            raise ValueError(f"need k1 >= k2 >= 1, got k1={self.k1}, k2={self.k2}")
        if not 0.0 <= self.lambda_jaccard <= 1.0:
            raise ValueError(f"lambda_jaccard must lie in [0, 1], got {self.lambda_jaccard}")


@dataclass(frozen=True)
class FusionParams:
    lambda1: float = 0.1
    lambda2: float = 0.1

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


def pairwise_distance(queries, gallery, metric: Metric = "euclidean") -> DistanceMatrix:
    """Exact ``Q x G`` distances.

    Euclidean distances are formed from explicit differences rather than the
    ``|a|^2 + |b|^2 - 2ab`` expansion so self-distances come out exactly 0.
    """
    q, g = as_array(queries), as_array(gallery)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError(f"dimension mismatch: {q.shape} vs {g.shape}")
    if metric == "euclidean":
        out = np.empty((q.shape[0], g.shape[0]))
        for i in range(q.shape[0]):
            out[i] = np.sqrt(((g - q[i]) ** 2).sum(axis=1))
        return DistanceMatrix(out, "euclidean")
    if metric == "cosine":
        for name, m in (("queries", queries), ("gallery", gallery)):
            normalized = m.normalized if isinstance(m, FeatureMatrix) else np.allclose(
                np.linalg.norm(as_array(m), axis=1), 1.0, atol=1e-5)
            if not normalized:
                raise ValueError(f"cosine distance needs L2-normalized {name}")
        return DistanceMatrix(np.clip(1.0 - q @ g.T, 0.0, 2.0), "cosine")
    raise ValueError(f"unsupported metric {metric!r}")


def _reciprocal_sets(initial_rank: np.ndarray, k: int) -> np.ndarray:
    """Boolean ``R[i, j]``: j is among i's top-(k+1) and i among j's."""
    n = initial_rank.shape[0]
    forward = np.zeros((n, n), dtype=bool)
    forward[np.repeat(np.arange(n), k + 1), initial_rank[:, :k + 1].ravel()] = True
    return forward & forward.T


def k_reciprocal_rerank(dist_qg, dist_qq, dist_gg, params: RerankParams = RerankParams()) -> DistanceMatrix:
    """k-reciprocal re-ranking with local query expansion.

    Neighbour sets and kernel weights use the joint (query + gallery)
    distance matrix with each row scaled by its maximum; the final blend
    uses the distances exactly as passed in, so ``lambda_jaccard = 1``
    returns ``dist_qg`` unchanged.
    """
    qg, qq, gg = _dist_array(dist_qg), _dist_array(dist_qq), _dist_array(dist_gg)
    Q, G = qg.shape
    if qq.shape != (Q, Q) or gg.shape != (G, G):
        raise ValueError(f"inconsistent shapes: qg {qg.shape}, qq {qq.shape}, gg {gg.shape}")
    n = Q + G
    if params.k1 >= n:
        raise ValueError(f"k1={params.k1} must be smaller than the {n} candidates")

    full = np.block([[qq, qg], [qg.T, gg]])
    row_max = full.max(axis=1, keepdims=True)
    scaled = full / np.where(row_max > 0, row_max, 1.0)
    initial_rank = np.argsort(scaled, axis=1, kind="stable")

    recip = _reciprocal_sets(initial_rank, params.k1)
    half = int(np.around(params.k1 / 2.0))
    recip_half = _reciprocal_sets(initial_rank, half)

    # candidate c in R(i) contributes R_half(c) when |R_half(c) & R(i)| > 2/3 |R_half(c)|
    overlap = recip.astype(np.int64) @ recip_half.T.astype(np.int64)   # [i, c]
    half_size = recip_half.sum(axis=1)
    accept = recip & (overlap > (2.0 / 3.0) * half_size[None, :])
    expanded = recip | ((accept.astype(np.int64) @ recip_half.astype(np.int64)) > 0)

    V = np.where(expanded, np.exp(-scaled), 0.0)
    V /= V.sum(axis=1, keepdims=True)
    if params.k2 != 1:
        V = V[initial_rank[:, :params.k2]].mean(axis=1)

    jaccard = np.empty((Q, G))
    Vg = V[Q:]
    for i in range(Q):
        inter = np.minimum(V[i], Vg).sum(axis=1)
        union = np.maximum(V[i], Vg).sum(axis=1)
        jaccard[i] = 1.0 - inter / union

    lam = params.lambda_jaccard
    return DistanceMatrix(lam * qg + (1.0 - lam) * jaccard, "jaccard-fused")


def fuse_distances(d_v, d_o, d_c, params: FusionParams = FusionParams()) -> DistanceMatrix:
    """``d_v - lambda1 * d_o - lambda2 * d_c`` elementwise; may go negative."""
    v, o, c = _dist_array(d_v), _dist_array(d_o), _dist_array(d_c)
    if not v.shape == o.shape == c.shape:
        raise ValueError(f"shape mismatch: {v.shape}, {o.shape}, {c.shape}")
    return DistanceMatrix(v - params.lambda1 * o - params.lambda2 * c, "jaccard-fused")


def tracklet_rerank(gallery, manifest: GalleryManifest, window: int = 3) -> FeatureMatrix:
    """Replace each tracked item's feature by the mean over ``window`` frames around it.

    Frames are ordered by frame index (ties by position). The window is
    centred on the item and shifted inward at the ends of the tracklet, so
    every item averages ``min(window, tracklet length)`` frames. Items with
    tracklet -1 are left untouched.
    """
    if window < 1:
        raise ValueError(f"window must be >= 1, got {window}")
    feats = as_array(gallery)
    if len(manifest) != feats.shape[0]:
        raise ValueError(f"manifest has {len(manifest)} entries for {feats.shape[0]} features")
    normalized = isinstance(gallery, FeatureMatrix) and gallery.normalized
    out = feats.copy()
    tracklets = manifest.tracklets
    frames = manifest.frames
    left = (window - 1) // 2
    touched = np.zeros(feats.shape[0], dtype=bool)
    for t in np.unique(tracklets[tracklets != -1]):
        members = np.flatnonzero(tracklets == t)
        members = members[np.lexsort((members, frames[members]))]
        n = members.size
        if n == 1 or window == 1:
            continue
        for pos, item in enumerate(members):
            start = min(max(pos - left, 0), max(n - window, 0))
            out[item] = feats[members[start:start + window]].mean(axis=0)
        touched[members] = True
    if normalized and touched.any():
        out[touched] /= np.linalg.norm(out[touched], axis=1, keepdims=True)
    return FeatureMatrix(out, normalized)


def minmax_normalize(d) -> np.ndarray:
    arr = _dist_array(d)
    lo, hi = arr.min(), arr.max()
    if hi == lo:
        return np.zeros_like(arr)
    return (arr - lo) / (hi - lo)


def ensemble_distances(members: Sequence, norm: Literal["minmax", "raw"] = "minmax") -> DistanceMatrix:
    """Elementwise mean of member matrices, each min-max scaled first unless ``norm="raw"``."""
    if not members:
        raise ValueError("ensemble needs at least one member")
    arrays = [_dist_array(m) for m in members]
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ValueError(f"shape mismatch: {a.shape} vs {shape}")
    if norm == "minmax":
        arrays = [minmax_normalize(a) for a in arrays]
    elif norm != "raw":
        raise ValueError(f"unknown ensemble norm {norm!r}")
    # sort per element so the result does not depend on member order
    return DistanceMatrix(np.sort(np.stack(arrays), axis=0).mean(axis=0), "custom")


def rank(dist) -> np.ndarray:
    """Gallery indices per query, ascending by distance, ties to the lower index."""
    return np.argsort(_dist_array(dist), axis=1, kind="stable")

