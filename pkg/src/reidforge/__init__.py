"""Desk-scale vehicle re-identification toolkit: feature I/O, an attention
head with ID + metric losses and adaptive loss weighting, retrieval
post-processing, and mAP/CMC evaluation."""

from .evalkit import EvalProtocol, EvalReport, evaluate
from .featstore import FeatureMatrix, GalleryManifest, read_features, read_manifest, write_features, write_manifest
from .retrieval import DistanceMatrix, k_reciprocal_rerank, pairwise_distance, rank

__all__ = [
    "DistanceMatrix", "EvalProtocol", "EvalReport", "FeatureMatrix", "GalleryManifest", "evaluate",
    "k_reciprocal_rerank", "pairwise_distance", "rank", "read_features", "read_manifest",
    "write_features", "write_manifest",
]
__version__ = "0.1.0"
