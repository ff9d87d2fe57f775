"""Synthetic two-domain embedding data and PK batch sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .featstore import FeatureMatrix, GalleryManifest, ManifestEntry


@dataclass(frozen=True)
class SyntheticSpec:
    """Identities on the unit sphere plus isotropic noise.

    The second half of every identity's samples belongs to the "synthetic"
    domain: its features are mapped through ``x * domain_scale +
    domain_offset`` and its cameras are numbered from ``num_cameras`` up.
    With ``tracklet_len > 1`` each sample becomes a tracklet of that many
    frames, each frame the sample plus ``tracklet_sigma`` jitter.
    """

    num_identities: int = 50
    samples_per_identity: int = 16
    dim: int = 32
    domain_scale: float | tuple[float, ...] = 1.0
    domain_offset: float | tuple[float, ...] = 0.0
    noise_sigma: float = 0.1
    seed: int = 0
    num_cameras: int = 2
    tracklet_len: int = 1
    tracklet_sigma: float = 0.0

    def __post_init__(self):
        for name in ("num_identities", "samples_per_identity", "dim", "num_cameras", "tracklet_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.noise_sigma < 0 or self.tracklet_sigma < 0:
            raise ValueError("noise levels must be >= 0")


def generate_synthetic(spec: SyntheticSpec) -> tuple[FeatureMatrix, GalleryManifest]:
    rng = np.random.default_rng(spec.seed)
    centroids = rng.normal(size=(spec.num_identities, spec.dim))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    scale = np.broadcast_to(np.asarray(spec.domain_scale, dtype=np.float64), (spec.dim,))
    offset = np.broadcast_to(np.asarray(spec.domain_offset, dtype=np.float64), (spec.dim,))
    n_real = spec.samples_per_identity // 2

    rows, entries = [], []
    tracklet = 0
    for ident in range(spec.num_identities):
        for j in range(spec.samples_per_identity):
            base = centroids[ident] + spec.noise_sigma * rng.normal(size=spec.dim)
            domain = 0 if j < n_real else 1
            camera = domain * spec.num_cameras + j % spec.num_cameras
            frames = base + spec.tracklet_sigma * rng.normal(size=(spec.tracklet_len, spec.dim))
            if spec.tracklet_len == 1:
                frames = base[None, :]
            if domain == 1:
                frames = frames * scale + offset
            for f, feat in enumerate(frames):
                rows.append(feat)
                if spec.tracklet_len == 1:
                    entries.append(ManifestEntry(f"id{ident}_s{j}", ident, camera))
                else:
                    entries.append(ManifestEntry(f"id{ident}_s{j}_f{f}", ident, camera, tracklet, f))
            tracklet += 1
    return FeatureMatrix(np.array(rows)), GalleryManifest(tuple(entries))


def domain_of(manifest: GalleryManifest, num_cameras: int) -> np.ndarray:
    """0 for real-domain items, 1 for synthetic-domain items."""
    return (manifest.cameras >= num_cameras).astype(np.int64)


def pk_sample(manifest: GalleryManifest | np.ndarray, P: int, K: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``P`` distinct identities with ``K`` items each.

    Identities with fewer than ``K`` items are sampled with replacement.
    """
    ids = manifest.identities if isinstance(manifest, GalleryManifest) else np.asarray(manifest)
    unique = np.unique(ids)
    if unique.size < P:
        raise ValueError(f"need {P} identities, only {unique.size} available")
    chosen = rng.choice(unique, size=P, replace=False)
    batch = []
    for ident in chosen:
        members = np.flatnonzero(ids == ident)
        batch.append(rng.choice(members, size=K, replace=members.size < K))
    return np.concatenate(batch)
