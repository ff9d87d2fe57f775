"""Feature matrices, the FEAT binary format, and gallery manifests.

FEAT layout (all little-endian)::

    offset  size  field
    0       4     magic b"FEAT"
    4       4     version (u32, = 1)
    8       8     rows (u64)
    16      8     cols (u64)
    24      4     flags (u32, bit 0 = rows are L2-normalized)
    28      4*n   rows*cols float32 values, row-major

Values are held as float64 in memory; float32 exists only at the file
boundary.
"""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, TextIO

import numpy as np

MAGIC = b"FEAT"
VERSION = 1
FLAG_NORMALIZED = 1
HEADER = struct.Struct("<4sIQQI")
NORM_TOL = 1e-5


class FeatError(ValueError):
    """Base class for FEAT stream errors."""


class BadMagicError(FeatError):
    pass


class VersionMismatchError(FeatError):
    pass


class TruncatedError(FeatError):
    pass


class NonFiniteError(FeatError):
    pass


class ManifestError(ValueError):
    """Manifest parse or consistency failure; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class FeatureMatrix:
    """Dense ``rows x dim`` embedding matrix.

    ``data`` is copied to a read-only float64 array on construction.
    """

    data: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim == 1:
            arr = arr.reshape(1, -1)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"feature matrix must be 2-D and non-empty, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("feature matrix contains NaN or Inf")
        if self.normalized:
            norms = np.linalg.norm(arr, axis=1)
            bad = np.flatnonzero(np.abs(norms - 1.0) > NORM_TOL)
            if bad.size:
                raise ValueError(f"row {bad[0]} has norm {norms[bad[0]]!r}, expected 1 for a normalized matrix")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def take(self, indices) -> "FeatureMatrix":
        return FeatureMatrix(self.data[np.asarray(indices, dtype=np.intp)], self.normalized)


def as_array(x) -> np.ndarray:
    """Return the float64 array behind a FeatureMatrix or array-like."""
    if isinstance(x, FeatureMatrix):
        return x.data
    return np.asarray(x, dtype=np.float64)


def l2_normalize_rows(matrix: FeatureMatrix | np.ndarray) -> FeatureMatrix:
    arr = as_array(matrix)
    norms = np.linalg.norm(arr, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValueError(f"cannot normalize zero-norm row {zero[0]}")
    return FeatureMatrix(arr / norms[:, None], normalized=True)


def encode_features(matrix: FeatureMatrix) -> bytes:
    with np.errstate(over="ignore"):
        values = matrix.data.astype("<f4")
    if not np.all(np.isfinite(values)):
        raise NonFiniteError("values overflow float32")
    flags = FLAG_NORMALIZED if matrix.normalized else 0
    return HEADER.pack(MAGIC, VERSION, matrix.rows, matrix.dim, flags) + values.tobytes(order="C")


def write_features(matrix: FeatureMatrix, destination: BinaryIO | str | Path) -> int:
    """Write ``matrix`` as one FEAT block; returns the number of bytes written."""
    payload = encode_features(matrix)
    if isinstance(destination, (str, Path)):
        Path(destination).write_bytes(payload)
        return len(payload)
    written = destination.write(payload)
    if written is not None and written != len(payload):
        raise OSError(f"short write: {written} of {len(payload)} bytes")
    return len(payload)


def _read_exact(stream: BinaryIO, n: int, what: str) -> bytes:
    buf = stream.read(n)
    if buf is None or len(buf) < n:
        got = 0 if buf is None else len(buf)
        raise TruncatedError(f"truncated {what}: expected {n} bytes, got {got}")
    return buf


def read_features(source: BinaryIO | bytes | str | Path) -> FeatureMatrix:
    """Read one FEAT block from a stream, a bytes object, or a file path.

    A stream is left positioned just after the block, so blocks can be read
    back to back.
    """
    if isinstance(source, (bytes, bytearray, memoryview)):
        source = io.BytesIO(bytes(source))
    elif isinstance(source, (str, Path)):
        with open(source, "rb") as fh:
            return read_features(fh)

    head = source.read(HEADER.size)
    if head is None or len(head) < 4:
        raise TruncatedError("stream too short for FEAT magic")
    if head[:4] != MAGIC:
        raise BadMagicError(f"bad magic {head[:4]!r}, expected {MAGIC!r}")
    if len(head) < HEADER.size:
        raise TruncatedError(f"truncated header: {len(head)} of {HEADER.size} bytes")
    _, version, rows, cols, flags = HEADER.unpack(head)
    if version != VERSION:
        raise VersionMismatchError(f"unsupported FEAT version {version}")
    if rows < 1 or cols < 1:
        raise FeatError(f"invalid shape {rows}x{cols}")
    payload = _read_exact(source, 4 * rows * cols, "payload")
    values = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
    if not np.all(np.isfinite(values)):
        raise NonFiniteError("payload contains NaN or Inf")
    return FeatureMatrix(values.astype(np.float64), normalized=bool(flags & FLAG_NORMALIZED))


@dataclass(frozen=True)
class ManifestEntry:
    item_id: str
    identity: int
    camera: int
    tracklet: int = -1
    frame: int = -1


@dataclass(frozen=True)
class GalleryManifest:
    entries: tuple[ManifestEntry, ...]
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        entries = tuple(self.entries)
        object.__setattr__(self, "entries", entries)
        index = {}
        tracklet_cam: dict[int, int] = {}
        for pos, e in enumerate(entries):
            if e.item_id in index:
                raise ManifestError(f"duplicate item_id {e.item_id!r}", pos + 1)
            index[e.item_id] = pos
            if e.tracklet != -1:
                cam = tracklet_cam.setdefault(e.tracklet, e.camera)
                if cam != e.camera:
                    raise ManifestError(
                        f"tracklet {e.tracklet} spans cameras {cam} and {e.camera}", pos + 1
                    )
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, i) -> ManifestEntry:
        return self.entries[i]

    def position(self, item_id: str) -> int:
        return self._index[item_id]

    @property
    def item_ids(self) -> list[str]:
        return [e.item_id for e in self.entries]

    @property
    def identities(self) -> np.ndarray:
        return np.array([e.identity for e in self.entries], dtype=np.int64)

    @property
    def cameras(self) -> np.ndarray:
        return np.array([e.camera for e in self.entries], dtype=np.int64)

    @property
    def tracklets(self) -> np.ndarray:
        return np.array([e.tracklet for e in self.entries], dtype=np.int64)

    @property
    def frames(self) -> np.ndarray:
        return np.array([e.frame for e in self.entries], dtype=np.int64)

    def take(self, indices: Iterable[int]) -> "GalleryManifest":
        return GalleryManifest(tuple(self.entries[int(i)] for i in indices))

    @classmethod
    def from_arrays(cls, identities, cameras, tracklets=None, frames=None, prefix="item") -> "GalleryManifest":
        n = len(identities)
        tracklets = [-1] * n if tracklets is None else tracklets
        frames = [-1] * n if frames is None else frames
        return cls(tuple(
            ManifestEntry(f"{prefix}{i}", int(identities[i]), int(cameras[i]), int(tracklets[i]), int(frames[i]))
            for i in range(n)
        ))


def read_manifest(source: TextIO | str | Path) -> GalleryManifest:
    """Parse ``item_id,identity,camera,tracklet,frame`` lines.

    Lines starting with ``#`` and blank lines are skipped. Use -1 for an
    unknown tracklet or frame.
    """
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            return read_manifest(fh)

    entries = []
    seen: dict[str, int] = {}
    tracklet_cam: dict[int, tuple[int, int]] = {}
    for lineno, raw in enumerate(source, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 5:
            raise ManifestError(f"expected 5 comma-separated fields, got {len(parts)}", lineno)
        item_id = parts[0]
        if not item_id:
            raise ManifestError("empty item_id", lineno)
        try:
            nums = [int(p) for p in parts[1:]]
        except ValueError as exc:
            raise ManifestError(f"non-integer field ({exc})", lineno) from None
        identity, camera, tracklet, frame = nums
        if tracklet < -1 or frame < -1:
            raise ManifestError("tracklet and frame must be >= -1", lineno)
        if item_id in seen:
            raise ManifestError(f"duplicate item_id {item_id!r} (first on line {seen[item_id]})", lineno)
        seen[item_id] = lineno
        if tracklet != -1:
            cam, first = tracklet_cam.setdefault(tracklet, (camera, lineno))
            if cam != camera:
                raise ManifestError(
                    f"tracklet {tracklet} on camera {camera} but camera {cam} on line {first}", lineno
                )
        entries.append(ManifestEntry(item_id, identity, camera, tracklet, frame))
    return GalleryManifest(tuple(entries))


def format_manifest(manifest: GalleryManifest) -> str:
    return "".join(
        f"{e.item_id},{e.identity},{e.camera},{e.tracklet},{e.frame}\n" for e in manifest.entries
    )


def write_manifest(manifest: GalleryManifest, destination: TextIO | str | Path) -> None:
    text = format_manifest(manifest)
    if isinstance(destination, (str, Path)):
        Path(destination).write_text(text, encoding="utf-8", newline="\n")
    else:
        destination.write(text)


@dataclass(frozen=True)
class DatasetSplit:
    query: tuple[int, ...]
    gallery: tuple[int, ...]
    disjoint: bool = True

    def validate(self, n_items: int) -> None:
        for name, idx in (("query", self.query), ("gallery", self.gallery)):
            bad = [i for i in idx if not 0 <= i < n_items]
            if bad:
                raise IndexError(f"{name} index {bad[0]} out of range for {n_items} items")
        if self.disjoint:
            common = set(self.query) & set(self.gallery)
            if common:
                raise ValueError(f"query and gallery overlap at index {min(common)}")
