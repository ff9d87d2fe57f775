"""Post-backbone head: MixStyle statistics mixing and multi-head attention
aggregation, with hand-written backward passes.

Shapes used throughout: ``B`` batch rows, ``D`` backbone feature width,
``H`` heads, ``d_h`` per-head width, ``N`` identity classes.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .featstore import FeatureMatrix, as_array, read_features, write_features


@dataclass(frozen=True)
class MixStyleConfig:
    alpha: float = 0.1
    active: bool = True
    epsilon_std: float = 1e-6

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError(f"alpha must be > 0, got {self.alpha}")
        if self.epsilon_std < 0:
            raise ValueError(f"epsilon_std must be >= 0, got {self.epsilon_std}")


@dataclass(frozen=True)
class ChannelStats:
    mu: np.ndarray
    sigma: np.ndarray


def channel_stats(batch) -> ChannelStats:
    """Per-channel mean and population std over the batch axis."""
    x = as_array(batch)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("channel_stats needs a non-empty 2-D batch")
    mu = x.mean(axis=0)
    sigma = np.sqrt(((x - mu) ** 2).mean(axis=0))
    return ChannelStats(mu, sigma)


def mixstyle(x, x_shuffled, lam: float, config: MixStyleConfig = MixStyleConfig()) -> np.ndarray:
    """Re-style ``x`` with statistics interpolated towards ``x_shuffled``.

    ``sigma_m * (x - mu(x)) / sigma(x) + mu_m`` where the mixed statistics
    are ``lam * stats(x) + (1 - lam) * stats(x_shuffled)``. Both standard
    deviations are shifted by ``epsilon_std`` before mixing, so the divisor
    is ``sigma(x) + eps`` while self-mixing stays an exact identity.
    """
    x = as_array(x)
    xs = as_array(x_shuffled)
    if x.shape != xs.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {xs.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    own = channel_stats(x)
    other = channel_stats(xs)
    eps = config.epsilon_std
    mu_m = lam * own.mu + (1.0 - lam) * other.mu
    sigma_m = lam * (own.sigma + eps) + (1.0 - lam) * (other.sigma + eps)
    denom = own.sigma + eps
    # constant channels have nothing to re-scale; their centred values are 0
    safe = np.where(denom > 0, denom, 1.0)
    return sigma_m * (x - own.mu) / safe + mu_m


def sample_mix_lambda(rng: np.random.Generator, config: MixStyleConfig = MixStyleConfig()) -> float:
    return float(rng.beta(config.alpha, config.alpha))


def mixstyle_batch(x, rng: np.random.Generator, config: MixStyleConfig = MixStyleConfig()) -> np.ndarray:
    """Training-time MixStyle on a flat batch.

    Batch statistics are taken over rows, so mixing a batch with a
    permutation of itself would be a no-op. Instead the batch is randomly
    permuted and split into two halves that exchange statistics; with an odd
    batch the leftover row passes through untouched. Inactive configs return
    the input without touching ``rng``.
    """
    x = as_array(x)
    if not config.active or x.shape[0] < 4:
        return x.copy()
    perm = rng.permutation(x.shape[0])
    lam = sample_mix_lambda(rng, config)
    half = x.shape[0] // 2
    a, b = perm[:half], perm[half:2 * half]
    out = x.copy()
    out[a] = mixstyle(x[a], x[b], lam, config)
    out[b] = mixstyle(x[b], x[a], lam, config)
    return out


@dataclass(frozen=True)
class HeadParams:
    head_w: np.ndarray   # (H, D, d_h)
    head_b: np.ndarray   # (H, d_h)
    attn_w: np.ndarray   # (H, d_h)
    attn_b: np.ndarray   # (H,)
    cls_w: np.ndarray    # (d_h, N)
    cls_b: np.ndarray    # (N,)

    NAMES = ("head_w", "head_b", "attn_w", "attn_b", "cls_w", "cls_b")

    def __post_init__(self):
        H, D, dh = self.head_w.shape
        N = self.cls_w.shape[1]
        expected = {
            "head_b": (H, dh), "attn_w": (H, dh), "attn_b": (H,),
            "cls_w": (dh, N), "cls_b": (N,),
        }
        if H < 1:
            raise ValueError("need at least one head")
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        for name in self.NAMES:
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")

    @property
    def num_heads(self) -> int:
        return self.head_w.shape[0]

    @property
    def in_dim(self) -> int:
        return self.head_w.shape[1]

    @property
    def head_dim(self) -> int:
        return self.head_w.shape[2]

    @property
    def num_classes(self) -> int:
        return self.cls_w.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.NAMES}

    def updated(self, grads: "HeadGrads", lr: float) -> "HeadParams":
        """Plain SGD step."""
        return HeadParams(**{n: getattr(self, n) - lr * getattr(grads, n) for n in self.NAMES})


@dataclass(frozen=True)
class HeadGrads:
    head_w: np.ndarray
    head_b: np.ndarray
    attn_w: np.ndarray
    attn_b: np.ndarray
    cls_w: np.ndarray
    cls_b: np.ndarray
    x: np.ndarray


def init_head(rng: np.random.Generator, in_dim: int, head_dim: int | None, num_heads: int,
              num_classes: int) -> HeadParams:
    """Weights ~ N(0, 1/fan_in), biases zero. ``head_dim`` defaults to ``in_dim // num_heads``."""
    if head_dim is None:
        head_dim = in_dim // num_heads
    for name, v in (("in_dim", in_dim), ("head_dim", head_dim), ("num_heads", num_heads),
                    ("num_classes", num_classes)):
        if v < 1:
            raise ValueError(f"{name} must be positive, got {v}")
    return HeadParams(
        head_w=rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(num_heads, in_dim, head_dim)),
        head_b=np.zeros((num_heads, head_dim)),
        attn_w=rng.normal(0.0, 1.0 / np.sqrt(head_dim), size=(num_heads, head_dim)),
        attn_b=np.zeros(num_heads),
        cls_w=rng.normal(0.0, 1.0 / np.sqrt(head_dim), size=(head_dim, num_classes)),
        cls_b=np.zeros(num_classes),
    )


def softmax(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    z = scores - scores.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(weights: np.ndarray, grad_weights: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the scores of a row-wise softmax, given dL/dweights."""
    inner = (weights * grad_weights).sum(axis=-1, keepdims=True)
    return weights * (grad_weights - inner)


@dataclass(frozen=True)
class HeadCache:
    params: HeadParams = field(repr=False)
    x: np.ndarray
    head_out: np.ndarray    # (B, H, d_h)
    weights: np.ndarray     # (B, H)
    embedding: np.ndarray   # (B, d_h)


@dataclass(frozen=True)
class HeadOutput:
    embedding: np.ndarray
    attention: np.ndarray
    logits: np.ndarray
    cache: HeadCache


def multihead_forward(x, params: HeadParams) -> HeadOutput:
    x = as_array(x)
    if x.ndim != 2 or x.shape[1] != params.in_dim:
        raise ValueError(f"input shape {x.shape} does not match head input dim {params.in_dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")
    head_out = np.einsum("bd,hde->bhe", x, params.head_w) + params.head_b
    scores = np.einsum("bhe,he->bh", head_out, params.attn_w) + params.attn_b
    weights = softmax(scores, axis=1)
    embedding = np.einsum("bh,bhe->be", weights, head_out)
    logits = embedding @ params.cls_w + params.cls_b
    cache = HeadCache(params, x, head_out, weights, embedding)
    return HeadOutput(embedding, weights, logits, cache)


class StaleCacheError(ValueError):
    pass


def multihead_backward(grad_embedding, grad_logits, cache: HeadCache, params: HeadParams) -> HeadGrads:
    """Exact gradients of the forward map for upstream ``dL/dembedding`` and ``dL/dlogits``.

    Either upstream gradient may be ``None`` (treated as zero).
    """
    if cache.params is not params:
        raise StaleCacheError("cache was produced with different parameters")
    B = cache.x.shape[0]
    dh, N = params.head_dim, params.num_classes
    g_emb = np.zeros((B, dh)) if grad_embedding is None else np.asarray(grad_embedding, dtype=np.float64)
    g_log = np.zeros((B, N)) if grad_logits is None else np.asarray(grad_logits, dtype=np.float64)
    if g_emb.shape != (B, dh) or g_log.shape != (B, N):
        raise StaleCacheError(
            f"upstream gradient shapes {g_emb.shape}, {g_log.shape} do not match cache ({B}, {dh}), ({B}, {N})"
        )

    g_cls_w = cache.embedding.T @ g_log
    g_cls_b = g_log.sum(axis=0)
    g_e = g_emb + g_log @ params.cls_w.T

    # embedding = sum_h w_h * o_h
    g_o = cache.weights[:, :, None] * g_e[:, None, :]
    g_w = np.einsum("be,bhe->bh", g_e, cache.head_out)
    g_s = softmax_backward(cache.weights, g_w)

    g_attn_w = np.einsum("bh,bhe->he", g_s, cache.head_out)
    g_attn_b = g_s.sum(axis=0)
    g_o = g_o + g_s[:, :, None] * params.attn_w[None, :, :]

    g_head_w = np.einsum("bd,bhe->hde", cache.x, g_o)
    g_head_b = g_o.sum(axis=0)
    g_x = np.einsum("bhe,hde->bd", g_o, params.head_w)
    return HeadGrads(g_head_w, g_head_b, g_attn_w, g_attn_b, g_cls_w, g_cls_b, g_x)


# Parameter container: b"FPAK", u32 version, u32 tensor count, then for each
# tensor a u32 name length, UTF-8 name, u32 ndim, ndim x u64 shape, and one
# FEAT block holding the tensor reshaped to (prod(shape[:-1]) or 1, shape[-1]).
PACK_MAGIC = b"FPAK"
PACK_HEADER = struct.Struct("<4sII")


def save_head(params: HeadParams, destination: str | Path | BinaryIO) -> None:
    if isinstance(destination, (str, Path)):
        with open(destination, "wb") as fh:
            return save_head(params, fh)
    tensors = params.tensors()
    destination.write(PACK_HEADER.pack(PACK_MAGIC, 1, len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        destination.write(struct.pack("<I", len(raw)) + raw)
        destination.write(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        write_features(FeatureMatrix(arr.reshape(-1, arr.shape[-1])), destination)


def load_head(source: str | Path | BinaryIO) -> HeadParams:
    if isinstance(source, (str, Path)):
        with open(source, "rb") as fh:
            return load_head(fh)
    magic, version, count = PACK_HEADER.unpack(source.read(PACK_HEADER.size))
    if magic != PACK_MAGIC or version != 1:
        raise ValueError(f"not a head parameter pack (magic {magic!r}, version {version})")
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", source.read(4))
        name = source.read(n).decode("utf-8")
        (ndim,) = struct.unpack("<I", source.read(4))
        shape = struct.unpack(f"<{ndim}Q", source.read(8 * ndim))
        tensors[name] = read_features(source).data.reshape(shape).copy()
    missing = set(HeadParams.NAMES) - set(tensors)
    if missing:
        raise ValueError(f"parameter pack missing tensors: {sorted(missing)}")
    return HeadParams(**{n: tensors[n] for n in HeadParams.NAMES})
