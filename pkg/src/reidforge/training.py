"""Desk-scale training loop for the attention head."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .featstore import FeatureMatrix, GalleryManifest, as_array
from .losses import IdLossConfig, SupConConfig, id_loss, supcon_loss, triplet_loss
from .malw import MalwState, MalwUpdate, malw_init, malw_step
from .reidnet import HeadParams, MixStyleConfig, init_head, mixstyle_batch, multihead_backward, multihead_forward
from .synth import pk_sample

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 60
    P: int = 8
    K_inst: int = 4
    lr: float = 0.05
    num_heads: int = 2
    head_dim: int | None = None
    metric_loss: Literal["supcon", "triplet"] = "supcon"
    tau: float = 0.1
    margin: float = 0.3
    id_epsilon: float = 0.1
    malw: bool = True
    malw_k: int = 20
    malw_alpha: float = 0.9
    malw_mode: Literal["literal", "ema"] = "literal"
    mixstyle: MixStyleConfig = field(default_factory=lambda: MixStyleConfig(active=False))
    steps_per_epoch: int | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "P", "K_inst", "num_heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.P < 2 or self.K_inst < 2:
            raise ValueError("PK batches need at least two identities with two instances each")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.metric_loss not in ("supcon", "triplet"):
            raise ValueError(f"unknown metric loss {self.metric_loss!r}")

    @property
    def batch_size(self) -> int:
        return self.P * self.K_inst


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, what: str):
        self.step = step
        super().__init__(f"non-finite {what} at step {step}")


@dataclass
class TrainResult:
    params: HeadParams
    classes: np.ndarray                 # identity label for each classifier output
    id_losses: list[float]
    metric_losses: list[float]
    lambda_id: list[float]
    trajectory: list[MalwUpdate]

    def losses_csv(self) -> str:
        rows = ["step,id_loss,metric_loss,lambda_id"]
        rows += [f"{i},{a!r},{b!r},{c!r}" for i, (a, b, c)
                 in enumerate(zip(self.id_losses, self.metric_losses, self.lambda_id))]
        return "\n".join(rows) + "\n"


def _normalize_with_backward(e: np.ndarray):
    norms = np.linalg.norm(e, axis=1, keepdims=True)
    z = e / norms

    def backward(g: np.ndarray) -> np.ndarray:
        return (g - z * (z * g).sum(axis=1, keepdims=True)) / norms

    return z, backward


def train_head(features, manifest: GalleryManifest, config: TrainConfig = TrainConfig()) -> TrainResult:
    """SGD on ID loss + metric loss with PK batches.

    Steps per epoch default to ``ceil(items / batch_size)``. All randomness
    flows from ``config.seed``.
    """
    x_all = as_array(features)
    if len(manifest) != x_all.shape[0]:
        raise ValueError("manifest and features disagree in length")
    classes, labels_all = np.unique(manifest.identities, return_inverse=True)
    if classes.size < 2:
        raise ValueError("training needs at least two identities")
    rng = np.random.default_rng(config.seed)
    params = init_head(rng, x_all.shape[1], config.head_dim, config.num_heads, classes.size)
    id_cfg = IdLossConfig(classes.size, config.id_epsilon)
    sup_cfg = SupConConfig(config.tau)
    state: MalwState | None = malw_init(config.malw_k, config.malw_alpha, config.malw_mode) if config.malw else None

    steps = config.steps_per_epoch or math.ceil(x_all.shape[0] / config.batch_size)
    P = min(config.P, classes.size)
    result = TrainResult(params, classes, [], [], [], [])
    step = 0
    for epoch in range(config.epochs):
        for _ in range(steps):
            idx = pk_sample(labels_all, P, config.K_inst, rng)
            x = mixstyle_batch(x_all[idx], rng, config.mixstyle)
            y = labels_all[idx]
            out = multihead_forward(x, params)
            ce = id_loss(out.logits, y, id_cfg)
            z, norm_back = _normalize_with_backward(out.embedding)
            if config.metric_loss == "supcon":
                metric = supcon_loss(z, y, sup_cfg)
            else:
                metric = triplet_loss(z, y, config.margin)
            if not (math.isfinite(ce.value) and math.isfinite(metric.value)):
                raise TrainingDiverged(step, "loss")

            if state is not None:
                w_id, w_metric = state.lambda_id, state.lambda_metric
                _, state = malw_step(state, ce.value, metric.value)
                if state.last_update is not None and state.last_update.iteration == step:
                    result.trajectory.append(state.last_update)
            else:
                w_id = w_metric = 1.0

            grads = multihead_backward(norm_back(w_metric * metric.grad), w_id * ce.grad, out.cache, params)
            try:
                params = params.updated(grads, config.lr)
            except ValueError:
                raise TrainingDiverged(step, "parameters") from None
            result.id_losses.append(ce.value)
            result.metric_losses.append(metric.value)
            result.lambda_id.append(w_id)
            step += 1
        log.debug("epoch %d: id=%.4f metric=%.4f", epoch, result.id_losses[-1], result.metric_losses[-1])
    result.params = params
    return result


def embed(features, params: HeadParams) -> FeatureMatrix:
    """Aggregated head embeddings, L2-normalized."""
    e = multihead_forward(as_array(features), params).embedding
    return FeatureMatrix(e / np.linalg.norm(e, axis=1, keepdims=True), normalized=True)
