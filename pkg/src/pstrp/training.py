"""Loss composition and the optimization loop.

Per step: sample a batch of cubes, slice both streams, compute relation
targets on the canonical (unshuffled) patches, shuffle each stream with a
fresh per-sample permutation, run the model, align the distance
predictions back to canonical order, and take one Adam step on the
weighted sum of the two order cross-entropies and the two distance
regressions.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import patching, relations
from .errors import TrainingDivergedError, ValidationError
from .model import TwoStreamModel, save_checkpoint
from .patching import Permutation
from .relations import RelationMatrix
from .store import StcStore

log = logging.getLogger(__name__)


@dataclass
class LossWeights:
    lambda_s: float = 1.0
    lambda_t: float = 1.0
    lambda_can: float = 0.1
    lambda_cos: float = 0.1

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValidationError(f"loss weight {name} must be nonnegative")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 1e-5
    epochs: int = 50
    batch_size: int = 96
    seed: int = 0
    dataset_name: str = ""


@dataclass
class EpochStats:
    epoch: int
    order_spatial: float
    order_temporal: float
    canberra: float
    cosine: float
    total: float


@dataclass
class TrainResult:
    history: list[EpochStats]
    checkpoint_path: Path
    loss_log_path: Path


def order_loss(logits, labels) -> torch.Tensor:
    """Mean cross-entropy between each slot's logits and its true position.

    ``logits`` is (n, n) or (batch, n, n); ``labels`` is a
    :class:`Permutation` or an integer array of matching leading shape.
    """
    logits = torch.as_tensor(logits)
    if isinstance(labels, Permutation):
        labels = labels.pi
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    n = logits.shape[-1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n):
        raise ValidationError(f"order labels must lie in 0..{n - 1}")
    return F.cross_entropy(logits.reshape(-1, n), labels.reshape(-1))


def squared_offdiag_mean(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean squared error over the n*(n-1) off-diagonal entries.

    Accepts (n, n) or (batch, n, n); both inputs must already be
    zero-diagonal, which holds for every relation matrix and prediction.
    """
    if pred.shape != target.shape:
        raise ValidationError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    n = pred.shape[-1]
    diff = pred - target
    batch = int(np.prod(pred.shape[:-2])) if pred.dim() > 2 else 1
    return (diff * diff).sum() / (batch * n * (n - 1))


def distance_loss(pred: RelationMatrix, target: RelationMatrix) -> float:
    """Mean squared off-diagonal difference between two relation matrices."""
    if pred.kind != target.kind:
        raise ValidationError(f"relation kind mismatch: {pred.kind} vs {target.kind}")
    if pred.n != target.n:
        raise ValidationError(f"relation size mismatch: {pred.n} vs {target.n}")
    return float(
        squared_offdiag_mean(
            torch.from_numpy(np.asarray(pred.d, dtype=np.float64)),
            torch.from_numpy(np.asarray(target.d, dtype=np.float64)),
        )
    )


def total_loss(order_spatial, order_temporal, canberra, cosine, weights: LossWeights):
    """Weighted sum of the four loss parts; aborts on any non-finite part."""
    parts = {
        "order_spatial": order_spatial,
        "order_temporal": order_temporal,
        "canberra": canberra,
        "cosine": cosine,
    }
    for name, value in parts.items():
        scalar = float(value.detach()) if torch.is_tensor(value) else float(value)
        if not math.isfinite(scalar):
            raise TrainingDivergedError(f"non-finite loss part {name}: {scalar}")
    return (
        weights.lambda_s * order_spatial
        + weights.lambda_t * order_temporal
        + weights.lambda_can * canberra
        + weights.lambda_cos * cosine
    )


def _relation_targets(store: StcStore, index: int, spatial_grid: int, cache: dict):
    """Canonical-order relation targets for one stored cube, memoized."""
    if index not in cache:
        cube = store.load_cubes([index])[0]
        spatial = patching.slice_spatial(cube, spatial_grid)
        temporal = patching.slice_temporal(cube)
        cache[index] = (
            torch.from_numpy(relations.canberra_matrix(spatial).d.astype(np.float32)),
            torch.from_numpy(relations.cosine_matrix(temporal).d.astype(np.float32)),
        )
    return cache[index]


def _assemble_batch(store, indices, spatial_grid, rng, target_cache):
    """Slice, shuffle, and stack one training batch.

    Returns flattened shuffled patches, per-slot labels, inverse
    permutations, and canonical relation targets for both streams.
    """
    cubes = store.load_cubes(indices)
    spatial_in, temporal_in = [], []
    labels_s, labels_t = [], []
    inv_s, inv_t = [], []
    targets_can, targets_cos = [], []
    for row, idx in enumerate(indices):
        can, cos = _relation_targets(store, idx, spatial_grid, target_cache)
        targets_can.append(can)
        targets_cos.append(cos)

        spatial = patching.slice_spatial(cubes[row], spatial_grid)
        temporal = patching.slice_temporal(cubes[row])
        shuffled_s, perm_s = patching.shuffle(spatial, rng)
        shuffled_t, perm_t = patching.shuffle(temporal, rng)
        spatial_in.append(shuffled_s.flattened())
        temporal_in.append(shuffled_t.flattened())
        labels_s.append(perm_s.pi)
        labels_t.append(perm_t.pi)
        inv_s.append(perm_s.inverse())
        inv_t.append(perm_t.inverse())

    def pack(patches, labels, inv, targets):
        return (
            torch.from_numpy(np.stack(patches)),
            torch.from_numpy(np.stack(labels)),
            torch.from_numpy(np.stack(inv)),
            torch.stack(targets),
        )

    return (
        pack(spatial_in, labels_s, inv_s, targets_can),
        pack(temporal_in, labels_t, inv_t, targets_cos),
    )


def _align_batch(pred: torch.Tensor, inv: torch.Tensor) -> torch.Tensor:
    """Conjugate each sample's pairwise prediction back to canonical order."""
    batch = pred.shape[0]
    rows = torch.arange(batch).view(batch, 1, 1)
    return pred[rows, inv.unsqueeze(-1), inv.unsqueeze(-2)]


def train(
    store: StcStore,
    model: TwoStreamModel,
    tc: TrainConfig,
    weights: LossWeights,
    *,
    spatial_grid: int,
    out_dir,
    checkpoint_every: int = 0,
    run_config: dict | None = None,
) -> TrainResult:
    """Optimize the model on a cube store and write checkpoint + loss log.

    Deterministic for a fixed ``tc.seed``: batch order, permutations, and
    initialization state all derive from it. ``epochs == 0`` just writes the
    initial weights, which is how an untrained baseline checkpoint is made.
    """
    if len(store) == 0:
        raise ValidationError("empty STC store")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_path = out_dir / "checkpoint.pt"
    log_path = out_dir / "loss_log.csv"

    preprocess = {
        "cube_size": store.cube_size,
        "half_window": store.half_window,
        "spatial_grid": spatial_grid,
        "channels": store.channels,
        "normalization": "unit_range",
    }

    torch.manual_seed(tc.seed)
    rng = np.random.default_rng(tc.seed)
    optimizer = torch.optim.Adam(
        model.parameters(),
        lr=tc.learning_rate,
        betas=(tc.beta1, tc.beta2),
        weight_decay=tc.weight_decay,
    )

    target_cache: dict = {}
    history: list[EpochStats] = []
    n_cubes = len(store)
    batch_size = min(tc.batch_size, n_cubes)

    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "L_S", "L_T", "L_Can", "L_Cos", "total"])

        for epoch in range(1, tc.epochs + 1):
            model.train()
            order = rng.permutation(n_cubes)
            sums = np.zeros(5)
            for start in range(0, n_cubes, batch_size):
                indices = order[start : start + batch_size]
                (sp, lab_s, inv_s, tgt_can), (tp, lab_t, inv_t, tgt_cos) = (
                    _assemble_batch(store, indices, spatial_grid, rng, target_cache)
                )
                out_s, out_t = model(sp, tp)
                loss_s = order_loss(out_s.order_logits, lab_s)
                loss_t = order_loss(out_t.order_logits, lab_t)
                loss_can = squared_offdiag_mean(
                    _align_batch(out_s.distance_pred, inv_s), tgt_can
                )
                loss_cos = squared_offdiag_mean(
                    _align_batch(out_t.distance_pred, inv_t), tgt_cos
                )
                loss = total_loss(loss_s, loss_t, loss_can, loss_cos, weights)

                optimizer.zero_grad()
                loss.backward()
                optimizer.step()

                k = len(indices)
                sums += k * np.array(
                    [loss_s.item(), loss_t.item(), loss_can.item(),
                     loss_cos.item(), loss.item()]
                )

            means = sums / n_cubes
            stats = EpochStats(epoch, *means)
            history.append(stats)
            writer.writerow(
                [epoch] + [f"{v:.8f}" for v in means]
            )
            fh.flush()
            log.info(
                "epoch %d/%d total=%.5f (S=%.5f T=%.5f Can=%.5f Cos=%.5f)",
                epoch, tc.epochs, stats.total, stats.order_spatial,
                stats.order_temporal, stats.canberra, stats.cosine,
            )
            if checkpoint_every and epoch % checkpoint_every == 0:
                save_checkpoint(ckpt_path, model, preprocess, run_config)

    save_checkpoint(ckpt_path, model, preprocess, run_config)
    return TrainResult(history=history, checkpoint_path=ckpt_path, loss_log_path=log_path)
