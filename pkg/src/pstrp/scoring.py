"""Anomaly scoring and frame-level AUROC evaluation.

The chain per test video: extract ROIs and cubes, run the model under
seeded inference permutations, align each order matrix back to canonical
order, take the minimum of its diagonal as the object-level regularity,
minimize over objects per frame, min-max normalize per video and stream,
combine the streams with fixed weights, and report S = 1 - R as the
anomaly score. AUROC is computed over all concatenated test frames with
a midrank Mann-Whitney statistic.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import numpy as np
import torch

from . import patching, roi
from .errors import CheckpointMismatchError, EvaluationError, ValidationError
from .ingestion import FrameSequence
from .model import TwoStreamModel, load_checkpoint
from .patching import OrderPredictionMatrix

log = logging.getLogger(__name__)

SCORES_HEADER = ["video_id", "frame", "R_s", "R_t", "R", "S", "label"]


@dataclass
class RegularityRecord:
    """Object-level regularity of one cube: min diagonal of each aligned
    order matrix."""

    video_id: str
    frame: int
    object_index: int
    reg_spatial: float
    reg_temporal: float


@dataclass
class AnomalyScoreSeries:
    """Per-frame score arrays for one video (all of length frame_count)."""

    video_id: str
    reg_spatial: np.ndarray
    reg_temporal: np.ndarray
    regularity: np.ndarray
    anomaly: np.ndarray
    labels: np.ndarray | None = None


def object_regularity(matrix: OrderPredictionMatrix) -> float:
    """Minimum diagonal entry of an aligned order-prediction matrix."""
    if not matrix.aligned:
        raise ValidationError("object_regularity requires an aligned order matrix")
    return float(np.diag(matrix.m).min())


def frame_regularity(records: list[RegularityRecord]) -> tuple[float, float]:
    """Componentwise minimum over the frame's objects; (1, 1) when empty."""
    if not records:
        return 1.0, 1.0
    return (
        min(r.reg_spatial for r in records),
        min(r.reg_temporal for r in records),
    )


def normalize_video(values: np.ndarray) -> np.ndarray:
    """Min-max normalize one video's frame scores onto [0, 1].

    A constant array maps to all-ones: a video with no score variation
    carries no internal anomaly signal.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValidationError("cannot normalize an empty score array")
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.ones_like(values)
    return (values - lo) / (hi - lo)


def combine(
    reg_spatial: np.ndarray,
    reg_temporal: np.ndarray,
    w_spatial: float,
    w_temporal: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Weighted regularity R and anomaly score S = 1 - R."""
    reg_spatial = np.asarray(reg_spatial, dtype=np.float64)
    reg_temporal = np.asarray(reg_temporal, dtype=np.float64)
    if reg_spatial.shape != reg_temporal.shape:
        raise ValidationError(
            f"stream length mismatch: {reg_spatial.shape} vs {reg_temporal.shape}"
        )
    regularity = w_spatial * reg_spatial + w_temporal * reg_temporal
    return regularity, 1.0 - regularity


def gaussian_smooth(values: np.ndarray, sigma: float) -> np.ndarray:
    """Optional temporal smoothing; off by default and excluded from
    acceptance runs."""
    if sigma <= 0:
        return np.asarray(values, dtype=np.float64)
    radius = max(int(round(3 * sigma)), 1)
    xs = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (xs / sigma) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(np.asarray(values, dtype=np.float64), radius, mode="edge")
    return np.convolve(padded, kernel, mode="valid")


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def score_cubes(
    model: TwoStreamModel,
    cubes: list[roi.SpatioTemporalCube],
    spatial_grid: int,
    k_perm: int,
    rng: np.random.Generator,
    batch_size: int = 128,
) -> list[RegularityRecord]:
    """Object-level regularity for every cube, averaged over ``k_perm``
    seeded inference permutations per stream."""
    if not cubes:
        return []
    model.eval()

    jobs = []  # (cube index, perm_s, perm_t, flattened inputs)
    for ci, cube in enumerate(cubes):
        spatial = patching.slice_spatial(cube, spatial_grid)
        temporal = patching.slice_temporal(cube)
        for _ in range(k_perm):
            shuffled_s, perm_s = patching.shuffle(spatial, rng)
            shuffled_t, perm_t = patching.shuffle(temporal, rng)
            jobs.append((ci, perm_s, perm_t, shuffled_s.flattened(), shuffled_t.flattened()))

    sums = np.zeros((len(cubes), 2))
    with torch.no_grad():
        for start in range(0, len(jobs), batch_size):
            chunk = jobs[start : start + batch_size]
            sp = torch.from_numpy(np.stack([j[3] for j in chunk]))
            tp = torch.from_numpy(np.stack([j[4] for j in chunk]))
            out_s, out_t = model(sp, tp)
            probs_s = _softmax_rows(out_s.order_logits.numpy().astype(np.float64))
            probs_t = _softmax_rows(out_t.order_logits.numpy().astype(np.float64))
            for row, (ci, perm_s, perm_t, _, _) in enumerate(chunk):
                aligned_s = patching.align_matrix(
                    OrderPredictionMatrix(probs_s[row]), perm_s
                )
                aligned_t = patching.align_matrix(
                    OrderPredictionMatrix(probs_t[row]), perm_t
                )
                sums[ci, 0] += object_regularity(aligned_s)
                sums[ci, 1] += object_regularity(aligned_t)
    means = sums / k_perm

    records = []
    objects_in_frame: dict[int, int] = {}
    for ci, cube in enumerate(cubes):
        t = cube.center_frame_index
        records.append(
            RegularityRecord(
                video_id=cube.video_id,
                frame=t,
                object_index=objects_in_frame.get(t, 0),
                reg_spatial=float(means[ci, 0]),
                reg_temporal=float(means[ci, 1]),
            )
        )
        objects_in_frame[t] = objects_in_frame.get(t, 0) + 1
    return records


def score_video(
    model: TwoStreamModel,
    seq: FrameSequence,
    *,
    half_window: int,
    spatial_grid: int,
    k_perm: int,
    rng: np.random.Generator,
    motion_params: roi.MotionParams,
    appearance: dict[int, list[roi.BoundingBox]] | None = None,
    merge_iou: float = 0.5,
    w_spatial: float = 0.5,
    w_temporal: float = 0.5,
    smoothing_sigma: float = 0.0,
) -> AnomalyScoreSeries:
    """Full scoring chain for one video.

    Frames with no scored objects get regularity 1.0; frames inside the
    cube boundary margin inherit the nearest scored frame's value before
    per-video normalization.
    """
    n_frames = seq.frame_count
    rois_per_frame = {}
    for t in range(n_frames):
        motion = roi.motion_rois(seq, t, motion_params) if t >= 1 else []
        app = (appearance or {}).get(t, [])
        rois_per_frame[t] = roi.merge_rois(app, motion, merge_iou)
    cubes, skipped = roi.build_stcs(seq, rois_per_frame, half_window)
    if skipped:
        log.info("%s: skipped %d degenerate boxes", seq.video_id, skipped)

    records = score_cubes(model, cubes, spatial_grid, k_perm, rng)
    by_frame: dict[int, list[RegularityRecord]] = {}
    for record in records:
        by_frame.setdefault(record.frame, []).append(record)

    first, last = half_window, n_frames - half_window - 1
    reg_s = np.ones(n_frames)
    reg_t = np.ones(n_frames)
    if last >= first:
        for t in range(first, last + 1):
            reg_s[t], reg_t[t] = frame_regularity(by_frame.get(t, []))
        for t in range(n_frames):  # boundary frames inherit the nearest score
            nearest = min(max(t, first), last)
            reg_s[t], reg_t[t] = reg_s[nearest], reg_t[nearest]

    norm_s = normalize_video(reg_s)
    norm_t = normalize_video(reg_t)
    regularity, anomaly = combine(norm_s, norm_t, w_spatial, w_temporal)
    if smoothing_sigma > 0:
        anomaly = gaussian_smooth(anomaly, smoothing_sigma)
        regularity = 1.0 - anomaly
    return AnomalyScoreSeries(
        video_id=seq.video_id,
        reg_spatial=norm_s,
        reg_temporal=norm_t,
        regularity=regularity,
        anomaly=anomaly,
    )


def score_dataset(checkpoint_path, test_videos, cfg) -> list[AnomalyScoreSeries]:
    """Score every labeled test video with a trained checkpoint.

    Refuses to run when the checkpoint's preprocessing geometry disagrees
    with the pipeline config. Deterministic for a fixed ``cfg.patching.seed``.
    """
    model, preprocess, _ = load_checkpoint(checkpoint_path)
    mismatches = []
    if preprocess["half_window"] != cfg.extraction.half_window:
        mismatches.append(
            f"half_window {preprocess['half_window']} != {cfg.extraction.half_window}"
        )
    if preprocess["spatial_grid"] != cfg.patching.spatial_grid:
        mismatches.append(
            f"spatial_grid {preprocess['spatial_grid']} != {cfg.patching.spatial_grid}"
        )
    if test_videos and preprocess["channels"] != test_videos[0][0].channels:
        mismatches.append(
            f"channels {preprocess['channels']} != {test_videos[0][0].channels}"
        )
    if mismatches:
        raise CheckpointMismatchError(
            "checkpoint/config mismatch: " + "; ".join(mismatches)
        )

    motion_params = roi.MotionParams(
        diff_threshold=cfg.extraction.diff_threshold,
        min_area=cfg.extraction.min_area,
        dilation=cfg.extraction.dilation,
    )
    series = []
    for vi, (seq, labels) in enumerate(test_videos):
        appearance = None
        if cfg.extraction.boxes_file:
            appearance = roi.load_appearance_rois(
                cfg.extraction.boxes_file, seq.video_id,
                cfg.extraction.confidence_threshold,
            )
        rng = np.random.default_rng([cfg.patching.seed, vi])
        scored = score_video(
            model,
            seq,
            half_window=cfg.extraction.half_window,
            spatial_grid=cfg.patching.spatial_grid,
            k_perm=cfg.patching.k_perm,
            rng=rng,
            motion_params=motion_params,
            appearance=appearance,
            merge_iou=cfg.extraction.merge_iou,
            w_spatial=cfg.scoring.omega_s,
            w_temporal=cfg.scoring.omega_t,
            smoothing_sigma=(
                cfg.scoring.smoothing_sigma if cfg.scoring.smoothing else 0.0
            ),
        )
        scored.labels = labels.labels
        series.append(scored)
    return series


def auroc(scores, labels) -> float:
    """Frame-level AUROC from the midrank Mann-Whitney statistic.

    ``labels`` are binary with 1 marking anomalous frames; higher scores
    must indicate more anomalous. Raises when only one class is present.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(np.int64)
    if scores.size != labels.size:
        raise ValidationError(f"{scores.size} scores vs {labels.size} labels")
    positives = int(labels.sum())
    negatives = labels.size - positives
    if positives == 0 or negatives == 0:
        raise EvaluationError("AUROC undefined: labels contain a single class")

    _, inverse, counts = np.unique(scores, return_inverse=True, return_counts=True)
    csum = np.cumsum(counts)
    midranks = csum - (counts - 1) / 2.0  # average rank within each tie group
    ranks = midranks[inverse]
    positive_rank_sum = ranks[labels == 1].sum()
    return float(
        (positive_rank_sum - positives * (positives + 1) / 2.0)
        / (positives * negatives)
    )


def write_scores_csv(path, series: list[AnomalyScoreSeries]):
    """One `video_id,frame,R_s,R_t,R,S,label` row per frame."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SCORES_HEADER)
        for s in series:
            for t in range(len(s.anomaly)):
                label = "" if s.labels is None else int(s.labels[t])
                writer.writerow(
                    [
                        s.video_id,
                        t,
                        f"{s.reg_spatial[t]:.8f}",
                        f"{s.reg_temporal[t]:.8f}",
                        f"{s.regularity[t]:.8f}",
                        f"{s.anomaly[t]:.8f}",
                        label,
                    ]
                )


def read_scores_csv(path) -> list[AnomalyScoreSeries]:
    rows_by_video: dict[str, list] = {}
    order: list[str] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SCORES_HEADER:
            raise ValidationError(f"{path}: unexpected scores header {header}")
        for row in reader:
            vid = row[0]
            if vid not in rows_by_video:
                rows_by_video[vid] = []
                order.append(vid)
            rows_by_video[vid].append(row)

    series = []
    for vid in order:
        rows = sorted(rows_by_video[vid], key=lambda r: int(r[1]))
        labels = None
        if all(r[6] != "" for r in rows):
            labels = np.array([int(r[6]) for r in rows], dtype=np.int8)
        series.append(
            AnomalyScoreSeries(
                video_id=vid,
                reg_spatial=np.array([float(r[2]) for r in rows]),
                reg_temporal=np.array([float(r[3]) for r in rows]),
                regularity=np.array([float(r[4]) for r in rows]),
                anomaly=np.array([float(r[5]) for r in rows]),
                labels=labels,
            )
        )
    return series


def dataset_auroc(series: list[AnomalyScoreSeries]) -> float:
    """AUROC over all frames of all videos concatenated."""
    labeled = [s for s in series if s.labels is not None]
    if not labeled:
        raise EvaluationError("AUROC undefined: no labeled videos")
    scores = np.concatenate([s.anomaly for s in labeled])
    labels = np.concatenate([s.labels for s in labeled])
    return auroc(scores, labels)
