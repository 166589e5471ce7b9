"""Region-of-interest extraction and spatio-temporal cube cropping.

Appearance ROIs come from a precomputed detector boxes file (the detector
itself runs out of process); motion ROIs come from thresholded absolute
frame differences. Merged ROIs are cropped at the same box position from
the surrounding 2i+1 frames and resized to 64x64 to form the model's
input cubes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import BoxesParseError, ValidationError
from .ingestion import FrameSequence

log = logging.getLogger(__name__)

CUBE_SIZE = 64

APPEARANCE = "appearance"
MOTION = "motion"
MERGED = "merged"


@dataclass
class BoundingBox:
    """Half-open pixel box [x1, x2) x [y1, y2) with a detector confidence."""

    x1: int
    y1: int
    x2: int
    y2: int
    confidence: float = 1.0
    source: str = MERGED

    @property
    def width(self) -> int:
        return self.x2 - self.x1

    @property
    def height(self) -> int:
        return self.y2 - self.y1

    @property
    def area(self) -> int:
        return self.width * self.height

    def clamped(self, frame_width: int, frame_height: int) -> "BoundingBox | None":
        """Box intersected with the frame, or None if nothing remains."""
        x1, y1 = max(self.x1, 0), max(self.y1, 0)
        x2, y2 = min(self.x2, frame_width), min(self.y2, frame_height)
        if x1 >= x2 or y1 >= y2:
            return None
        return BoundingBox(x1, y1, x2, y2, self.confidence, self.source)

    def iou(self, other: "BoundingBox") -> float:
        ix = min(self.x2, other.x2) - max(self.x1, other.x1)
        iy = min(self.y2, other.y2) - max(self.y1, other.y1)
        if ix <= 0 or iy <= 0:
            return 0.0
        inter = ix * iy
        return inter / (self.area + other.area - inter)

    def retagged(self, source: str) -> "BoundingBox":
        return BoundingBox(self.x1, self.y1, self.x2, self.y2, self.confidence, source)


@dataclass
class SpatioTemporalCube:
    """2i+1 same-position crops around one ROI, resized to 64x64.

    ``data`` is (L, C, 64, 64) float32 in [0, 1]; the box records the
    center-frame geometry of the crop for traceability.
    """

    data: np.ndarray
    video_id: str
    center_frame_index: int
    box: BoundingBox
    half_window: int

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 4 or data.shape[2:] != (CUBE_SIZE, CUBE_SIZE):
            raise ValidationError(f"cube must be (L, C, 64, 64), got {data.shape}")
        if data.shape[0] != 2 * self.half_window + 1:
            raise ValidationError(
                f"cube length {data.shape[0]} != 2*{self.half_window}+1"
            )
        if data.min() < 0.0 or data.max() > 1.0:
            raise ValidationError("cube values must lie in [0, 1]")
        self.data = data

    @property
    def length(self) -> int:
        return self.data.shape[0]


@dataclass
class MotionParams:
    """Thresholds for frame-difference motion ROIs (pixel units on [0,1])."""

    diff_threshold: float = 0.05
    min_area: int = 25
    dilation: int = 3


def load_appearance_rois(
    boxes_path, video_id: str, confidence_threshold: float
) -> dict[int, list[BoundingBox]]:
    """Read detector boxes for one video, keeping confidence >= threshold.

    File format: one ``<video_id> <frame> <x1> <y1> <x2> <y2> <confidence>``
    record per line. An unknown video_id yields an empty map (with a logged
    warning); a malformed line raises :class:`BoxesParseError` naming it.
    """
    if not 0.0 <= confidence_threshold <= 1.0:
        raise ValidationError(f"confidence threshold {confidence_threshold} not in [0,1]")
    path = Path(boxes_path)
    if not path.is_file():
        raise BoxesParseError(f"boxes file does not exist: {path}")

    rois: dict[int, list[BoundingBox]] = {}
    seen = False
    with open(path) as fh:
        for ln, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 7:
                raise BoxesParseError(f"{path}:{ln}: expected 7 fields, got {len(fields)}")
            vid = fields[0]
            try:
                frame = int(fields[1])
                x1, y1, x2, y2 = (int(round(float(v))) for v in fields[2:6])
                conf = float(fields[6])
            except ValueError as exc:
                raise BoxesParseError(f"{path}:{ln}: {exc}") from exc
            if vid != video_id:
                continue
            seen = True
            if x1 >= x2 or y1 >= y2:
                raise BoxesParseError(f"{path}:{ln}: degenerate box {fields[2:6]}")
            if conf >= confidence_threshold:
                rois.setdefault(frame, []).append(
                    BoundingBox(x1, y1, x2, y2, conf, APPEARANCE)
                )
    if not seen:
        log.warning("no boxes for video %r in %s", video_id, path)
    return rois


def motion_rois(seq: FrameSequence, t: int, params: MotionParams) -> list[BoundingBox]:
    """Bounding boxes of connected regions that changed between frames t-1 and t.

    The channel-summed absolute difference is thresholded, dilated by
    ``params.dilation`` pixels, and split into 8-connected components;
    components smaller than ``params.min_area`` are dropped.
    """
    if not 1 <= t <= seq.frame_count - 1:
        raise IndexError(f"frame index {t} outside 1..{seq.frame_count - 1}")
    diff = np.abs(seq.frames[t] - seq.frames[t - 1]).sum(axis=0)
    mask = (diff > params.diff_threshold).astype(np.uint8)
    if params.dilation > 0:
        kernel = np.ones((2 * params.dilation + 1,) * 2, dtype=np.uint8)
        mask = cv2.dilate(mask, kernel)
    count, _, stats, _ = cv2.connectedComponentsWithStats(mask, connectivity=8)
    boxes = []
    for k in range(1, count):
        x, y, w, h, area = stats[k]
        if area >= params.min_area:
            boxes.append(BoundingBox(int(x), int(y), int(x + w), int(y + h), 1.0, MOTION))
    return boxes


def merge_rois(
    appearance: list[BoundingBox],
    motion: list[BoundingBox],
    iou_threshold: float,
) -> list[BoundingBox]:
    """All appearance boxes plus motion boxes that overlap none of them.

    A motion box survives only if its IoU with every appearance box is
    strictly below ``iou_threshold``; exact duplicates are suppressed and
    the survivors are retagged as merged.
    """
    merged: list[BoundingBox] = []
    coords_seen = set()
    for box in appearance:
        coords = (box.x1, box.y1, box.x2, box.y2)
        if coords not in coords_seen:
            coords_seen.add(coords)
            merged.append(box.retagged(MERGED))
    for box in motion:
        coords = (box.x1, box.y1, box.x2, box.y2)
        if coords in coords_seen:
            continue
        if all(box.iou(a) < iou_threshold for a in appearance):
            coords_seen.add(coords)
            merged.append(box.retagged(MERGED))
    return merged


def _resize_crop(crop: np.ndarray) -> np.ndarray:
    """(C, h, w) crop -> (C, 64, 64) via bilinear interpolation."""
    if crop.shape[0] == 1:
        resized = cv2.resize(crop[0], (CUBE_SIZE, CUBE_SIZE), interpolation=cv2.INTER_LINEAR)
        return resized[np.newaxis]
    hwc = crop.transpose(1, 2, 0)
    resized = cv2.resize(hwc, (CUBE_SIZE, CUBE_SIZE), interpolation=cv2.INTER_LINEAR)
    return resized.transpose(2, 0, 1)


def build_stcs(
    seq: FrameSequence,
    rois_per_frame: dict[int, list[BoundingBox]],
    half_window: int,
) -> tuple[list[SpatioTemporalCube], int]:
    """Crop one cube per (valid center frame, ROI) at a fixed box position.

    Center frames within ``half_window`` of either end produce no cubes.
    Boxes are clamped to the frame first; boxes that vanish entirely are
    skipped, and the skip count is returned alongside the cubes.
    """
    if half_window < 1:
        raise ValidationError(f"half_window must be >= 1, got {half_window}")
    cubes: list[SpatioTemporalCube] = []
    skipped = 0
    for t in range(half_window, seq.frame_count - half_window):
        for box in rois_per_frame.get(t, ()):
            clamped = box.clamped(seq.width, seq.height)
            if clamped is None:
                skipped += 1
                continue
            window = seq.frames[t - half_window : t + half_window + 1]
            crops = window[:, :, clamped.y1 : clamped.y2, clamped.x1 : clamped.x2]
            stack = np.stack([_resize_crop(c) for c in crops])
            cubes.append(
                SpatioTemporalCube(
                    data=np.clip(stack, 0.0, 1.0),
                    video_id=seq.video_id,
                    center_frame_index=t,
                    box=clamped,
                    half_window=half_window,
                )
            )
    return cubes, skipped
