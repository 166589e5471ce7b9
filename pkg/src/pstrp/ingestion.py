"""Dataset loading and the deterministic synthetic video generator.

The canonical on-disk interchange is the ``generic_folders`` layout::

    <root>/train/<video_id>/%06d.png
    <root>/test/<video_id>/%06d.png
    <root>/test/<video_id>.labels     # one ASCII 0/1 per line

Benchmark layouts (ped2, avenue, shanghaitech) are thin adapters that map
their directory names onto the same structure; frame-level labels are
always consumed as 0/1 flag files. The synthetic generator produces
gradient-textured objects moving at per-video constant velocity on a
uniform background, with anomalies defined as speed multiples and
inverted textures, and can materialize itself into generic_folders form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np

from .errors import LayoutError, ValidationError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")

# layout name -> (train subdir, test subdir)
_LAYOUT_DIRS = {
    "generic_folders": ("train", "test"),
    "synthetic": ("train", "test"),
    "ped2": ("Train", "Test"),
    "avenue": ("training/frames", "testing/frames"),
    "shanghaitech": ("training/frames", "testing/frames"),
}


@dataclass
class FrameSequence:
    """An in-memory video: frames stacked as (T, C, H, W) float32 in [0, 1]."""

    video_id: str
    frames: np.ndarray

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float32)
        if frames.ndim != 4:
            raise ValidationError(
                f"{self.video_id}: frames must be (T, C, H, W), got {frames.shape}"
            )
        if frames.size and (frames.min() < 0.0 or frames.max() > 1.0):
            raise ValidationError(f"{self.video_id}: pixel values must lie in [0, 1]")
        self.frames = frames

    @property
    def frame_count(self) -> int:
        return self.frames.shape[0]

    @property
    def channels(self) -> int:
        return self.frames.shape[1]

    @property
    def height(self) -> int:
        return self.frames.shape[2]

    @property
    def width(self) -> int:
        return self.frames.shape[3]


@dataclass
class FrameLabels:
    """Per-frame binary ground truth for one test video (1 = anomalous)."""

    video_id: str
    labels: np.ndarray

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int8)
        if labels.ndim != 1 or not np.isin(labels, (0, 1)).all():
            raise ValidationError(f"{self.video_id}: labels must be a flat 0/1 list")
        self.labels = labels


@dataclass
class ObjectSpec:
    """One moving-object descriptor for the synthetic generator.

    ``intensity`` spans the object's brightness ramp from its top-left to
    bottom-right corner; ``texture='inverted'`` reverses the ramp.
    """

    shape: str = "square"
    size: int = 16
    speed: tuple[float, float] = (0.8, 1.8)
    intensity: tuple[float, float] = (0.6, 0.95)
    texture: str = "ramp"

    def __post_init__(self):
        if self.shape not in ("square", "circle"):
            raise ValidationError(f"unknown object shape {self.shape!r}")
        if self.texture not in ("ramp", "inverted"):
            raise ValidationError(f"unknown texture {self.texture!r}")
        if self.size < 2:
            raise ValidationError("object size must be at least 2 px")


@dataclass
class SyntheticSpec:
    """Full description of a synthetic dataset; equal specs generate
    bit-identical data."""

    seed: int = 0
    num_train_videos: int = 6
    num_test_videos: int = 4
    frames_per_video: int = 64
    canvas: tuple[int, int] = (120, 160)
    background: float = 0.25
    objects_per_video: int = 2
    normal_behaviors: list[ObjectSpec] = field(default_factory=lambda: [ObjectSpec()])
    anomaly_behaviors: list[ObjectSpec] = field(
        default_factory=lambda: [ObjectSpec(speed=(4.0, 6.0))]
    )
    anomaly_intervals: list[list[tuple[int, int]]] = field(default_factory=list)

    def __post_init__(self):
        if self.num_train_videos < 1 or self.num_test_videos < 1:
            raise ValidationError("need at least one train and one test video")
        if self.frames_per_video < 2:
            raise ValidationError("videos need at least 2 frames")
        if not self.normal_behaviors:
            raise ValidationError("normal_behaviors must not be empty")
        if len(self.anomaly_intervals) > self.num_test_videos:
            raise ValidationError("more anomaly_intervals entries than test videos")
        for intervals in self.anomaly_intervals:
            for start, end in intervals:
                if not (0 <= start < end <= self.frames_per_video):
                    raise ValidationError(
                        f"anomaly interval [{start}, {end}) outside "
                        f"[0, {self.frames_per_video})"
                    )
        if self.anomaly_intervals and not self.anomaly_behaviors:
            raise ValidationError("anomaly intervals given but no anomaly_behaviors")


@dataclass
class _Trajectory:
    spec: ObjectSpec
    x0: float
    y0: float
    vx: float
    vy: float
    start: int
    end: int  # exclusive

    def position(self, t: int) -> tuple[float, float]:
        dt = t - self.start
        return self.x0 + self.vx * dt, self.y0 + self.vy * dt

    def active(self, t: int) -> bool:
        return self.start <= t < self.end


def _plan_trajectory(rng, spec, height, width, start, end):
    """Sample a constant-velocity path that stays inside the canvas."""
    steps = max(end - start - 1, 1)
    speed = rng.uniform(*spec.speed)
    angle = rng.uniform(0.0, 2.0 * math.pi)
    vx, vy = speed * math.cos(angle), speed * math.sin(angle)

    margin = 1.0
    coords = []
    for v, extent in ((vx, width), (vy, height)):
        room = extent - spec.size - 2.0 * margin
        if room <= 0:
            raise ValidationError("object does not fit on the canvas")
        travel = abs(v) * steps
        if travel > room:  # keep the velocity constant but feasible
            v *= (room / travel) * 0.99
        lo = margin + max(0.0, -v * steps)
        hi = extent - spec.size - margin - max(0.0, v * steps)
        if hi < lo:  # rounding guard for paths that exactly fill the canvas
            lo = hi = (lo + hi) / 2.0
        coords.append((rng.uniform(lo, hi), v))
    (x0, vx), (y0, vy) = coords
    return _Trajectory(spec, x0, y0, vx, vy, start, end)


def _paint(frame, traj, t):
    """Alpha-composite one object onto a (H, W) frame at sub-pixel position."""
    x, y = traj.position(t)
    size = traj.spec.size
    height, width = frame.shape
    px0, px1 = int(math.floor(x)), int(math.ceil(x + size))
    py0, py1 = int(math.floor(y)), int(math.ceil(y + size))
    px0c, px1c = max(px0, 0), min(px1, width)
    py0c, py1c = max(py0, 0), min(py1, height)
    if px0c >= px1c or py0c >= py1c:
        return

    xs = np.arange(px0c, px1c, dtype=np.float64)
    ys = np.arange(py0c, py1c, dtype=np.float64)
    if traj.spec.shape == "square":
        cov_x = np.clip(np.minimum(xs + 1.0, x + size) - np.maximum(xs, x), 0.0, 1.0)
        cov_y = np.clip(np.minimum(ys + 1.0, y + size) - np.maximum(ys, y), 0.0, 1.0)
        coverage = cov_y[:, None] * cov_x[None, :]
    else:  # circle with 1px anti-aliased rim
        cx, cy, radius = x + size / 2.0, y + size / 2.0, size / 2.0
        dist = np.hypot(ys[:, None] + 0.5 - cy, xs[None, :] + 0.5 - cx)
        coverage = np.clip(radius + 0.5 - dist, 0.0, 1.0)

    lo, hi = traj.spec.intensity
    u = np.clip((xs + 0.5 - x) / size, 0.0, 1.0)
    v = np.clip((ys + 0.5 - y) / size, 0.0, 1.0)
    ramp = (u[None, :] + v[:, None]) / 2.0
    if traj.spec.texture == "inverted":
        ramp = 1.0 - ramp
    value = lo + (hi - lo) * ramp

    region = frame[py0c:py1c, px0c:px1c]
    frame[py0c:py1c, px0c:px1c] = region * (1.0 - coverage) + value * coverage


def _bounding_box(traj, t, height, width):
    x, y = traj.position(t)
    size = traj.spec.size
    x1 = max(int(math.floor(x)), 0)
    y1 = max(int(math.floor(y)), 0)
    x2 = min(int(math.ceil(x + size)), width)
    y2 = min(int(math.ceil(y + size)), height)
    return (x1, y1, x2, y2)


def _render_video(spec, trajectories):
    height, width = spec.canvas
    frames = np.empty((spec.frames_per_video, 1, height, width), dtype=np.float32)
    boxes = {}
    for t in range(spec.frames_per_video):
        canvas = np.full((height, width), spec.background, dtype=np.float64)
        frame_boxes = []
        for traj in trajectories:
            if traj.active(t):
                _paint(canvas, traj, t)
                frame_boxes.append(_bounding_box(traj, t, height, width))
        frames[t, 0] = np.clip(canvas, 0.0, 1.0)
        boxes[t] = frame_boxes
    return frames, boxes


def generate_synthetic(spec: SyntheticSpec):
    """Generate (train sequences, [(test sequence, labels)]) from a spec."""
    train, test, _ = generate_synthetic_detailed(spec)
    return train, test


def generate_synthetic_detailed(spec: SyntheticSpec):
    """Like :func:`generate_synthetic` but also returns per-frame ground-truth
    object boxes, keyed by video_id, for use as an oracle detector."""
    height, width = spec.canvas
    n_frames = spec.frames_per_video
    train, test, all_boxes = [], [], {}

    def normal_trajectories(rng, vi):
        # cycle descriptors across videos as well as objects so every
        # behavior appears even with one object per video
        return [
            _plan_trajectory(
                rng,
                spec.normal_behaviors[(vi + k) % len(spec.normal_behaviors)],
                height,
                width,
                0,
                n_frames,
            )
            for k in range(spec.objects_per_video)
        ]

    for vi in range(spec.num_train_videos):
        rng = np.random.default_rng([spec.seed, 0, vi])
        frames, boxes = _render_video(spec, normal_trajectories(rng, vi))
        video_id = f"train_{vi:03d}"
        train.append(FrameSequence(video_id, frames))
        all_boxes[video_id] = boxes

    for vi in range(spec.num_test_videos):
        rng = np.random.default_rng([spec.seed, 1, vi])
        trajectories = normal_trajectories(rng, vi)
        labels = np.zeros(n_frames, dtype=np.int8)
        intervals = (
            spec.anomaly_intervals[vi] if vi < len(spec.anomaly_intervals) else []
        )
        for k, (start, end) in enumerate(intervals):
            behavior = spec.anomaly_behaviors[(vi + k) % len(spec.anomaly_behaviors)]
            trajectories.append(
                _plan_trajectory(rng, behavior, height, width, start, end)
            )
            labels[start:end] = 1
        frames, boxes = _render_video(spec, trajectories)
        video_id = f"test_{vi:03d}"
        test.append((FrameSequence(video_id, frames), FrameLabels(video_id, labels)))
        all_boxes[video_id] = boxes

    return train, test, all_boxes


def materialize_synthetic(spec: SyntheticSpec, out_root) -> Path:
    """Write a generated dataset to disk in generic_folders form.

    Also emits ``boxes.txt`` with the generator's ground-truth object boxes
    (confidence 1.0) so extraction can run with an oracle detector.
    """
    out_root = Path(out_root)
    train, test, boxes = generate_synthetic_detailed(spec)
    for seq in train:
        _write_frames(out_root / "train" / seq.video_id, seq)
    for seq, labels in test:
        _write_frames(out_root / "test" / seq.video_id, seq)
        label_path = out_root / "test" / f"{seq.video_id}.labels"
        label_path.write_text("".join(f"{v}\n" for v in labels.labels))
    with open(out_root / "boxes.txt", "w") as fh:
        for video_id in sorted(boxes):
            for t in sorted(boxes[video_id]):
                for x1, y1, x2, y2 in boxes[video_id][t]:
                    fh.write(f"{video_id} {t} {x1} {y1} {x2} {y2} 1.0\n")
    return out_root


def _write_frames(video_dir: Path, seq: FrameSequence):
    video_dir.mkdir(parents=True, exist_ok=True)
    for t in range(seq.frame_count):
        frame = np.round(seq.frames[t] * 255.0).astype(np.uint8)
        image = frame[0] if seq.channels == 1 else frame.transpose(1, 2, 0)[:, :, ::-1]
        cv2.imwrite(str(video_dir / f"{t:06d}.png"), image)


def _read_frame(path: Path) -> np.ndarray:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise ValidationError(f"unreadable image file {path}")
    if raw.dtype == np.uint8:
        scaled = raw.astype(np.float32) / 255.0
    elif raw.dtype == np.uint16:
        scaled = raw.astype(np.float32) / 65535.0
    else:
        scaled = np.clip(raw.astype(np.float32), 0.0, 1.0)
    if scaled.ndim == 2:
        return scaled[np.newaxis]
    if scaled.shape[2] == 4:
        scaled = scaled[:, :, :3]
    return scaled[:, :, ::-1].transpose(2, 0, 1)  # BGR -> RGB, HWC -> CHW


def _load_video_dir(video_dir: Path) -> FrameSequence:
    files = sorted(
        p for p in video_dir.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS
    )
    if not files:
        raise LayoutError(f"no image files in {video_dir}", path=str(video_dir))
    frames = [_read_frame(p) for p in files]
    shapes = {f.shape for f in frames}
    if len(shapes) > 1:
        raise ValidationError(f"{video_dir.name}: frames differ in shape: {shapes}")
    return FrameSequence(video_dir.name, np.stack(frames))


def _read_labels(path: Path, video_id: str) -> FrameLabels:
    values = []
    for ln, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line not in ("0", "1"):
            raise ValidationError(f"{path}:{ln}: expected 0 or 1, got {line!r}")
        values.append(int(line))
    return FrameLabels(video_id, np.asarray(values, dtype=np.int8))


def _video_dirs(split_dir: Path) -> list[Path]:
    return sorted(
        p
        for p in split_dir.iterdir()
        if p.is_dir() and not p.name.endswith("_gt")
    )


def load_dataset(root_path, layout: str):
    """Load all training sequences and labeled test pairs from a dataset root.

    Returns ``(train, test)`` where ``test`` is a list of
    ``(FrameSequence, FrameLabels)``. Raises :class:`LayoutError` naming the
    first missing path when the tree does not match the layout, and
    :class:`ValidationError` when a label file disagrees with its video's
    frame count.
    """
    if layout not in _LAYOUT_DIRS:
        raise LayoutError(f"unknown layout {layout!r}")
    root = Path(root_path)
    if not root.is_dir():
        raise LayoutError(f"dataset root does not exist: {root}", path=str(root))
    train_sub, test_sub = _LAYOUT_DIRS[layout]
    train_dir, test_dir = root / train_sub, root / test_sub
    for required in (train_dir, test_dir):
        if not required.is_dir():
            raise LayoutError(
                f"layout mismatch for {layout!r}: missing {required}",
                path=str(required),
            )

    train = [_load_video_dir(d) for d in _video_dirs(train_dir)]

    test = []
    for video_dir in _video_dirs(test_dir):
        seq = _load_video_dir(video_dir)
        label_path = video_dir.parent / f"{video_dir.name}.labels"
        if label_path.is_file():
            labels = _read_labels(label_path, seq.video_id)
        else:
            mask_path = root / "testing" / "test_frame_mask" / f"{video_dir.name}.npy"
            if layout == "shanghaitech" and mask_path.is_file():
                labels = FrameLabels(seq.video_id, np.load(mask_path).astype(np.int8))
            else:
                raise LayoutError(
                    f"layout mismatch: missing label file {label_path}",
                    path=str(label_path),
                )
        if labels.labels.size != seq.frame_count:
            raise ValidationError(
                f"{seq.video_id}: {labels.labels.size} labels for "
                f"{seq.frame_count} frames"
            )
        test.append((seq, labels))

    if not train and not test:
        raise LayoutError(f"no videos found under {root}", path=str(root))
    return train, test
