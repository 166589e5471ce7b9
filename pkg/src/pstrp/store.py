"""On-disk store for extracted spatio-temporal cubes.

A store is a directory of one float32 ``.npy`` array per video, shaped
(N, L, C, 64, 64), plus a ``manifest.json`` index recording the
extraction geometry and, per cube, its video, center frame, box, and
offset within the video's array.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .roi import CUBE_SIZE, BoundingBox, SpatioTemporalCube

MANIFEST_NAME = "manifest.json"
FORMAT_VERSION = 1


@dataclass
class StcEntry:
    video_id: str
    frame: int
    box: BoundingBox
    offset: int


class StcStoreWriter:
    def __init__(self, root, half_window: int, channels: int):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.half_window = half_window
        self.channels = channels
        self._videos: dict[str, int] = {}
        self._entries: list[list] = []

    def add_video(self, video_id: str, cubes: list[SpatioTemporalCube]):
        if video_id in self._videos:
            raise ValidationError(f"video {video_id!r} already written to store")
        length = 2 * self.half_window + 1
        shape = (len(cubes), length, self.channels, CUBE_SIZE, CUBE_SIZE)
        stack = np.empty(shape, dtype=np.float32)
        for offset, cube in enumerate(cubes):
            if cube.data.shape != shape[1:]:
                raise ValidationError(
                    f"cube shape {cube.data.shape} does not match store {shape[1:]}"
                )
            stack[offset] = cube.data
            box = cube.box
            self._entries.append(
                [video_id, cube.center_frame_index, box.x1, box.y1, box.x2, box.y2,
                 box.confidence, offset]
            )
        np.save(self.root / f"{video_id}.npy", stack)
        self._videos[video_id] = len(cubes)

    def close(self):
        manifest = {
            "version": FORMAT_VERSION,
            "cube_size": CUBE_SIZE,
            "half_window": self.half_window,
            "channels": self.channels,
            "videos": self._videos,
            "entries": self._entries,
        }
        with open(self.root / MANIFEST_NAME, "w") as fh:
            json.dump(manifest, fh)


class StcStore:
    """Read-only view over a cube store; per-video arrays are memory-mapped."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / MANIFEST_NAME
        if not manifest_path.is_file():
            raise ValidationError(f"not an STC store (no {MANIFEST_NAME}): {self.root}")
        with open(manifest_path) as fh:
            manifest = json.load(fh)
        if manifest.get("version") != FORMAT_VERSION:
            raise ValidationError(f"unsupported store version {manifest.get('version')}")
        self.cube_size = manifest["cube_size"]
        self.half_window = manifest["half_window"]
        self.channels = manifest["channels"]
        self.videos = manifest["videos"]
        self.entries = [
            StcEntry(
                video_id=e[0],
                frame=e[1],
                box=BoundingBox(e[2], e[3], e[4], e[5], e[6]),
                offset=e[7],
            )
            for e in manifest["entries"]
        ]
        self._arrays: dict[str, np.ndarray] = {}

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def length(self) -> int:
        return 2 * self.half_window + 1

    def _video_array(self, video_id: str) -> np.ndarray:
        if video_id not in self._arrays:
            self._arrays[video_id] = np.load(
                self.root / f"{video_id}.npy", mmap_mode="r"
            )
        return self._arrays[video_id]

    def load_cubes(self, indices) -> np.ndarray:
        """Cube data for the given entry indices, as (b, L, C, 64, 64) float32."""
        out = np.empty(
            (len(indices), self.length, self.channels, self.cube_size, self.cube_size),
            dtype=np.float32,
        )
        for row, idx in enumerate(indices):
            entry = self.entries[idx]
            out[row] = self._video_array(entry.video_id)[entry.offset]
        return out
