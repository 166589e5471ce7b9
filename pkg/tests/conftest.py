import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # make `oracles` importable

from pstrp.ingestion import ObjectSpec, SyntheticSpec
from pstrp.roi import BoundingBox, SpatioTemporalCube


def random_cube(rng, half_window=2, channels=1, video_id="v", frame=5):
    length = 2 * half_window + 1
    data = rng.random((length, channels, 64, 64), dtype=np.float32)
    return SpatioTemporalCube(
        data=data,
        video_id=video_id,
        center_frame_index=frame,
        box=BoundingBox(0, 0, 64, 64),
        half_window=half_window,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_synth_spec(**kwargs):
    defaults = dict(
        seed=7,
        num_train_videos=2,
        num_test_videos=1,
        frames_per_video=16,
        canvas=(80, 100),
        objects_per_video=1,
        normal_behaviors=[ObjectSpec(shape="square", size=14)],
        anomaly_behaviors=[ObjectSpec(shape="square", size=14, speed=(4.0, 5.0))],
        anomaly_intervals=[[(6, 12)]],
    )
    defaults.update(kwargs)
    return SyntheticSpec(**defaults)
