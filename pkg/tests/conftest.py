import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from featsplat.gaussians import CameraFrame, GaussianCloud, logit


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_cloud(rng, k=20, n_feat=4, opacity_range=(0.1, 0.9), depth_range=(2.2, 3.8)):
    return GaussianCloud(
        positions=np.column_stack([
            rng.uniform(-0.9, 0.9, k), rng.uniform(-0.9, 0.9, k),
            rng.uniform(*depth_range, k)]),
        rotations=rng.normal(size=(k, 4)),
        log_scales=np.log(rng.uniform(0.08, 0.35, size=(k, 3))),
        opacity_logits=np.asarray(logit(rng.uniform(*opacity_range, k))),
        colors_raw=rng.uniform(0.1, 0.9, size=(k, 3)),
        features=rng.normal(size=(k, n_feat)),
    )


def simple_frame(size=32, focal=None, time=0.0):
    focal = focal if focal is not None else 1.1 * size
    h = w = size
    return CameraFrame(
        K=np.array([[focal, 0, (w - 1) / 2], [0, focal, (h - 1) / 2], [0, 0, 1.0]]),
        T=np.eye(4), time=time,
        image=np.zeros((h, w, 3)), depth=np.zeros((h, w)),
        mask=np.ones((h, w), dtype=bool))
