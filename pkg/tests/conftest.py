# tests/conftest.py
import math

import numpy as np
import pytest

from rsn.core import Box7, DetectorConfig, Rng
from rsn.pipeline import RunConfig
from rsn.rife import UNetConfig
from rsn.sparse_engine import SpfeBlock, SpfeConfig
from rsn.synth import synth_scene
from rsn.weights import init_weights

SMALL_HEIGHT = 32
SMALL_WIDTH = 256


def small_config(**overrides) -> RunConfig:
    """A desk-sized network: 32x256 images, two U-Net levels, three 8-channel SPFE blocks."""
    values = dict(
        name="small",
        detector=DetectorConfig.vehicle(region=((-40.0, 40.0), (-40.0, 40.0), (-5.0, 5.0))),
        unet=UNetConfig(down_blocks=((1, 4), (1, 8)), up_blocks=((1, 4),), feature_channels=4),
        spfe=SpfeConfig(dims=2, blocks=(
            SpfeBlock(kind="SSC", channels=8),
            SpfeBlock(kind="SC", stride=2, channels=8),
            SpfeBlock(kind="SSC", channels=8),
        )),
        image_height=SMALL_HEIGHT,
        image_width=SMALL_WIDTH,
        pointnet_channels=8,
    )
    values.update(overrides)
    return RunConfig(**values)


@pytest.fixture
def config():
    return small_config()


@pytest.fixture
def weights(config):
    return init_weights(config, Rng(7))


@pytest.fixture
def make_scene():
    def _make(seed=0, n_boxes=3, n_bg_points=300, **kwargs):
        return synth_scene(Rng(seed), n_boxes, n_bg_points, max_range=30.0,
                           height=SMALL_HEIGHT, width=SMALL_WIDTH, **kwargs)
    return _make


def random_box(rng: np.random.Generator, spread: float = 3.0):
    return Box7(
        rng.uniform(-spread, spread), rng.uniform(-spread, spread), rng.uniform(-1.0, 1.0),
        rng.uniform(0.5, 5.0), rng.uniform(0.5, 3.0), rng.uniform(0.5, 2.5),
        rng.uniform(-math.pi, math.pi),
    )
