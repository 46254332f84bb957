import numpy as np
import pytest

from services import tensor as T
from services.mamba_hsi import ModelConfig
from services.scene_io import split_per_class, synth_scene


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def reset_debug_nan():
    previous = T.debug_nan_enabled()
    yield
    T.set_debug_nan(previous)


def make_small_cfg(**overrides) -> ModelConfig:
    values = dict(spectral_channels=6, class_count=3, embed_dim=8, spectral_groups=2, encoder_depth=1,
                  d_state=4, expand=2, d_conv=3, gn_groups=2, epochs=5, seed=0, lr=1e-2)
    values.update(overrides)
    return ModelConfig(**values)


@pytest.fixture
def small_cfg():
    return make_small_cfg()


@pytest.fixture
def tiny_cfg():
    """有限差分用：每个张量只有几十个元素"""
    return make_small_cfg(spectral_channels=3, embed_dim=4, d_state=2, d_conv=2)


@pytest.fixture
def tiny_scene():
    scene = synth_scene(8, 8, 6, 3, 0.05, seed=1)
    return scene.with_masks(*split_per_class(scene.labels, 3, 2, seed=1))
