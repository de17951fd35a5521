"""Shared fixtures: tiny architectures and small synthetic scenes.

Everything here is sized for speed.  The full-scale defaults (d=128,
5x5 patches, 500 epochs) are exercised only where a test is explicitly
about the defaults.
"""

import numpy as np
import pytest

from hsid.datacube import SplitSpec, split_samples
from hsid.losses import LossConfig
from hsid.network import NetworkSpec, init_model
from hsid.synth import default_scene_spec, generate


def tiny_spec(backbone="compact3d", seed=1):
    """8-dim two-branch network on 3x3x6 patches; ~8k parameters."""
    return NetworkSpec(
        num_classes=3,
        bands=6,
        patch_size=3,
        backbone_kind=backbone,
        feature_dim=8,
        projection_dims=(8, 6, 5),
        discriminator_dims=(8, 6, 2),
        init_seed=seed,
    )


def tiny_batch(m=4, seed=40):
    """Zero-mean scaled inputs keep every activation comfortably away
    from relu/margin kinks, which finite differences need."""
    rng = np.random.default_rng(seed)
    return 6.0 * rng.standard_normal((m, 3, 3, 6))


@pytest.fixture
def tiny_model():
    return init_model(tiny_spec())


@pytest.fixture
def loss_cfg():
    return LossConfig()


@pytest.fixture(scope="session")
def small_scene():
    """16x16x8 three-class scene, light noise; enough for split/eval tests."""
    spec = default_scene_spec(rows=16, cols=16, bands=8, num_classes=3,
                              num_zones=2, noise_sigma=0.01, seed=3)
    cube, zones = generate(spec)
    return spec, cube, zones


@pytest.fixture(scope="session")
def small_split(small_scene):
    _, cube, _ = small_scene
    spec = SplitSpec(per_class={1: (10, 20), 2: (10, 20), 3: (10, 20)}, seed=0)
    return split_samples(cube, spec, patch_size=3)
