import warnings

import numpy as np
import pytest

from surfuse.data import SynthSpec, synth_generate
from surfuse.gradcheck import tiny_model
from surfuse.model import SurformerModel, TactileBranchConfig, VisionBranchConfig
from surfuse.tensor import make_rng, precision


@pytest.fixture
def f64():
    with precision(np.float64):
        yield


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def small_manifest():
    """3 classes x 12 pairs of 32 px images."""
    return synth_generate(3, 12, seed=5, spec=SynthSpec(size=32))


def small_vision_cfg(n_classes=3, **kw):
    base = dict(
        n_classes=n_classes,
        input_size=32,
        backbone_channels=(8, 8, 16, 32),
        feature_dim=32,
        head_hidden=16,
        n_unfrozen_tensors=20,
    )
    base.update(kw)
    return VisionBranchConfig(**base)


def small_model(seed=0, n_classes=3, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return SurformerModel(
            small_vision_cfg(n_classes, **kw),
            TactileBranchConfig(n_classes=n_classes, d_model=16, heads=4, d_ffn=64, head_hidden=8),
            seed=seed,
        )


@pytest.fixture
def tiny():
    with precision(np.float64):
        yield tiny_model(seed=3)
