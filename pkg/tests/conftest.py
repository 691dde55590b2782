import numpy as np
import pytest
import torch

from dlcbench.datasets import SyntheticSpec, synth_dataset
from dlcbench.substrate import BackboneSpec, build_backbone

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_spec():
    return BackboneSpec(conv_stages=((3, 8, 3), (8, 16, 3), (16, 16, 3)), feature_dim=16)


@pytest.fixture()
def tiny_extractor(tiny_spec):
    return build_backbone(tiny_spec, seed=11)


@pytest.fixture(scope="session")
def tiny_dataset():
    # 4 classes, small images: fast enough for protocol tests
    return synth_dataset(SyntheticSpec(
        class_count=4, samples_per_class=24, test_per_class=8,
        image_side=8, channels=3, blob_seed=5, noise=0.1,
    ))


def rand_images(n, side=8, channels=3, seed=0):
    rng = np.random.default_rng(seed)
    return rng.integers(0, 256, size=(n, side, side, channels), dtype=np.uint8)
