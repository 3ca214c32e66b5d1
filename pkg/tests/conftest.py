import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_world():
    """20 frontal-ish scenes with their oracle image bank."""
    from diffuld.backbone import OracleBackbone
    from diffuld.data import ImageBank, generate_synthetic_dataset

    images, manifest = generate_synthetic_dataset(20, 6, "bimodal_right", seed=3)
    adapter = OracleBackbone(6, noise_sigma=0.05, seed=0)
    return ImageBank(images, list(manifest.entries), adapter)
