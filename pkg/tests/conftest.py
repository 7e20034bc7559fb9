import numpy as np
import pytest
import torch

from fovrecon import features as F
from fovrecon.demo import brick_texture
from fovrecon.imaging import ImagePatch

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def net():
    """Shared backbone (seeded deterministic weights unless a pinned
    checkpoint is available locally)."""
    return F.backbone()


@pytest.fixture(scope="session")
def brick64():
    return brick_texture(64, seed=0)


def random_patch(size=32, seed=0, channels=3) -> ImagePatch:
    rng = np.random.default_rng(seed)
    return ImagePatch(rng.uniform(0, 1, (size, size, channels)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
