import numpy as np
import pytest

from cropseg.toydata import default_toy_specs, generate_toy_manifest


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    """Small 4-domain toy dataset shared by data/train tests."""
    root = tmp_path_factory.mktemp("toydata") / "tiny"
    specs = default_toy_specs(samples=8, image_size=(48, 48))
    return generate_toy_manifest(specs, root, seed=7)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
