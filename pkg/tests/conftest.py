import numpy as np
import pytest

from nodulemtl.phantom import build_manifest
from nodulemtl.training import load_dataset


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    """Twelve 16^3 phantom nodules on disk."""
    out = tmp_path_factory.mktemp("phantoms")
    build_manifest(12, 11, out_dir=out)
    return out / "manifest.jsonl"


@pytest.fixture(scope="session")
def tiny_data(tiny_manifest):
    return load_dataset(tiny_manifest)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
