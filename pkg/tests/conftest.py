import numpy as np
import pytest

from fslkit.corpus import EmbeddingSet
from fslkit.synth import make_gaussian_corpus


@pytest.fixture(scope="session")
def gaussian_corpus():
    """Small calibrated corpus shared by pipeline-level tests."""
    return make_gaussian_corpus(n_classes=3, per_class=60, seed=11)


@pytest.fixture()
def rng():
    return np.random.default_rng(42)


def random_embedding_sets(rng, n_items, n_locations=4, d_latent=16, shift=0.0, prefix="item"):
    out = []
    for i in range(n_items):
        vectors = rng.normal(size=(n_locations, d_latent)) + shift
        out.append(EmbeddingSet(vectors.astype(np.float32), f"{prefix}_{i}"))
    return out
