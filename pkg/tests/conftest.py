import numpy as np
import pytest

import transferlab as tl
from transferlab import data


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_gallery():
    """Small gallery shared by read-only tests: 8 identities x 6 images."""
    return tl.gen_synthetic(seed=42, num_identities=8, per_identity=6, image_side=6)


@pytest.fixture(scope="session")
def toy_model(toy_gallery):
    """A trained model on the toy gallery (local label space)."""
    local, _ = data.relabel_for_training(toy_gallery)
    cfg = tl.ModelConfig(input_dim=36, hidden_dims=(16,), embed_dim=8,
                         num_classes=8, seed=7)
    return tl.train_softmax(tl.EmbeddingModel.initialize(cfg), local,
                            tl.TrainConfig(lr=0.5, epochs=40, batch=8, seed=3))


def random_model(input_dim=10, hidden=(6,), embed=4, classes=5, seed=0):
    cfg = tl.ModelConfig(input_dim, hidden, embed, num_classes=classes, seed=seed)
    return tl.EmbeddingModel.initialize(cfg)
