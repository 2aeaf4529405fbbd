import os
from types import SimpleNamespace

import numpy as np
import pytest

from uncattr.data import gen_synthetic
from uncattr.models import Dataset, TrainConfig, train_classifier, train_vae

DESK_SEED = 7
TRAIN_COUNT = 600
VAL_COUNT = 200


@pytest.fixture(scope="session")
def desk():
    """Trained desk-scale models shared across test modules.

    600 train / 200 validation synthetic disc-vs-ring images, the default
    classifier (256-128-2, dropout 0.5, 10 epochs) and VAE (latent 16,
    50 epochs).
    """
    full = gen_synthetic(DESK_SEED + 3, TRAIN_COUNT + VAL_COUNT)
    train = Dataset(full.images[:TRAIN_COUNT], full.labels[:TRAIN_COUNT],
                    "train", full.num_classes)
    val = Dataset(full.images[TRAIN_COUNT:], full.labels[TRAIN_COUNT:],
                  "validation", full.num_classes)
    classifier = train_classifier(train, TrainConfig(epochs=10, seed=DESK_SEED))
    vae = train_vae(train, 16, TrainConfig(epochs=50, seed=DESK_SEED + 1))
    return SimpleNamespace(train=train, val=val, classifier=classifier, vae=vae)


@pytest.fixture
def mnist_dir():
    """Path to MNIST IDX files, or skip when the corpus is not present."""
    path = os.environ.get("MNIST_DIR", "")
    if not path or not os.path.exists(os.path.join(path, "train-images-idx3-ubyte")):
        pytest.skip("MNIST IDX files not available (set MNIST_DIR)")
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
