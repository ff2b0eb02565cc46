import pytest
import torch

from mixattack.reference_models import (
    TOY_RECIPE,
    make_synthetic,
    make_synthetic_segmentation,
    make_toy_classifier,
    make_toy_segmenter,
    split_train_test,
    train_toy,
)


@pytest.fixture(scope="session")
def toy_split():
    """Committed recipe: 125 train and 25 test images per class."""
    n = TOY_RECIPE.n_per_class + TOY_RECIPE.n_test_per_class
    data = make_synthetic(TOY_RECIPE.n_classes, n, TOY_RECIPE.size, seed=42)
    return split_train_test(data, fraction=TOY_RECIPE.n_per_class / n, seed=42)


@pytest.fixture(scope="session")
def trained_classifier(toy_split):
    train, _ = toy_split
    return train_toy(make_toy_classifier(seed=42, width=8), train, seed=42)


@pytest.fixture(scope="session")
def trained_victim(toy_split):
    train, _ = toy_split
    return train_toy(make_toy_classifier(seed=43, width=12), train, seed=43)


@pytest.fixture(scope="session")
def virtual_source():
    return make_synthetic(10, 2, TOY_RECIPE.size, seed=1)


@pytest.fixture(scope="session")
def small_set():
    return make_synthetic(4, 3, 32, seed=7)


@pytest.fixture
def classifier():
    return make_toy_classifier(seed=0)


@pytest.fixture
def segmenter():
    return make_toy_segmenter(seed=0)


@pytest.fixture(scope="session")
def scenes():
    return make_synthetic_segmentation(n_images=12, size=32, seed=3)


@pytest.fixture
def random_image():
    """Factory for seeded mid-range images, so clipping stays inactive for a few steps."""
    gen = torch.Generator().manual_seed(0)

    def make(size=32, low=20.0, high=235.0):
        return low + (high - low) * torch.rand((size, size, 3), generator=gen, dtype=torch.float64)

    return make
