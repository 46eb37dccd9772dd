import numpy as np
import pytest
import torch

from cider.synthetic import SyntheticSpec, generate_synthetic


@pytest.fixture(scope="session")
def tiny_dataset():
    """Small two-domain dataset with planted clusters, shared across tests."""
    spec = SyntheticSpec(
        users_per_domain=60,
        items_per_domain=50,
        overlap=30,
        clusters=2,
        correlation=1.0,
        interactions_per_user=8,
        seed=101,
    )
    return generate_synthetic(spec)


@pytest.fixture()
def rng():
    return np.random.default_rng(7)


@pytest.fixture()
def gen():
    g = torch.Generator()
    g.manual_seed(12345)
    return g
