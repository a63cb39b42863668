import numpy as np
import pytest
import scipy.sparse as sp

from shapefuse.model import SkinnedModel
from shapefuse.toymodel import ToyModelSpec, generate_toy_model


@pytest.fixture(scope="session")
def toy():
    return generate_toy_model(ToyModelSpec())


@pytest.fixture(scope="session")
def small_toy():
    return generate_toy_model(ToyModelSpec(vertex_target=600))


def chain_model(weights, vertices=None, joints=((0.0, 0.0, 0.0), (1.0, 0.0, 0.0)), n_shape=2, seed=0):
    """Tiny chain model: joint k is the parent of k + 1, one-hot regressor on
    the first K vertices (which therefore sit at the joints)."""
    weights = np.asarray(weights, dtype=float)
    n, k = weights.shape
    rng = np.random.default_rng(seed)
    if vertices is None:
        vertices = rng.uniform(-1, 1, size=(n, 3))
    vertices = np.array(vertices, dtype=float)
    vertices[:k] = np.asarray(joints, dtype=float)[:k]
    reg = sp.csr_matrix((np.ones(k), (np.arange(k), np.arange(k))), shape=(k, n))
    basis = rng.normal(size=(n, 3, n_shape)) * 0.05
    faces = np.array([[0, 1, 2]]) if n >= 3 else np.zeros((0, 3), dtype=int)
    return SkinnedModel(vertices, faces, np.arange(-1, k - 1), reg, sp.csr_matrix(weights), basis)
