import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(20260817)


def random_density(rng, dim: int) -> np.ndarray:
    """Random full-rank density matrix (Wishart normalized to trace 1)."""
    g = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    rho = g @ g.conj().T
    return rho / np.real(np.trace(rho))


def random_pure(rng, dim: int) -> np.ndarray:
    vec = rng.normal(size=dim) + 1j * rng.normal(size=dim)
    return vec / np.linalg.norm(vec)
