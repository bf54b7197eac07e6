import numpy as np
import pytest

from fading_stab import Channel, FadingProcess, Plant, PowerPolicy, Problem


def scalar_problem(lam=1.5, gains=(1.0, 0.5), noise=1.0, n=20, fading=None):
    fading = fading if fading is not None else FadingProcess.iid([0.5, 0.5])
    return Problem(Plant([lam]), Channel(list(gains), noise, n), fading)


@pytest.fixture
def example1():
    return scalar_problem(1.45), PowerPolicy([5.0, 4.7])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_stochastic(rng, m, sparsity=0.0):
    """Random irreducible row-stochastic matrix (a cycle keeps it irreducible)."""
    Q = rng.random((m, m))
    Q[rng.random((m, m)) < sparsity] = 0.0
    for s in range(m):
        Q[s, (s + 1) % m] += 0.1
    return Q / Q.sum(axis=1, keepdims=True)
