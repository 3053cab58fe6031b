import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("ci", max_examples=25, deadline=None)
settings.load_profile("ci")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_state(rng, num_atoms):
    from ghzclock.qcore import EnsembleState

    v = rng.normal(size=2**num_atoms) + 1j * rng.normal(size=2**num_atoms)
    return EnsembleState(num_atoms, v / np.linalg.norm(v))
