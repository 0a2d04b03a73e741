import numpy as np
import pytest

from fsb.bodymodel import make_toy_models


@pytest.fixture(scope="session")
def toy_pair():
    """Default-size template pair plus its construction-time bary map."""
    return make_toy_models(seed=0)


@pytest.fixture(scope="session")
def small_pair():
    """Miniature pair for gradient probes and other per-coordinate loops."""
    return make_toy_models(seed=0, mhr_vertices=252, smpl_vertices=168)


def random_pose_vector(rng, sigma=0.2, shape_sigma=0.5):
    from fsb.bodymodel import PARAM_DIM

    v = np.zeros(PARAM_DIM, dtype=np.float32)
    v[:66] = rng.normal(0.0, sigma, size=66)
    v[66:] = rng.normal(0.0, shape_sigma, size=10)
    return v.astype(np.float32)
