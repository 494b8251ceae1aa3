import numpy as np
import pytest
from hypothesis import settings

from voxkit.synthetic import PhantomSpec, generate_dataset

settings.register_profile("default", deadline=None, max_examples=30)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Two train / one val 24^3 phantoms; small enough for seconds-long runs."""
    out = tmp_path_factory.mktemp("corpus")
    spec = PhantomSpec(dims=(24, 24, 24), radius_range=(2, 4), seed=3)
    train_csv, val_csv = generate_dataset(spec, 2, 1, out)
    return out, train_csv, val_csv
