import numpy as np
import pytest
from hypothesis import settings

from gratetile import FeatureMap, SparsityModel, generate_feature_map

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")


@pytest.fixture
def sparse_map():
    return generate_feature_map((24, 40, 16), SparsityModel(zero_fraction=0.6, seed=5))


def zeros(*dims):
    return FeatureMap(np.zeros(dims, dtype=np.uint16))


def dense(*dims, seed=0):
    return generate_feature_map(dims, SparsityModel(zero_fraction=0.0, seed=seed))
