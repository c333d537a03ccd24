import numpy as np
import pytest
import torch
from hypothesis import settings

from voxsdf.field import AnalyticField

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


def sphere_sdf(radius=0.5, center=(0.0, 0.0, 0.0)):
    c = np.asarray(center, dtype=np.float64)
    return lambda p: np.linalg.norm(np.asarray(p) - c, axis=-1) - radius


@pytest.fixture
def sphere_field():
    return AnalyticField(sphere_sdf(0.5))


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)
