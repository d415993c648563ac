import numpy as np
import pytest
import torch

from sourceid.core import MultiModalSlice
from sourceid.data import assign_splits, generate_phantom_dataset, splits_from_cases

torch.set_num_threads(1)


def make_slice(pixels, mask=None, pid="p", idx=0):
    pixels = np.asarray(pixels, dtype=np.float32)
    if pixels.ndim == 2:
        pixels = pixels[..., None]
    if mask is None:
        mask = np.ones(pixels.shape[:2], dtype=bool)
    return MultiModalSlice(pixels, np.asarray(mask, dtype=bool), pid, idx)


@pytest.fixture(scope="session")
def phantom_cases():
    return generate_phantom_dataset(12, 32, 2, seed=3, n_slices=8)


@pytest.fixture(scope="session")
def small_splits(phantom_cases):
    ids = [c.patient_id for c in phantom_cases]
    return splits_from_cases(phantom_cases, assign_splits(ids, 2, 2, 0), (32, 32))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
