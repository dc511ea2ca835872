from __future__ import annotations

import numpy as np
import pytest
from hypothesis import settings

from carfl.data import gen_synthetic, split_holdout
from carfl.model import SyntheticEncoder

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


@pytest.fixture
def blobs():
    data = gen_synthetic(60, 2, 4, 0.5, seed=3)
    return split_holdout(data, 0.25, seed=3)


@pytest.fixture
def small_enc():
    return SyntheticEncoder.create(4, 6, seed=1)


def tensors_equal(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))
