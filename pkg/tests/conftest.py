import functools

import numpy as np
import pytest

from fairwash.data import Dataset
from fairwash.experiment import prepare_reference
from fairwash.model import TrainConfig
from fairwash.synthetic import SyntheticSpec, gen_synthetic


@functools.lru_cache(maxsize=None)
def annotated_synthetic(n=2000, seed=0, d=4, hidden=(16,)):
    """``(data, model)``: synthetic data annotated by a model trained on it."""
    ss = np.random.SeedSequence(seed).spawn(2)
    raw = gen_synthetic(SyntheticSpec(n=n, d=d), np.random.default_rng(ss[0]))
    return prepare_reference(raw, TrainConfig(hidden=hidden), np.random.default_rng(ss[1]))


@pytest.fixture
def four_rows():
    # (S, Yhat) = (0,1), (0,0), (1,1), (1,1)
    return Dataset(X=np.arange(4.0).reshape(-1, 1), S=[0, 0, 1, 1], Yhat=[1, 0, 1, 1])


@pytest.fixture(scope="session")
def small_reference():
    return annotated_synthetic(n=600, seed=11)
