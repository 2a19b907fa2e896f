"""Shared fixtures and helpers for the test suite."""

import numpy as np
import pytest

from ccme.data import Dataset, split_data
from ccme.estimators import Hyper


def make_dataset(n, seed=0, d_x=3, treat_prob=0.6):
    """A small random dataset with both treatment groups present."""
    rng = np.random.default_rng(seed)
    X = rng.normal(0.0, 1.0, size=(n, d_x))
    A = (rng.uniform(size=n) < treat_prob).astype(np.float64)
    if A.sum() == 0:
        A[0] = 1.0
    if A.sum() == n:
        A[-1] = 0.0
    Y = X @ rng.normal(size=d_x) + 0.3 * rng.normal(size=n)
    return Dataset(X=X, A=A, Y=Y)


def make_split(n=24, seed=0, d_x=3, split_seed=1):
    return split_data(make_dataset(n, seed=seed, d_x=d_x), split_seed)


@pytest.fixture
def small_split():
    return make_split()


@pytest.fixture
def tiny_hyper():
    """Light training budgets so net-based fits stay fast in unit tests."""
    return Hyper(n_feats=4, hidden=(8,), epochs_df=(300, 100),
                 epochs_nk=(500, 100), lr_df=2e-4, lr_nk=4e-4)
