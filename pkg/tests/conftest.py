import numpy as np
import pytest

from filterprior.tensorio import FilterBank, FilterMeta


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_bank(vectors) -> FilterBank:
    """Wrap raw vectors in a FilterBank with placeholder provenance."""
    vectors = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    meta = [FilterMeta("synthetic", i, 0) for i in range(vectors.shape[0])]
    return FilterBank(vectors, meta)


def rel_err(a, b, floor=1.0):
    """Per-coordinate |a-b| / max(floor, |a|, |b|).

    Coordinates below the floor are judged absolutely; equivalent to a
    combined atol/rtol check with atol == rtol * floor.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))
    return np.abs(a - b) / scale
