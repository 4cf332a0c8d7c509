import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from cfx.dtw import default_band, dtw_distance, pairwise_dtw

from oracles import dtw_bruteforce


def test_identical_is_zero(rng):
    a = rng.standard_normal((20, 3))
    assert dtw_distance(a, a) == 0.0


def test_hand_example():
    assert dtw_distance([0.0, 1, 2], [0.0, 2]) == pytest.approx(1.0, abs=1e-12)
    assert dtw_bruteforce([0.0, 1, 2], [0.0, 2]) == pytest.approx(1.0, abs=1e-12)


def _series(max_t=6, max_c=2):
    return st.integers(1, max_c).flatmap(lambda c: st.tuples(
        hnp.arrays(np.float64, st.tuples(st.integers(1, max_t), st.just(c)),
                   elements=st.floats(-5, 5)),
        hnp.arrays(np.float64, st.tuples(st.integers(1, max_t), st.just(c)),
                   elements=st.floats(-5, 5))))


@settings(max_examples=150, deadline=None)
@given(_series())
def test_matches_bruteforce(pair):
    a, b = pair
    assert dtw_distance(a, b) == pytest.approx(dtw_bruteforce(a, b), abs=1e-9)


@settings(max_examples=80, deadline=None)
@given(_series(), st.integers(0, 6))
def test_banded_matches_bruteforce(pair, band):
    a, b = pair
    if band < abs(len(a) - len(b)):
        with pytest.raises(ValueError):
            dtw_distance(a, b, band)
        return
    assert dtw_distance(a, b, band) == pytest.approx(dtw_bruteforce(a, b, band), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(_series(max_t=8, max_c=3))
def test_symmetric_nonnegative(pair):
    a, b = pair
    d = dtw_distance(a, b)
    assert d >= 0
    assert d == pytest.approx(dtw_distance(b, a), abs=1e-12)


def test_wide_band_equals_unbanded(rng):
    for _ in range(20):
        a, b = rng.standard_normal((15, 2)), rng.standard_normal((15, 2))
        assert dtw_distance(a, b, 15) == dtw_distance(a, b)


def test_band_monotone(rng):
    a, b = rng.standard_normal((30, 2)), rng.standard_normal((30, 2))
    ds = [dtw_distance(a, b, w) for w in range(0, 31, 3)]
    assert all(x >= y - 1e-12 for x, y in zip(ds, ds[1:]))
    # band 0 is the lock-step Euclidean sum
    assert ds[0] == pytest.approx(np.linalg.norm(a - b, axis=1).sum())


def test_pairwise_matrix(rng):
    recs = [rng.standard_normal((12, 2)) for _ in range(3)]
    D = pairwise_dtw(recs, band=3)
    for i in range(3):
        for j in range(3):
            want = 0.0 if i == j else dtw_distance(recs[i], recs[j], 3)
            assert D[i, j] == pytest.approx(want, abs=1e-12)
    D2 = pairwise_dtw([recs[0], recs[0], recs[1]])
    assert D2[0, 1] == 0.0
    with pytest.raises(ValueError):
        pairwise_dtw(recs[:1])


def test_errors():
    with pytest.raises(ValueError):
        dtw_distance(np.zeros((3, 1)), np.zeros((3, 1)), -1)
    with pytest.raises(ValueError):
        dtw_distance(np.zeros((3, 1)), np.zeros((3, 2)))
    assert default_band(500) == 50 and default_band(5) == 1
