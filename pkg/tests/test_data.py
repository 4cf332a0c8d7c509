import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from cfx.data import (PTBXL_MU, PTBXL_SIGMA, Dataset, NormStats, Series, denormalize,
                      load_dataset, normalize, read_f32, shift_series, write_dataset,
                      zscore_stats)
from cfx.errors import DataFormatError, ShapeError


def _write_raw(path, n, t, c, floats, labels, classes=("NORM", "MI")):
    path.mkdir()
    man = {"n_records": n, "n_timesteps": t, "n_channels": c, "classes": list(classes),
           "mu": 0.0, "sigma": 1.0}
    (path / "manifest.json").write_text(json.dumps(man))
    np.asarray(floats, dtype="<f4").tofile(path / "signals.f32")
    (path / "labels.csv").write_text("".join(line + "\n" for line in labels))


def test_load_minimal_fixture(tmp_path):
    _write_raw(tmp_path / "d", 2, 4, 1, np.arange(8), ["r0,NORM", "r1,MI"])
    ds = load_dataset(tmp_path / "d")
    assert len(ds) == 2
    assert ds.record_ids == ["r0", "r1"]
    np.testing.assert_array_equal(ds.signals[1, :, 0], [4, 5, 6, 7])
    np.testing.assert_array_equal(ds.labels, [[1, 0], [0, 1]])


def test_load_size_mismatch(tmp_path):
    _write_raw(tmp_path / "d", 2, 4, 1, np.arange(7), ["r0,NORM", "r1,MI"])
    with pytest.raises(DataFormatError):
        load_dataset(tmp_path / "d")


def test_load_unknown_class(tmp_path):
    _write_raw(tmp_path / "d", 2, 4, 1, np.arange(8), ["r0,NORM", "r1,XYZ"])
    with pytest.raises(DataFormatError, match="XYZ"):
        load_dataset(tmp_path / "d")


def test_read_f32_rejects_nan(tmp_path):
    np.array([1.0, np.nan], dtype="<f4").tofile(tmp_path / "x.f32")
    with pytest.raises(DataFormatError):
        read_f32(tmp_path / "x.f32", (2,))


def test_roundtrip_bit_exact(tmp_path, rng):
    X = rng.standard_normal((5, 6, 2)).astype(np.float32).astype(np.float64)
    Y = np.eye(3, dtype=np.uint8)[[0, 1, 2, 0, 1]]
    Y[4, 2] = 1
    ds = Dataset(X, Y, [f"id{i}" for i in range(5)], ["NORM", "MI", "CD"], NormStats(0.5, 2.0))
    write_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    np.testing.assert_array_equal(back.signals, X)
    np.testing.assert_array_equal(back.labels, Y)
    assert back.record_ids == ds.record_ids
    assert back.stats == ds.stats


def test_series_validation():
    with pytest.raises(ShapeError):
        Series(np.zeros((1, 1)))
    with pytest.raises(DataFormatError):
        Series(np.array([[0.0], [np.inf]]))


@pytest.mark.parametrize("samples,mu,sigma", [([5, 5, 5], 5, 0), ([0, 2], 1, 1), ([-1, 1], 0, 1)])
def test_zscore_stats(samples, mu, sigma):
    s = zscore_stats(np.array(samples, dtype=float).reshape(1, -1, 1))
    assert s.mu == pytest.approx(mu, abs=1e-15)
    assert s.sigma == pytest.approx(sigma, abs=1e-15)


def test_normalize_examples():
    stats = NormStats(PTBXL_MU, PTBXL_SIGMA)
    x = np.full((4, 1), PTBXL_MU)
    np.testing.assert_array_equal(normalize(x, stats), 0.0)
    y = normalize(np.full((4, 1), PTBXL_MU + PTBXL_SIGMA), stats)
    # epsilon 1e-7 in the denominator: sigma / (sigma + 1e-7)
    np.testing.assert_allclose(y, PTBXL_SIGMA / (PTBXL_SIGMA + 1e-7), rtol=1e-12)
    assert y[0, 0] == pytest.approx(0.99999958, abs=5e-9)
    np.testing.assert_allclose(normalize(np.full((2, 1), 3.0), NormStats(0, 0)), 3e7)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (8, 2), elements=st.floats(-1e3, 1e3)),
       st.floats(-5, 5), st.floats(0, 10))
def test_normalize_inverse(x, mu, sigma):
    stats = NormStats(mu, sigma)
    np.testing.assert_allclose(denormalize(normalize(x, stats), stats), x, atol=1e-6, rtol=1e-9)


def test_shift_examples():
    x = np.array([1.0, 2, 3, 4])
    np.testing.assert_array_equal(shift_series(x, 0)[:, 0], x)
    np.testing.assert_array_equal(shift_series(x, 1)[:, 0], [1, 1, 2, 3])
    np.testing.assert_array_equal(shift_series(x, -1)[:, 0], [2, 3, 4, 4])
    with pytest.raises(ValueError):
        shift_series(x, 4)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(2, 12), st.integers(1, 3)),
                  elements=st.floats(-10, 10)), st.integers(-11, 11))
def test_shift_is_edge_replicating_roll(x, tau):
    if abs(tau) >= x.shape[0]:
        return
    y = shift_series(x, tau)
    idx = np.clip(np.arange(x.shape[0]) - tau, 0, x.shape[0] - 1)
    np.testing.assert_array_equal(y, x[idx])
