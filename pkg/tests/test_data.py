import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from cartsel.data import (
    DataError,
    Dataset,
    Framework,
    Method,
    breiman_function,
    gen_breiman,
    load_csv,
    split_sizes,
    split_three,
    write_csv,
)


def _write(tmp_path, text):
    path = tmp_path / "d.csv"
    path.write_text(text)
    return path


def test_load_csv_three_rows(tmp_path):
    ds = load_csv(_write(tmp_path, "a,b,y\n1,2,3\n4,5,6\n7,8,9\n"), "y", "regression")
    assert (ds.n, ds.p) == (3, 2)
    assert ds.names == ("a", "b")
    np.testing.assert_array_equal(ds.y, [3, 6, 9])


def test_load_csv_missing_value(tmp_path):
    with pytest.raises(DataError, match="missing value at row 2, column b"):
        load_csv(_write(tmp_path, "a,b,y\n1,2,3\n4,,6\n"), "y", "regression")


def test_load_csv_bad_label(tmp_path):
    with pytest.raises(DataError, match=r"response not in \{0,1\}"):
        load_csv(_write(tmp_path, "a,y\n1,0\n2,2\n"), "y", "classification")


def test_load_csv_unknown_target(tmp_path):
    with pytest.raises(DataError, match="target column"):
        load_csv(_write(tmp_path, "a,b\n1,2\n"), "y", "regression")


def test_csv_round_trip(tmp_path):
    ds = gen_breiman(50, 3)
    write_csv(ds, tmp_path / "x.csv")
    back = load_csv(tmp_path / "x.csv", "y", "regression")
    np.testing.assert_array_equal(back.x, ds.x)
    np.testing.assert_array_equal(back.y, ds.y)
    assert back.names == ds.names


def test_dataset_is_read_only():
    ds = Dataset(np.zeros((3, 2)), np.zeros(3), "regression")
    with pytest.raises(ValueError):
        ds.x[0, 0] = 1.0


def test_dataset_rejects_nan():
    with pytest.raises(DataError):
        Dataset(np.array([[np.nan]]), np.zeros(1), "regression")


def test_split_m1_sizes():
    ds = gen_breiman(100, 0)
    s = split_three(ds, (0.5, 0.25, 0.25), 7, "m1")
    assert s.sizes == (50, 25, 25)
    assert not set(s.i1) & set(s.i2) and not set(s.i1) & set(s.i3) and not set(s.i2) & set(s.i3)
    assert s.pruning_rows is s.i2


def test_split_m2_sizes():
    ds = gen_breiman(100, 0)
    s = split_three(ds, (0.75, 0, 0.25), 7, Method.M2)
    assert s.sizes == (75, 0, 25)
    assert s.pruning_rows is s.i1


def test_split_deterministic():
    ds = gen_breiman(100, 0)
    a = split_three(ds, (0.5, 0.25, 0.25), 7, "m1")
    b = split_three(ds, (0.5, 0.25, 0.25), 7, "m1")
    for u, v in zip((a.i1, a.i2, a.i3), (b.i1, b.i2, b.i3)):
        np.testing.assert_array_equal(u, v)


@pytest.mark.parametrize("fractions,method", [
    ((0.5, 0.25, 0.25), "m2"),
    ((0.75, 0.0, 0.25), "m1"),
    ((0.6, 0.3, 0.3), "m1"),
    ((0.5, 0.5, 0.0), "m1"),
])
def test_split_rejects_invalid(fractions, method):
    with pytest.raises(ValueError):
        split_three(gen_breiman(40, 0), fractions, 0, method)


@given(
    n=st.integers(8, 400),
    f1=st.floats(0.1, 0.6),
    f2=st.floats(0.05, 0.3),
    seed=st.integers(0, 2**31),
)
def test_split_partition_property(n, f1, f2, seed):
    f3 = 1.0 - f1 - f2
    ds = Dataset(np.zeros((n, 1)), np.zeros(n), "regression")
    n1, n2, n3 = split_sizes(n, (f1, f2, f3))
    if min(n1, n2, n3) < 1:
        return
    s = split_three(ds, (f1, f2, f3), seed, "m1")
    assert s.sizes == (n1, n2, n3)
    joined = np.concatenate([s.i1, s.i2, s.i3])
    assert len(set(joined)) == len(joined) == n
    assert n1 == math.floor(f1 * n + 0.5)
    for part in (s.i1, s.i2, s.i3):
        assert np.all(np.diff(part) > 0)


def test_breiman_value_sets():
    ds = gen_breiman(1000, 1)
    assert set(np.unique(ds.x[:, 0])) == {-1.0, 1.0}
    assert set(np.unique(ds.x[:, 1:])) <= {-1.0, 0.0, 1.0}
    assert ds.p == 10 and ds.framework is Framework.REGRESSION


def test_breiman_noise_moments():
    ds = gen_breiman(100_000, 5)
    resid = ds.y - breiman_function(ds.x)
    assert abs(resid.mean()) < 0.02
    assert abs(resid.var() - 2.0) < 0.05


def test_breiman_function_branches():
    x = np.zeros((2, 10))
    x[0, :7] = [1, 1, 1, 1, 1, 1, 1]
    x[1, :7] = [-1, 1, 1, 1, 1, 1, 1]
    np.testing.assert_array_equal(breiman_function(x), [3 + 3 + 2 + 1, -3 + 3 + 2 + 1])


def test_breiman_extra_noise_columns():
    ds = gen_breiman(30, 2, p=15)
    assert ds.p == 15
    np.testing.assert_array_equal(gen_breiman(30, 2).x.shape, (30, 10))


def test_breiman_deterministic():
    a, b = gen_breiman(200, 9), gen_breiman(200, 9)
    np.testing.assert_array_equal(a.x, b.x)
    np.testing.assert_array_equal(a.y, b.y)
