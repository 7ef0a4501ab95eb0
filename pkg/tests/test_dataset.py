import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from sharpjudge.dataset import (
    Dataset,
    DegenerateOutcomeError,
    SchemaError,
    ValidationError,
    ingest_csv,
    normalize_outcome,
)


def _write(tmp_path, text, name="cases.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_ingest_basic(tmp_path):
    path = _write(tmp_path, "y,d,judge,a,b,c\n1,0,1,0.1,2,3\n0,1,1,0.2,2,3\n1,1,2,0.3,2,3\n0,0,2,0.4,2,4\n")
    ds = ingest_csv(path, "y", "d", "judge", ["a", "b", "c"])
    assert ds.n == 4 and ds.x.shape == (4, 3)
    assert ds.n_judges == 2
    assert ds.x_names == ("a", "b", "c")


def test_missing_column(tmp_path):
    path = _write(tmp_path, "y,d\n1,0\n")
    with pytest.raises(SchemaError, match="judge"):
        ingest_csv(path, "y", "d", "judge")


def test_nonbinary_treatment_names_row(tmp_path):
    path = _write(tmp_path, "y,d,z\n1,0,1\n1,2,1\n")
    with pytest.raises(ValidationError, match="row 1"):
        ingest_csv(path)


def test_missing_values(tmp_path):
    path = _write(tmp_path, "y,d,z\n1,0,1\n,1,1\n0,1,2\n")
    with pytest.raises(ValidationError, match="row 1"):
        ingest_csv(path)
    assert ingest_csv(path, drop_missing=True).n == 2


def test_nonnumeric_value(tmp_path):
    path = _write(tmp_path, "y,d,z\n1,0,1\nabc,1,1\n")
    with pytest.raises(ValidationError, match="non-numeric"):
        ingest_csv(path)


def test_nonfinite_rejected():
    with pytest.raises(ValidationError, match="row 2"):
        Dataset(y=[0.1, 0.2, np.inf], d=[0, 1, 0], z=[1, 1, 2])


def test_immutable():
    ds = Dataset(y=[0.1, 0.2], d=[0, 1], z=[1, 2])
    with pytest.raises(ValueError):
        ds.y[0] = 5.0
    with pytest.raises(AttributeError):
        ds.y = np.zeros(2)


def test_column_lookup_and_subset():
    ds = Dataset(y=[1.0, 2.0, 3.0], d=[0, 1, 1], z=[[1, 0], [2, 1], [1, 0]], x=[[5], [6], [7]],
                 z_names=("race", "party"), x_names=("age",))
    np.testing.assert_array_equal(ds.column("party"), [0, 1, 0])
    np.testing.assert_array_equal(ds.column("age"), [5, 6, 7])
    assert ds.n_judges == 2
    sub = ds.subset([0, 2])
    assert sub.n == 2 and sub.n_judges == 1


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(float, st.integers(2, 30), elements=st.floats(-1e6, 1e6, allow_subnormal=False)))
def test_csv_round_trip_is_exact(tmp_path_factory, y):
    n = y.size
    ds = Dataset(y=y, d=np.arange(n) % 2, z=np.arange(n) % 3, x=np.c_[y / 3.0, y * 7.1],
                 z_names=("judge",), x_names=("a", "b"))
    path = tmp_path_factory.mktemp("rt") / "ds.csv"
    ds.to_csv(path)
    back = ingest_csv(path, "y", "d", "judge", ["a", "b"])
    assert np.array_equal(back.y, ds.y) and np.array_equal(back.x, ds.x)
    assert np.array_equal(back.z, ds.z) and np.array_equal(back.d, ds.d)


def test_known_bounds():
    out = normalize_outcome(np.array([0.0, 5.0, 10.0]), "known-bounds", (0, 10))
    np.testing.assert_allclose(out.y_tilde, [0, 0.5, 1])


def test_known_bounds_violation():
    with pytest.raises(ValueError):
        normalize_outcome(np.array([0.0, 11.0]), "known-bounds", (0, 10))
    with pytest.raises(ValueError):
        normalize_outcome(np.array([1.0, 2.0]), "known-bounds", (3, 3))


def test_sample_range():
    out = normalize_outcome(np.array([2.0, 4.0, 3.0]), "sample-range")
    np.testing.assert_allclose(out.y_tilde, [0, 1, 0.5])


@pytest.mark.parametrize("mode", ["sample-range", "gaussianize"])
def test_constant_outcome(mode):
    with pytest.raises(DegenerateOutcomeError):
        normalize_outcome(np.full(5, 2.0), mode)


def test_gaussianize_centered():
    y = np.random.default_rng(0).standard_normal(100_000)
    out = normalize_outcome(y, "gaussianize")
    assert abs(out.y_tilde.mean() - 0.5) < 3 / np.sqrt(y.size)
    assert out.transform["kind"] == "gaussianize"


def test_auto_mode():
    assert normalize_outcome(np.array([0.0, 1.0, 1.0]), "auto").transform == {"kind": "identity"}
    assert normalize_outcome(np.array([0.2, 3.0]), "auto").transform["kind"] == "gaussianize"


def test_frozen_transform_reapplies():
    out = normalize_outcome(np.array([1.0, 2.0, 4.0]), "sample-range")
    np.testing.assert_allclose(out.apply([2.5]), [0.5])


@given(hnp.arrays(float, st.integers(2, 40), elements=st.floats(-1e3, 1e3)),
       st.sampled_from(["sample-range", "gaussianize"]))
def test_normalized_in_unit_interval_and_order_preserving(y, mode):
    if np.ptp(y) == 0:
        return
    t = normalize_outcome(y, mode).y_tilde
    assert t.min() >= 0 and t.max() <= 1
    order = np.argsort(y, kind="stable")
    assert np.all(np.diff(t[order]) >= 0)
