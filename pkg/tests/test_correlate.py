import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polycast.core import FrameError
from polycast.correlate import (
    CorrelationMatrix,
    classify_correlation,
    correlation_matrix,
    pearson,
    select_by_target_correlation,
)

from conftest import make_frame


def test_pearson_examples():
    assert pearson([1, 2, 3], [2, 4, 6]) == 1.0
    assert pearson([1, 2, 3], [3, 2, 1]) == -1.0
    assert pearson([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-15)


def test_pearson_errors_and_missing():
    with pytest.raises(FrameError, match="constant"):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(FrameError, match="2 complete"):
        pearson([1, np.nan], [np.nan, 2])
    assert pearson([1, 2, np.nan, 3], [2, 4, 100, 6]) == 1.0


vec = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=3, max_size=30)


@settings(max_examples=100, deadline=None)
@given(st.data())
def test_pearson_symmetry_and_affine(data):
    x = np.array(data.draw(vec))
    y = np.array(data.draw(st.lists(st.floats(-1e3, 1e3), min_size=len(x), max_size=len(x))))
    if np.ptp(x) < 1e-3 or np.ptp(y) < 1e-3:
        return
    p = pearson(x, y)
    assert abs(p - pearson(y, x)) <= 1e-12
    a = data.draw(st.sampled_from([-3.5, -0.25, 0.5, 2.0, 7.0]))
    b = data.draw(st.floats(-100, 100))
    assert abs(pearson(a * x + b, y) - np.sign(a) * p) <= 1e-9


@pytest.mark.parametrize(
    "p, cat",
    [
        (0.0, "negligible"), (0.05, "negligible"), (0.10, "negligible"),
        (0.1000001, "weak"), (0.39, "weak"), (-0.39, "weak"),
        (0.3900001, "moderate"), (-0.50, "moderate"), (0.69, "moderate"),
        (0.7, "strong"), (0.89, "strong"), (0.95, "very strong"), (1.0, "very strong"),
        (-1.0, "very strong"),
    ],
)
def test_classification_table(p, cat):
    assert classify_correlation(p) == cat


def test_classification_rejects_out_of_range():
    with pytest.raises(FrameError):
        classify_correlation(1.5)


def test_classification_monotone():
    order = ["negligible", "weak", "moderate", "strong", "very strong"]
    ranks = [order.index(classify_correlation(p)) for p in np.linspace(0, 1, 2001)]
    assert ranks == sorted(ranks)


def test_matrix_identity_and_negation():
    x = np.sin(np.arange(20.0))
    f = make_frame({"MET": x + 10, "IT": x + 20, "ST": 20 - x})
    m = correlation_matrix(f)
    assert m.get("MET", "IT") == pytest.approx(1.0, abs=1e-12)
    assert m.get("MET", "ST") == pytest.approx(-1.0, abs=1e-12)
    np.testing.assert_array_equal(m.coefficients, m.coefficients.T)
    assert (np.diag(m.coefficients) == 1).all()


def test_matrix_matches_pairwise_pearson_exactly():
    rng = np.random.default_rng(5)
    cols = {c: rng.uniform(0, 30, 50) for c in ("MET", "IT", "ST")}
    m = correlation_matrix(make_frame(cols))
    for a in cols:
        for b in cols:
            if a != b:
                assert m.get(a, b) == pearson(cols[a], cols[b])
    assert (m.counts == 50).all()


def test_matrix_constant_channel_flagged():
    f = make_frame({"MET": [1, 2, 3, 4], "IT": [5, 5, 5, 5], "ST": [1, 3, 2, 4]})
    m = correlation_matrix(f)
    assert m.constant == ("IT",)
    assert np.isnan(m.get("IT", "MET")) and np.isnan(m.get("IT", "IT"))
    assert m.get("MET", "ST") == pytest.approx(0.8)


def test_matrix_exports(tmp_path):
    f = make_frame({"MET": [1, 2, 3, 4], "ST": [1, 3, 2, 4]})
    m = correlation_matrix(f)
    m.to_square_csv(tmp_path / "sq.csv")
    m.to_long_csv(tmp_path / "long.csv")
    assert (tmp_path / "sq.csv").read_text().splitlines()[0] == ",MET,ST"
    long = (tmp_path / "long.csv").read_text().splitlines()
    assert long[0] == "a,b,p,n,category"
    assert long[2].startswith("MET,ST,0.8") and long[2].endswith(",4,strong")


def _matrix(ps):
    names = ("Yield",) + tuple(f"c{i}" for i in range(len(ps)))
    k = len(names)
    c = np.eye(k)
    for i, p in enumerate(ps, start=1):
        c[0, i] = c[i, 0] = p
    return CorrelationMatrix(names, c, np.full((k, k), 10))


def test_select_by_target():
    assert select_by_target_correlation(_matrix([0.5]), "Yield", "moderate") == ["c0"]
    assert select_by_target_correlation(_matrix([0.05, -0.05]), "Yield", "weak") == []
    assert select_by_target_correlation(_matrix([0.2, 0.4, -0.7]), "Yield", "moderate") == ["c2", "c1"]
    assert select_by_target_correlation(_matrix([0.7, 0.4, 0.2]), "Yield", "moderate") == ["c0", "c1"]
    assert select_by_target_correlation(_matrix([0.5, -0.5]), "Yield", "weak") == ["c0", "c1"]
    with pytest.raises(FrameError):
        select_by_target_correlation(_matrix([0.5]), "IT", "weak")
