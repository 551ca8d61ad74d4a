import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polycast.core import ChannelRegistry
from polycast.ingest import (
    SchemaError,
    read_frame,
    read_frame_with_report,
    write_frame,
    write_validation_report,
)

from conftest import make_frame

REG = ChannelRegistry()


def _write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def test_read_simple(tmp_path):
    p = _write(tmp_path / "a.csv", "timestamp,MET\n"
               "2023-05-01T00:00:00Z,1.5\n2023-05-01T01:00:00Z,\n2023-05-01T02:00:00Z,3\n")
    f = read_frame(p, REG, "Multispan", 2023, "hourly")
    assert f.acronyms == ("MET",) and len(f) == 3
    assert np.isnan(f.column("MET")[1])


def test_column_position_irrelevant(tmp_path):
    a = _write(tmp_path / "a.csv", "timestamp,MET,IT\n2023-05-01T00:00:00Z,1,2\n")
    b = _write(tmp_path / "b.csv", "timestamp,IT,MET\n2023-05-01T00:00:00Z,2,1\n")
    fa = read_frame(a, REG, "S", 2023, "hourly")
    fb = read_frame(b, REG, "S", 2023, "hourly")
    assert fa.column("MET")[0] == fb.column("MET")[0]
    assert fa.column("IT")[0] == fb.column("IT")[0]


@pytest.mark.parametrize(
    "body, match",
    [
        ("timestamp,MET\n2023-05-01T00:00:00Z,1\n2023-05-01T00:00:00Z,2\n", "duplicate timestamp"),
        ("timestamp,XYZ\n2023-05-01T00:00:00Z,1\n", "unknown column"),
        ("timestamp,MET\nyesterday,1\n", "unparsable timestamp"),
        ("timestamp,MET\n2023-05-01T00:00:00Z,abc\n", "non-numeric"),
        ("timestamp,MET\n2023-05-01T00:00:00Z,1\n2023-05-01T03:00:00Z,2\n", "irregular"),
        ("timestamp,MET\n2023-05-01T01:00:00Z,1\n2023-05-01T00:00:00Z,2\n", "not sorted"),
        ("MET,timestamp\n1,2023-05-01T00:00:00Z\n", "first column"),
        ("", "missing header"),
        ("timestamp,MET\n2023-05-01T00:00:00Z,nan\n", "NaN literal"),
        ("timestamp,MET\n2023-05-01T00:00:00Z,1,2\n", "expected 2 fields"),
    ],
)
def test_schema_errors(tmp_path, body, match):
    p = _write(tmp_path / "bad.csv", body)
    with pytest.raises(SchemaError, match=match):
        read_frame(p, REG, "S", 2023, "hourly")


def test_out_of_range_reported_not_clamped(tmp_path):
    p = _write(tmp_path / "a.csv", "timestamp,IH\n2023-05-01T00:00:00Z,50\n2023-05-01T01:00:00Z,140\n")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        f, issues = read_frame_with_report(p, REG, "S", 2023, "hourly")
    assert caught
    assert np.isnan(f.column("IH")[1]) and f.column("IH")[0] == 50
    assert [(i.row, i.channel) for i in issues] == [(1, "IH")]
    out = tmp_path / "report.csv"
    write_validation_report(issues, out)
    assert out.read_text().splitlines()[0] == "row,channel,issue"


def test_missing_cell_written_empty(tmp_path):
    f = make_frame({"IT": [20.0, np.nan, 21.25]})
    p = tmp_path / "f.csv"
    write_frame(f, p)
    lines = p.read_text().splitlines()
    assert lines[0] == "timestamp,IT"
    assert lines[2] == "2023-05-01T01:00:00Z,"
    assert read_frame(p, REG, f.site, f.season, f.resolution) == f


def test_large_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    n = 27932
    met = rng.uniform(-5, 35, n)
    met[rng.random(n) < 0.05] = np.nan
    f = make_frame({"MET": met, "Rad": rng.uniform(0, 3000, n)})
    p = tmp_path / "big.csv"
    write_frame(f, p)
    assert read_frame(p, REG, f.site, f.season, "hourly") == f


finite = st.floats(-30, 50, allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.one_of(finite, st.just(float("nan"))), min_size=1, max_size=30))
def test_round_trip_property(tmp_path_factory, values):
    f = make_frame({"MET": values})
    p = tmp_path_factory.mktemp("rt") / "f.csv"
    write_frame(f, p)
    assert read_frame(p, REG, f.site, f.season, f.resolution) == f
