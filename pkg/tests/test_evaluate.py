import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polycast.core import FrameError, InvariantViolation
from polycast.evaluate import (
    EvalReport,
    EvalRow,
    Improvement,
    annotate_improvements,
    improvement_pct,
    mae,
    read_report_csv,
    rmse,
    select_best_per_target,
)


def test_metric_examples():
    assert rmse([1, 2, 3], [1, 2, 3]) == 0.0
    assert rmse([2, 4], [1, 2]) == math.sqrt(2.5)
    assert mae([2, 4], [1, 2]) == 1.5
    assert rmse(np.arange(10) + 3.0, np.arange(10)) == 3.0
    with pytest.raises(FrameError):
        rmse([1, 2], [1])
    with pytest.raises(FrameError):
        mae([], [])


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6)), min_size=1, max_size=50))
def test_metric_properties(pairs):
    p = np.array([a for a, _ in pairs])
    a = np.array([b for _, b in pairs])
    assert rmse(p, a) >= mae(p, a) * (1 - 1e-12)
    perm = np.random.default_rng(len(pairs)).permutation(len(pairs))
    assert rmse(p[perm], a[perm]) == rmse(p, a)
    assert mae(p[perm], a[perm]) == mae(p, a)
    assert mae(2 * a - p, a) == pytest.approx(mae(p, a), rel=1e-12, abs=1e-12)


def test_improvement_pct():
    assert round(improvement_pct(0.1464, 0.1260), 2) == 13.93
    assert round(improvement_pct(0.2098, 0.1218), 1) == 41.9
    assert improvement_pct(0.3, 0.3) == 0.0
    assert improvement_pct(1.0, 1.5) == -50.0
    with pytest.raises(FrameError):
        improvement_pct(0.0, 1.0)


def test_report_invariants():
    with pytest.raises(InvariantViolation, match="RMSE < MAE"):
        EvalReport([EvalRow("rf", "A", "IT", "real-only", 1.0, 2.0)])
    with pytest.raises(InvariantViolation, match="negative"):
        EvalReport([EvalRow("rf", "A", "IT", "real-only", -1.0)])
    with pytest.raises(FrameError, match="duplicate"):
        EvalReport([EvalRow("rf", "A", "IT", "real-only", 1.0)] * 2)
    dangling = EvalRow(
        "rf", "A", "yield+MO", "real-only", 1.0,
        improvements=(Improvement("yield-only-baseline", ("rf", "A", "yield-only", "real-only"), 1.0, None),),
    )
    with pytest.raises(InvariantViolation, match="missing baseline"):
        EvalReport([dangling])


def _yield_report():
    rows = []
    for m, (b, v, s) in {"rf": (0.20, 0.18, 0.15), "gbdt": (0.21, 0.22, 0.16)}.items():
        rows.append(EvalRow(m, "T", "yield-only", "real-only", b, b * 0.8, 10))
        rows.append(EvalRow(m, "T", "yield+sensor", "real-only", v, v * 0.8, 10))
        rows.append(EvalRow(m, "T", "yield+sensor", "syn+real", s, s * 0.8, 10))
    return EvalReport(rows, "yield")


def test_annotate_both_policies():
    rep = annotate_improvements(_yield_report())
    r = rep.find("rf", "T", "yield+sensor", "syn+real")
    by = {i.policy: i for i in r.improvements}
    assert by["yield-only-baseline"].baseline_key == ("rf", "T", "yield-only", "real-only")
    assert by["yield-only-baseline"].rmse_pct == improvement_pct(0.20, 0.15)
    assert by["same-feature-baseline"].baseline_key == ("rf", "T", "yield+sensor", "real-only")
    assert by["same-feature-baseline"].rmse_pct == improvement_pct(0.18, 0.15)
    base = rep.find("rf", "T", "yield-only", "real-only")
    assert base.improvements == ()
    real = rep.find("gbdt", "T", "yield+sensor", "real-only")
    assert [i.policy for i in real.improvements] == ["yield-only-baseline"]


def test_report_csv_round_trip(tmp_path):
    rep = annotate_improvements(_yield_report())
    rep.to_csv(tmp_path / "r.csv")
    header = (tmp_path / "r.csv").read_text().splitlines()[0].split(",")
    assert header[:7] == ["model", "site", "data_mode", "key", "rmse", "mae", "n"]
    assert "same-feature-baseline:rmse_pct" in header
    back = read_report_csv(tmp_path / "r.csv", "yield")
    assert [(r.ident, r.rmse, r.mae) for r in back.rows] == [(r.ident, r.rmse, r.mae) for r in rep.rows]
    assert "6 rows" in rep.summary()


def test_selection_ties_and_errors():
    rows = [
        EvalRow("rf", "A", "IT", "real-only", 1.0),
        EvalRow("gbdt", "A", "IT", "real-only", 1.0),
        EvalRow("xgb", "A", "IT", "real-only", 2.0),
    ]
    sel = select_best_per_target(rows)
    assert sel[("A", "IT")] == "rf"
    assert sel.ties[("A", "IT")] == ("rf", "gbdt")
    with pytest.raises(FrameError, match="candidate"):
        select_best_per_target(rows[:2])
    assert select_best_per_target(rows[1:], candidates=("gbdt", "xgb"))[("A", "IT")] == "gbdt"
    with pytest.raises(FrameError):
        select_best_per_target(rows, metric="r2")


def test_selection_by_mae_and_mode():
    rows = [
        EvalRow("rf", "A", "k", "real-only", 2.0, 1.0),
        EvalRow("gbdt", "A", "k", "real-only", 1.5, 1.2),
        EvalRow("rf", "A", "k", "syn+real", 1.0, 0.5),
        EvalRow("gbdt", "A", "k", "syn+real", 3.0, 0.6),
    ]
    assert select_best_per_target(rows, "mae", ("rf", "gbdt"), "real-only")[("A", "k")] == "rf"
    assert select_best_per_target(rows, "rmse", ("rf", "gbdt"), "real-only")[("A", "k")] == "gbdt"
