"""
Error metrics, improvement percentages and best-model selection.

Metrics use correctly rounded summation (:func:`math.fsum`) so results do not
depend on vector length or element order.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import FrameError, InvariantViolation

MODEL_ORDER = ("rf", "gbdt", "xgb")
BASELINE_POLICIES = ("yield-only-baseline", "same-feature-baseline")
REAL_ONLY = "real-only"
YIELD_ONLY = "yield-only"


def _pair(predicted, actual):
    p = np.asarray(predicted, dtype=np.float64).ravel()
    a = np.asarray(actual, dtype=np.float64).ravel()
    if p.shape != a.shape:
        raise FrameError(f"length mismatch: {p.size} predicted vs {a.size} actual")
    if p.size == 0:
        raise FrameError("metrics need at least one value")
    return p - a


def rmse(predicted, actual) -> float:
    e = _pair(predicted, actual)
    # scale first so squaring neither underflows nor overflows
    s = float(np.max(np.abs(e)))
    if s == 0.0 or not math.isfinite(s):
        return s
    u = e / s
    return s * math.sqrt(math.fsum((u * u).tolist()) / e.size)


def mae(predicted, actual) -> float:
    e = _pair(predicted, actual)
    return math.fsum(np.abs(e).tolist()) / e.size


def improvement_pct(baseline: float, value: float) -> float:
    """Relative reduction of ``value`` against ``baseline``, in percent."""
    if not baseline > 0:
        raise FrameError(f"baseline must be positive, got {baseline}")
    return 100.0 * (baseline - value) / baseline


@dataclass(frozen=True)
class Improvement:
    policy: str
    baseline_key: tuple
    rmse_pct: float
    mae_pct: float | None


@dataclass(frozen=True)
class EvalRow:
    """
    One evaluated cell. ``key`` is the backcast target or the yield feature
    set; ``mae`` may be None for fixture rows that only publish RMSE.
    """

    model: str
    site: str
    key: str
    data_mode: str
    rmse: float
    mae: float | None = None
    n: int = 0
    improvements: tuple[Improvement, ...] = ()

    @property
    def ident(self) -> tuple[str, str, str, str]:
        return (self.model, self.site, self.key, self.data_mode)


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    kind: str = "backcast"

    def __post_init__(self):
        seen = set()
        for r in self.rows:
            if r.ident in seen:
                raise FrameError(f"duplicate report row {r.ident}")
            seen.add(r.ident)
        self.check()

    def check(self) -> None:
        idents = {r.ident for r in self.rows}
        for r in self.rows:
            if r.rmse < 0 or (r.mae is not None and r.mae < 0):
                raise InvariantViolation(f"negative error in row {r.ident}")
            # allow for the last-bit rounding of sqrt
            if r.mae is not None and r.rmse < r.mae * (1 - 1e-12):
                raise InvariantViolation(f"RMSE < MAE in row {r.ident}")
            for imp in r.improvements:
                if imp.baseline_key not in idents:
                    raise InvariantViolation(
                        f"row {r.ident} references missing baseline {imp.baseline_key}"
                    )

    def add(self, row: EvalRow) -> None:
        if any(r.ident == row.ident for r in self.rows):
            raise FrameError(f"duplicate report row {row.ident}")
        self.rows.append(row)

    def find(self, model, site, key, data_mode) -> EvalRow:
        for r in self.rows:
            if r.ident == (model, site, key, data_mode):
                return r
        raise FrameError(f"no report row for {(model, site, key, data_mode)}")

    def filter(self, **kw) -> list[EvalRow]:
        return [r for r in self.rows if all(getattr(r, k) == v for k, v in kw.items())]

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = ["model", "site", "data_mode", "key", "rmse", "mae", "n"]
        for pol in BASELINE_POLICIES:
            header += [f"{pol}:rmse_pct", f"{pol}:mae_pct", f"{pol}:baseline"]
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for r in self.rows:
                line = [r.model, r.site, r.data_mode, r.key, _num(r.rmse), _num(r.mae), r.n]
                by_policy = {imp.policy: imp for imp in r.improvements}
                for pol in BASELINE_POLICIES:
                    imp = by_policy.get(pol)
                    if imp is None:
                        line += ["", "", ""]
                    else:
                        line += [
                            _num(imp.rmse_pct),
                            _num(imp.mae_pct),
                            "/".join(str(k) for k in imp.baseline_key),
                        ]
                w.writerow(line)

    def summary(self) -> str:
        lines = [f"# {self.kind} report: {len(self.rows)} rows"]
        for r in self.rows:
            mae_txt = "-" if r.mae is None else f"{r.mae:.6g}"
            text = (
                f"{r.model:5s} {r.site:12s} {r.data_mode:9s} {r.key:18s} "
                f"rmse={r.rmse:.6g} mae={mae_txt} n={r.n}"
            )
            for imp in r.improvements:
                text += f" [{imp.policy} {imp.rmse_pct:+.2f}%]"
            lines.append(text)
        return "\n".join(lines) + "\n"


def _num(v) -> str:
    return "" if v is None else repr(float(v))


def read_report_csv(path, kind: str = "backcast") -> EvalReport:
    """Rows of a report written by :meth:`EvalReport.to_csv` (without annotations)."""
    rows = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            rows.append(
                EvalRow(
                    rec["model"], rec["site"], rec["key"], rec["data_mode"],
                    float(rec["rmse"]), float(rec["mae"]) if rec["mae"] else None,
                    int(rec["n"]),
                )
            )
    return EvalReport(rows, kind)


def _baseline_ident(row: EvalRow, policy: str) -> tuple:
    if policy == "yield-only-baseline":
        return (row.model, row.site, YIELD_ONLY, REAL_ONLY)
    if policy == "same-feature-baseline":
        return (row.model, row.site, row.key, REAL_ONLY)
    raise FrameError(f"unknown baseline policy {policy!r}")


def annotate_improvements(
    report: EvalReport, policies: Sequence[str] = BASELINE_POLICIES
) -> EvalReport:
    """
    Copy of ``report`` where every non-baseline row carries its improvement
    over the baseline row selected by each policy. Rows without a baseline
    in the report are left unannotated for that policy.
    """
    index = {r.ident: r for r in report.rows}
    rows = []
    for r in report.rows:
        imps = []
        for pol in policies:
            key = _baseline_ident(r, pol)
            base = index.get(key)
            if base is None or key == r.ident:
                continue
            mae_pct = None
            if r.mae is not None and base.mae is not None:
                mae_pct = improvement_pct(base.mae, r.mae)
            imps.append(Improvement(pol, key, improvement_pct(base.rmse, r.rmse), mae_pct))
        rows.append(replace(r, improvements=tuple(imps)))
    return EvalReport(rows, report.kind)


@dataclass(frozen=True)
class Selection:
    """Winning model per (site, key); ``ties`` lists every model sharing the minimum."""

    winners: dict
    ties: dict
    metric: str = "rmse"

    def __getitem__(self, item):
        return self.winners[item]


def select_best_per_target(
    report: EvalReport | Iterable[EvalRow],
    metric: str = "rmse",
    candidates: Sequence[str] = MODEL_ORDER,
    data_mode: str | None = None,
) -> Selection:
    """
    Lowest-metric model per (site, key). Equal minima resolve by the order
    of ``candidates``; such ties are recorded.
    """
    if metric not in ("rmse", "mae"):
        raise FrameError(f"unknown selection metric {metric!r}")
    rows = report.rows if isinstance(report, EvalReport) else list(report)
    if data_mode is not None:
        rows = [r for r in rows if r.data_mode == data_mode]
    cells: dict[tuple[str, str], dict[str, float]] = {}
    for r in rows:
        if r.model not in candidates:
            continue
        value = getattr(r, metric)
        if value is None:
            raise FrameError(f"row {r.ident} has no {metric}")
        slot = cells.setdefault((r.site, r.key), {})
        if r.model in slot:
            raise FrameError(f"several {r.model} rows for {(r.site, r.key)}")
        slot[r.model] = value
    winners, ties = {}, {}
    for cell, scores in cells.items():
        missing = [m for m in candidates if m not in scores]
        if missing:
            raise FrameError(f"{cell}: no row for candidate model(s) {missing}")
        best = min(scores[m] for m in candidates)
        tied = tuple(m for m in candidates if scores[m] == best)
        winners[cell] = tied[0]
        if len(tied) > 1:
            ties[cell] = tied
    return Selection(winners, ties, metric)
