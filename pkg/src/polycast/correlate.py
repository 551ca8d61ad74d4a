"""Pearson correlation, strength categories and correlation-driven selection."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import FrameError, TimeSeriesFrame

# Upper-inclusive bounds on |p|.
CATEGORIES = (
    ("negligible", 0.10),
    ("weak", 0.39),
    ("moderate", 0.69),
    ("strong", 0.89),
    ("very strong", 1.0),
)
CATEGORY_RANK = {name: i for i, (name, _) in enumerate(CATEGORIES)}


def pearson(x, y) -> float:
    """
    Pearson correlation over pairs where both members are present.

    Raises FrameError when fewer than two complete pairs remain or either
    side is constant on them.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise FrameError(f"length mismatch: {x.shape} vs {y.shape}")
    keep = ~(np.isnan(x) | np.isnan(y))
    x, y = x[keep], y[keep]
    if x.size < 2:
        raise FrameError("pearson needs at least 2 complete pairs")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0.0 or syy == 0.0:
        raise FrameError("pearson is undefined for a constant input")
    p = float(np.dot(dx, dy)) / np.sqrt(sxx * syy)
    return min(1.0, max(-1.0, p))


def classify_correlation(p: float) -> str:
    a = abs(p)
    if a > 1.0:
        raise FrameError(f"|p| = {a} exceeds 1")
    for name, upper in CATEGORIES:
        if a <= upper:
            return name
    return CATEGORIES[-1][0]


@dataclass(frozen=True)
class CorrelationMatrix:
    """Pairwise-complete Pearson coefficients; NaN where undefined."""

    channels: tuple[str, ...]
    coefficients: np.ndarray
    counts: np.ndarray
    constant: tuple[str, ...] = ()
    resolution: str = ""

    def get(self, a: str, b: str) -> float:
        return float(self.coefficients[self.channels.index(a), self.channels.index(b)])

    def to_square_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["", *self.channels])
            for i, a in enumerate(self.channels):
                w.writerow([a, *(_fmt(v) for v in self.coefficients[i])])

    def to_long_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["a", "b", "p", "n", "category"])
            for i, a in enumerate(self.channels):
                for j, b in enumerate(self.channels):
                    p = self.coefficients[i, j]
                    cat = "" if np.isnan(p) else classify_correlation(p)
                    w.writerow([a, b, _fmt(p), int(self.counts[i, j]), cat])


def _fmt(v: float) -> str:
    return "" if np.isnan(v) else repr(float(v))


def correlation_matrix(
    frame: TimeSeriesFrame | Sequence[TimeSeriesFrame],
    channels: Sequence[str] | None = None,
) -> CorrelationMatrix:
    """
    Correlation matrix over one frame, or over the pooled rows of several.

    Constant channels are listed in ``constant`` and their row and column are
    NaN, diagonal included.
    """
    frames = [frame] if isinstance(frame, TimeSeriesFrame) else list(frame)
    if channels is None:
        channels = frames[0].acronyms
    channels = tuple(channels)
    if len(channels) < 2:
        raise FrameError("correlation_matrix needs at least 2 channels")
    data = np.vstack([f.select(channels).values for f in frames])
    k = len(channels)
    coef = np.full((k, k), np.nan)
    counts = np.zeros((k, k), dtype=np.int64)
    present = ~np.isnan(data)
    constant = []
    for j in range(k):
        col = data[present[:, j], j]
        if col.size < 2 or np.all(col == col[0]):
            constant.append(channels[j])
    for i in range(k):
        for j in range(i, k):
            both = present[:, i] & present[:, j]
            counts[i, j] = counts[j, i] = int(both.sum())
            if channels[i] in constant or channels[j] in constant:
                continue
            try:
                p = 1.0 if i == j else pearson(data[both, i], data[both, j])
            except FrameError:
                # constant on the complete pairs only
                continue
            coef[i, j] = coef[j, i] = p
    return CorrelationMatrix(
        channels, coef, counts, tuple(constant), frames[0].resolution
    )


def select_by_target_correlation(
    matrix: CorrelationMatrix, target: str, minimum: str
) -> list[str]:
    """Channels at least ``minimum`` strength versus ``target``, strongest first."""
    if target not in matrix.channels:
        raise FrameError(f"target {target} not in correlation matrix")
    if minimum not in CATEGORY_RANK:
        raise FrameError(f"unknown category {minimum!r}")
    floor = CATEGORY_RANK[minimum]
    t = matrix.channels.index(target)
    picked = []
    for i, ch in enumerate(matrix.channels):
        p = matrix.coefficients[t, i]
        if ch == target or np.isnan(p):
            continue
        if CATEGORY_RANK[classify_correlation(p)] >= floor:
            picked.append((-abs(p), i, ch))
    picked.sort()
    return [ch for _, _, ch in picked]
