"""
Supervised datasets from frames: forward forecasting windows, reverse
(backcast) windows driven only by external weather, and 3-week yield windows,
plus the ratio and leave-group-out splits.

Feature columns are named ``<channel>@<offset>`` where the offset is in steps
relative to the row's anchor, e.g. ``MET@+0``, ``MET@+5`` or ``IT@-2``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import FrameError, NormalizationSpec, TimeSeriesFrame, format_timestamp

YIELD = "Yield"


def column_name(channel: str, offset: int) -> str:
    return f"{channel}@{offset:+d}"


def column_channel(name: str) -> str:
    return name.split("@", 1)[0]


@dataclass(frozen=True)
class WindowSpec:
    direction: str
    lookback: int
    horizon: int
    inputs: tuple[str, ...]
    target: str
    include_target_history: bool = False

    def __post_init__(self):
        if self.direction not in ("forward", "backward"):
            raise FrameError(f"unknown window direction {self.direction!r}")
        if self.lookback < 0:
            raise FrameError("lookback must be >= 0")
        if self.horizon < 0:
            raise FrameError("horizon must be >= 0")
        if not self.inputs and not self.include_target_history:
            raise FrameError("window needs input channels or target history")
        object.__setattr__(self, "inputs", tuple(self.inputs))


@dataclass
class WindowedDataset:
    """
    Flattened supervised matrix with per-row provenance.

    ``dropped`` counts candidate rows removed because a feature or the target
    was missing.
    """

    X: np.ndarray
    y: np.ndarray
    feature_names: tuple[str, ...]
    target: str
    sites: np.ndarray
    seasons: np.ndarray
    anchors: np.ndarray
    synthetic: np.ndarray
    layout: dict = field(default_factory=dict)
    dropped: int = 0

    def __post_init__(self):
        n = len(self.y)
        if self.X.shape != (n, len(self.feature_names)):
            raise FrameError(
                f"feature matrix {self.X.shape} does not match {n} rows x "
                f"{len(self.feature_names)} names"
            )
        for arr in (self.sites, self.seasons, self.anchors, self.synthetic):
            if len(arr) != n:
                raise FrameError("provenance arrays must match the row count")

    def __len__(self):
        return len(self.y)

    @property
    def groups(self) -> list[tuple[str, int]]:
        return list(zip(self.sites.tolist(), self.seasons.tolist()))

    def subset(self, rows) -> "WindowedDataset":
        rows = np.asarray(rows)
        return replace(
            self,
            X=self.X[rows],
            y=self.y[rows],
            sites=self.sites[rows],
            seasons=self.seasons[rows],
            anchors=self.anchors[rows],
            synthetic=self.synthetic[rows],
            dropped=0,
        )

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["site", "season", "anchor", "synthetic", *self.feature_names, self.target])
            for i in range(len(self)):
                w.writerow(
                    [
                        self.sites[i],
                        int(self.seasons[i]),
                        format_timestamp(self.anchors[i]),
                        int(bool(self.synthetic[i])),
                        *(repr(float(v)) for v in self.X[i]),
                        repr(float(self.y[i])),
                    ]
                )


def _assemble(frame, cols, names, target_col, anchors, target, layout, synthetic):
    X = np.column_stack(cols) if cols else np.empty((len(anchors), 0))
    y = np.asarray(target_col, dtype=np.float64)
    ok = ~(np.isnan(y) | np.isnan(X).any(axis=1))
    n = int(ok.sum())
    return WindowedDataset(
        X=X[ok],
        y=y[ok],
        feature_names=tuple(names),
        target=target,
        sites=np.array([frame.site] * n, dtype=object),
        seasons=np.full(n, frame.season, dtype=np.int64),
        anchors=frame.timestamps[anchors][ok],
        synthetic=np.full(n, synthetic, dtype=bool),
        layout=layout,
        dropped=int((~ok).sum()),
    )


def _is_synthetic(frame, channels):
    return any(frame.channel(c).synthetic for c in channels)


def build_forecast_windows(frame: TimeSeriesFrame, spec: WindowSpec) -> WindowedDataset:
    """
    One row per anchor t: inputs at t, t-1, ..., t-L; target at t+h.

    Columns are channel-major with the most recent reading first.
    """
    if spec.direction != "forward":
        raise FrameError("build_forecast_windows needs a forward WindowSpec")
    L, h = spec.lookback, spec.horizon
    n = len(frame)
    if n <= L + h:
        raise FrameError(f"frame of {n} rows is too short for lookback {L}, horizon {h}")
    anchors = np.arange(L, n - h)
    channels = list(spec.inputs)
    if spec.include_target_history:
        channels.append(spec.target)
    cols, names = [], []
    for ch in channels:
        x = frame.column(ch)
        for lag in range(L + 1):
            cols.append(x[anchors - lag])
            names.append(column_name(ch, -lag))
    target = frame.column(spec.target)[anchors + h]
    layout = {
        "direction": "forward",
        "lookback": L,
        "horizon": h,
        "inputs": list(spec.inputs),
        "include_target_history": spec.include_target_history,
    }
    return _assemble(
        frame, cols, names, target, anchors, spec.target, layout,
        _is_synthetic(frame, channels + [spec.target]),
    )


def build_backcast_windows(
    frame: TimeSeriesFrame,
    exogenous: Sequence[str],
    targets: Sequence[str],
    window: int = 6,
    offset_base: str = "anchor",
) -> dict[str, WindowedDataset]:
    """
    Per-target datasets predicting a reading at t from later weather only.

    With ``offset_base="anchor"`` the features are the exogenous channels at
    t, t+1, ..., t+W-1; with ``"future"`` they are at t+1, ..., t+W.
    """
    exogenous, targets = tuple(exogenous), tuple(targets)
    overlap = set(exogenous) & set(targets)
    if overlap:
        raise FrameError(f"channels both exogenous and target: {sorted(overlap)}")
    for ch in exogenous:
        kind = frame.channel(ch).kind
        if kind in ("sensor", "yield"):
            raise FrameError(f"exogenous channel {ch} is a {kind} channel")
    if window < 1:
        raise FrameError("backcast window must be >= 1")
    if offset_base not in ("anchor", "future"):
        raise FrameError(f"unknown offset_base {offset_base!r}")
    first = 0 if offset_base == "anchor" else 1
    n = len(frame)
    if n <= window:
        raise FrameError(f"frame of {n} rows is too short for window {window}")
    offsets = list(range(first, first + window))
    anchors = np.arange(0, n - offsets[-1])
    cols, names = [], []
    for ch in exogenous:
        x = frame.column(ch)
        for k in offsets:
            cols.append(x[anchors + k])
            names.append(column_name(ch, k))
    layout = {
        "direction": "backward",
        "window": window,
        "offset_base": offset_base,
        "inputs": list(exogenous),
    }
    out = {}
    for tgt in targets:
        out[tgt] = _assemble(
            frame, cols, names, frame.column(tgt)[anchors], anchors, tgt, layout,
            _is_synthetic(frame, list(exogenous) + [tgt]),
        )
    return out


def backcast_features(
    frame: TimeSeriesFrame,
    exogenous: Sequence[str],
    window: int = 6,
    offset_base: str = "anchor",
) -> tuple[np.ndarray, tuple[str, ...], np.ndarray]:
    """
    Feature matrix for every anchor of a weather-only frame.

    Returns ``(X, names, valid)``; rows whose window runs past the end of the
    frame or touches a missing reading are NaN and flagged invalid.
    """
    first = 0 if offset_base == "anchor" else 1
    n = len(frame)
    offsets = list(range(first, first + window))
    cols, names = [], []
    for ch in exogenous:
        x = frame.column(ch)
        padded = np.concatenate([x, np.full(offsets[-1], np.nan)])
        for k in offsets:
            cols.append(padded[k : k + n])
            names.append(column_name(ch, k))
    X = np.column_stack(cols)
    valid = ~np.isnan(X).any(axis=1)
    return X, tuple(names), valid


def build_yield_windows(
    weekly: TimeSeriesFrame | Sequence[TimeSeriesFrame],
    env_channels: Sequence[str] = (),
    static_channels: Sequence[str] = (),
    yield_channel: str = YIELD,
) -> WindowedDataset:
    """
    Week-triple rows: yield of week w+2 from yield at w, w+1 and the
    environment at w, w+1, w+2.

    Each frame is one (site, season) group; rows never span two frames.
    Static channels are taken once, at the target week.
    """
    frames = [weekly] if isinstance(weekly, TimeSeriesFrame) else list(weekly)
    if not frames:
        raise FrameError("build_yield_windows needs at least one weekly frame")
    parts = []
    for f in frames:
        if f.resolution != "weekly":
            raise FrameError(f"{f.site}/{f.season}: yield windows need weekly data")
        n = len(f)
        if n < 3:
            raise FrameError(f"{f.site}/{f.season}: only {n} week(s), need >= 3")
        anchors = np.arange(2, n)
        cols, names = [], []
        yv = f.column(yield_channel)
        for off in (-2, -1):
            cols.append(yv[anchors + off])
            names.append(column_name(yield_channel, off))
        for ch in env_channels:
            x = f.column(ch)
            for off in (-2, -1, 0):
                cols.append(x[anchors + off])
                names.append(column_name(ch, off))
        for ch in static_channels:
            cols.append(f.column(ch)[anchors])
            names.append(ch)
        layout = {
            "direction": "yield",
            "weeks": 3,
            "env": list(env_channels),
            "static": list(static_channels),
        }
        used = [yield_channel, *env_channels, *static_channels]
        parts.append(
            _assemble(
                f, cols, names, yv[anchors], anchors, yield_channel, layout,
                _is_synthetic(f, used),
            )
        )
    return concat_datasets(parts)


def concat_datasets(parts: Sequence[WindowedDataset]) -> WindowedDataset:
    if not parts:
        raise FrameError("nothing to concatenate")
    first = parts[0]
    for p in parts[1:]:
        if p.feature_names != first.feature_names or p.target != first.target:
            raise FrameError("datasets disagree on feature schema")
    return WindowedDataset(
        X=np.vstack([p.X for p in parts]),
        y=np.concatenate([p.y for p in parts]),
        feature_names=first.feature_names,
        target=first.target,
        sites=np.concatenate([p.sites for p in parts]),
        seasons=np.concatenate([p.seasons for p in parts]),
        anchors=np.concatenate([p.anchors for p in parts]),
        synthetic=np.concatenate([p.synthetic for p in parts]),
        layout=first.layout,
        dropped=sum(p.dropped for p in parts),
    )


def split_ratio(
    dataset: WindowedDataset,
    train_fraction: float = 0.85,
    seed: int = 0,
    shuffle: bool = True,
) -> tuple[WindowedDataset, WindowedDataset]:
    """
    Train/test partition at ``train_fraction``.

    The train size is floor(n * fraction), held inside [1, n-1]. Shuffled
    splits are reproducible from ``seed``; unshuffled splits put the earliest
    anchors in train.
    """
    n = len(dataset)
    if n < 2:
        raise FrameError(f"cannot split {n} sample(s)")
    if not 0.0 < train_fraction < 1.0:
        raise FrameError("train_fraction must lie in (0, 1)")
    n_train = min(max(math.floor(n * train_fraction + 1e-9), 1), n - 1)
    if shuffle:
        order = np.random.default_rng(seed).permutation(n)
    else:
        order = np.argsort(dataset.anchors, kind="stable")
    train = np.sort(order[:n_train])
    test = np.sort(order[n_train:])
    return dataset.subset(train), dataset.subset(test)


def split_leave_group_out(
    dataset: WindowedDataset, held_out: Iterable[tuple[str, int]]
) -> tuple[WindowedDataset, WindowedDataset]:
    held = {(str(s), int(y)) for s, y in held_out}
    present = set(dataset.groups)
    absent = held - present
    if absent:
        raise FrameError(f"held-out group(s) not in dataset: {sorted(absent)}")
    mask = np.array([g in held for g in dataset.groups], dtype=bool)
    if not mask.any():
        raise FrameError("leave-group-out split has an empty test set")
    if mask.all():
        raise FrameError("leave-group-out split leaves no training rows")
    return dataset.subset(np.flatnonzero(~mask)), dataset.subset(np.flatnonzero(mask))


def fit_dataset_normalizer(
    dataset: WindowedDataset, a1: float = -1.0, a2: float = 1.0, source: str = "train"
) -> NormalizationSpec:
    """Per-channel extrema over every column that reads that channel."""
    if len(dataset) == 0:
        raise FrameError("cannot fit a normalizer on an empty dataset")
    ranges: dict[str, tuple[float, float]] = {}
    for j, name in enumerate(dataset.feature_names):
        ch = column_channel(name)
        lo, hi = float(dataset.X[:, j].min()), float(dataset.X[:, j].max())
        if ch in ranges:
            lo, hi = min(lo, ranges[ch][0]), max(hi, ranges[ch][1])
        ranges[ch] = (lo, hi)
    return NormalizationSpec(ranges, a1, a2, source)


def normalize_matrix(spec: NormalizationSpec, X: np.ndarray, names: Sequence[str]) -> np.ndarray:
    out = np.empty_like(X, dtype=np.float64)
    for j, name in enumerate(names):
        out[:, j] = spec.forward(column_channel(name), X[:, j])
    return out


def normalize_dataset(spec: NormalizationSpec, dataset: WindowedDataset) -> WindowedDataset:
    return replace(dataset, X=normalize_matrix(spec, dataset.X, dataset.feature_names))
