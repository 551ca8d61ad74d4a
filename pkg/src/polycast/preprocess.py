"""
Cleaning and transformation steps applied before any modelling:
resampling, gap filling, replicate averaging, redundant-pair merging,
site one-hot encoding and min-max normalization.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import (
    ChannelSpec,
    FrameError,
    NormalizationSpec,
    TimeSeriesFrame,
    encoded_channel,
    format_timestamp,
    on_boundary,
    resolution_seconds,
)

log = logging.getLogger(__name__)

DEFAULT_MAX_GAP = 6


@dataclass(frozen=True)
class GapRecord:
    """One run of missing cells and what was done about it."""

    channel: str
    start: np.datetime64
    end: np.datetime64
    length: int
    action: str


def write_gap_report(records: Iterable[GapRecord], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["channel", "start", "end", "length", "action"])
        for r in records:
            w.writerow(
                [r.channel, format_timestamp(r.start), format_timestamp(r.end), r.length, r.action]
            )


def _missing_runs(col: np.ndarray) -> list[tuple[int, int]]:
    """Half-open [start, stop) index runs of NaN cells."""
    miss = np.isnan(col).astype(np.int8)
    if not miss.any():
        return []
    d = np.diff(np.concatenate([[0], miss, [0]]))
    starts = np.flatnonzero(d == 1)
    stops = np.flatnonzero(d == -1)
    return list(zip(starts.tolist(), stops.tolist()))


def prealign(
    timestamps,
    channels: Sequence[ChannelSpec],
    values,
    site: str,
    season: int,
    resolution: str = "20min",
) -> TimeSeriesFrame:
    """
    Snap jittered raw readings onto the nearest grid instant.

    Readings that collide on the same instant are averaged; instants with no
    reading become missing rows.
    """
    step = resolution_seconds(resolution)
    secs = np.asarray(timestamps).astype("datetime64[s]").astype(np.int64)
    vals = np.asarray(values, dtype=np.float64).reshape(len(secs), len(channels))
    if len(secs) == 0:
        raise FrameError("prealign needs at least one reading")
    snapped = np.floor((secs + step / 2) / step).astype(np.int64) * step
    grid = np.arange(snapped.min(), snapped.max() + step, step)
    slot = ((snapped - grid[0]) // step).astype(np.int64)
    total = np.zeros((len(grid), len(channels)))
    count = np.zeros((len(grid), len(channels)))
    present = ~np.isnan(vals)
    np.add.at(total, slot, np.where(present, vals, 0.0))
    np.add.at(count, slot, present.astype(float))
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(count > 0, total / np.maximum(count, 1), np.nan)
    return TimeSeriesFrame(
        site, season, resolution, grid.astype("datetime64[s]"), channels, out
    )


def resample(frame: TimeSeriesFrame, target: str) -> TimeSeriesFrame:
    """
    Aggregate to a coarser resolution.

    Sum channels are summed and mean channels averaged over the present cells
    of each bucket. A bucket with no present cell is missing.
    """
    src = resolution_seconds(frame.resolution)
    dst = resolution_seconds(target)
    if dst <= src:
        raise FrameError(
            f"cannot resample {frame.resolution} to {target}: target must be coarser"
        )
    if dst % src:
        raise FrameError(f"{target} is not a whole multiple of {frame.resolution}")
    if len(frame) == 0:
        raise FrameError("cannot resample an empty frame")
    ratio = dst // src
    if not on_boundary(frame.timestamps[:1], target)[0]:
        raise FrameError(
            f"frame starts at {format_timestamp(frame.timestamps[0])}, "
            f"not on a {target} boundary"
        )
    if len(frame) % ratio:
        raise FrameError(
            f"frame of {len(frame)} {frame.resolution} rows does not end on a "
            f"{target} boundary"
        )
    n_out = len(frame) // ratio
    blocks = frame.values.reshape(n_out, ratio, len(frame.channels))
    out = np.full((n_out, len(frame.channels)), np.nan)
    for j, spec in enumerate(frame.channels):
        b = blocks[:, :, j]
        for i in range(n_out):
            row = b[i][~np.isnan(b[i])]
            if row.size == 0:
                continue
            s = math.fsum(row.tolist())
            out[i, j] = s if spec.aggregation == "sum" else s / row.size
    ts = frame.timestamps[::ratio]
    return TimeSeriesFrame(frame.site, frame.season, target, ts, frame.channels, out)


def fill_locf(
    frame: TimeSeriesFrame,
    channels: Sequence[str] | None = None,
    max_gap: int = DEFAULT_MAX_GAP,
) -> tuple[TimeSeriesFrame, list[GapRecord]]:
    """Carry the last present value over missing runs of at most ``max_gap`` cells."""
    channels = frame.acronyms if channels is None else tuple(channels)
    vals = np.array(frame.values, copy=True)
    report = []
    ts = frame.timestamps
    for ch in channels:
        j = frame.index_of(ch)
        col = vals[:, j]
        for start, stop in _missing_runs(col):
            length = stop - start
            if start == 0:
                action = "leading-unfilled"
            elif length > max_gap:
                action = "too-long-unfilled"
            else:
                col[start:stop] = col[start - 1]
                action = "locf"
            report.append(GapRecord(ch, ts[start], ts[stop - 1], length, action))
    return frame.with_values(vals), report


def fill_from_paired_site(
    frame: TimeSeriesFrame, channel: str, donor: TimeSeriesFrame
) -> tuple[TimeSeriesFrame, int]:
    """Copy missing cells of ``channel`` from the aligned cells of a donor frame."""
    if not donor.has(channel):
        raise FrameError(f"donor {donor.site} has no channel {channel}")
    if donor.resolution != frame.resolution:
        raise FrameError("donor resolution differs from frame resolution")
    j = frame.index_of(channel)
    col = np.array(frame.values[:, j], copy=True)
    pos = {t: i for i, t in enumerate(donor.timestamps.astype(np.int64).tolist())}
    dcol = donor.column(channel)
    copied = 0
    for i in np.flatnonzero(np.isnan(col)):
        k = pos.get(int(frame.timestamps[i].astype(np.int64)))
        if k is not None and not np.isnan(dcol[k]):
            col[i] = dcol[k]
            copied += 1
    return frame.with_column(channel, col), copied


def average_replicates(frames: Sequence[TimeSeriesFrame], channel: str) -> TimeSeriesFrame:
    """
    Mean of present replicate values per timestamp for one channel.

    The result keeps the first frame's site/season and only ``channel``.
    """
    if not frames:
        raise FrameError("average_replicates needs at least one frame")
    first = frames[0]
    for f in frames[1:]:
        if not np.array_equal(f.timestamps, first.timestamps):
            raise FrameError("replicate frames must share timestamps")
    stack = np.column_stack([f.column(channel) for f in frames])
    present = ~np.isnan(stack)
    n = present.sum(axis=1)
    with np.errstate(invalid="ignore"):
        mean = np.where(n > 0, np.where(present, stack, 0.0).sum(axis=1) / np.maximum(n, 1), np.nan)
    return first.select([channel]).with_column(channel, mean)


def merge_redundant_pair(
    frame: TimeSeriesFrame, a: str, b: str, out: str
) -> TimeSeriesFrame:
    """Replace channels ``a`` and ``b`` by their elementwise mean ``out``."""
    ca, cb = frame.channel(a), frame.channel(b)
    if ca.unit != cb.unit:
        raise FrameError(f"unit mismatch: {a} in {ca.unit!r}, {b} in {cb.unit!r}")
    xa, xb = frame.column(a), frame.column(b)
    merged = np.where(
        np.isnan(xa), xb, np.where(np.isnan(xb), xa, (xa + xb) / 2.0)
    )
    kind = "weather" if "weather" in (ca.kind, cb.kind) else ca.kind
    lo_hi = None
    if ca.valid_range and cb.valid_range:
        lo_hi = (
            min(ca.valid_range[0], cb.valid_range[0]),
            max(ca.valid_range[1], cb.valid_range[1]),
        )
    spec = ChannelSpec(
        out, ca.unit, kind, "mean", lo_hi, synthetic=ca.synthetic or cb.synthetic
    )
    rest = frame.drop([a, b])
    if rest.has(out):
        raise FrameError(f"merge output {out} collides with an existing channel")
    return rest.add_channels([spec], merged)


def site_channel(site: str) -> str:
    return f"site_{site}"


def one_hot_site(frame: TimeSeriesFrame, vocabulary: Sequence[str]) -> TimeSeriesFrame:
    """Append one constant indicator channel per vocabulary entry."""
    if frame.site not in vocabulary:
        raise FrameError(f"site {frame.site!r} not in vocabulary {list(vocabulary)}")
    specs = [encoded_channel(site_channel(s)) for s in vocabulary]
    row = np.array([1.0 if s == frame.site else 0.0 for s in vocabulary])
    return frame.add_channels(specs, np.tile(row, (len(frame), 1)))


def fit_normalizer(
    frame: TimeSeriesFrame,
    channels: Sequence[str] | None = None,
    a1: float = -1.0,
    a2: float = 1.0,
    source: str | None = None,
) -> NormalizationSpec:
    channels = frame.acronyms if channels is None else tuple(channels)
    ranges = {}
    for ch in channels:
        col = frame.column(ch)
        col = col[~np.isnan(col)]
        if col.size == 0:
            raise FrameError(f"cannot fit normalizer: {ch} has no present values")
        ranges[ch] = (float(col.min()), float(col.max()))
    if source is None:
        source = f"{frame.site}/{frame.season}/{frame.resolution}"
    return NormalizationSpec(ranges, a1, a2, source)


def apply_normalizer(
    spec: NormalizationSpec, frame: TimeSeriesFrame, channels: Sequence[str] | None = None
) -> TimeSeriesFrame:
    """
    Map ``channels`` (default: every channel covered by ``spec``) onto
    [a1, a2]; other channels pass through.
    """
    if channels is None:
        wanted = set(spec.ranges)
    else:
        wanted = set(channels)
        uncovered = sorted(wanted - set(spec.ranges))
        if uncovered:
            raise FrameError(f"channel(s) {uncovered} not covered by normalizer")
    vals = np.array(frame.values, copy=True)
    out_channels = list(frame.channels)
    for j, ch in enumerate(frame.acronyms):
        if ch in wanted:
            vals[:, j] = spec.forward(ch, vals[:, j])
            out_channels[j] = replace(out_channels[j], valid_range=None)
    return frame.with_values(vals, channels=out_channels)


def invert_normalizer(
    spec: NormalizationSpec,
    frame: TimeSeriesFrame,
    registry=None,
) -> TimeSeriesFrame:
    """
    Map normalized channels back to physical units.

    ``registry`` restores the channels' valid ranges when given.
    """
    vals = np.array(frame.values, copy=True)
    channels = list(frame.channels)
    for j, ch in enumerate(frame.acronyms):
        if ch in spec.ranges:
            vals[:, j] = spec.inverse(ch, vals[:, j])
            if registry is not None and ch in registry:
                channels[j] = replace(
                    channels[j], valid_range=registry[ch].valid_range
                )
    return frame.with_values(vals, channels=channels)
