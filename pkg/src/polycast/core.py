"""
Shared domain types: channel metadata, uniformly indexed frames, and
normalization parameters.

Missing cells are stored as NaN in float64 value arrays. NaN can never be
produced by a real measurement, so a rainfall of 0.0 is never confused with
a gap.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

MISSING = np.nan

RESOLUTIONS: dict[str, int] = {
    "20min": 1200,
    "hourly": 3600,
    "daily": 86400,
    "weekly": 7 * 86400,
}

KINDS = ("sensor", "weather", "yield", "encoded")
AGGREGATIONS = ("mean", "sum")

# 1970-01-01 was a Thursday; weekly buckets start on Monday 00:00 UTC.
_MONDAY_OFFSET_S = 4 * 86400


class PolycastError(Exception):
    """Base class for all toolkit errors."""


class FrameError(PolycastError, ValueError):
    """A frame, channel or dataset violates a precondition."""


class InvariantViolation(PolycastError, AssertionError):
    """An internal invariant was found broken after construction."""


@dataclass(frozen=True)
class ChannelSpec:
    """Metadata for one channel of a frame."""

    acronym: str
    unit: str
    kind: str
    aggregation: str
    valid_range: tuple[float, float] | None = None
    synthetic: bool = False

    def __post_init__(self):
        if not self.acronym:
            raise FrameError("channel acronym must be non-empty")
        if self.kind not in KINDS:
            raise FrameError(f"{self.acronym}: unknown kind {self.kind!r}")
        if self.aggregation not in AGGREGATIONS:
            raise FrameError(
                f"{self.acronym}: unknown aggregation {self.aggregation!r}"
            )
        expected = "sum" if self.kind == "yield" else "mean"
        if self.kind != "encoded" and self.aggregation != expected:
            raise FrameError(
                f"{self.acronym}: {self.kind} channels aggregate by {expected}"
            )
        if self.valid_range is not None:
            lo, hi = self.valid_range
            if not lo <= hi:
                raise FrameError(
                    f"{self.acronym}: valid_range lower bound exceeds upper"
                )
            object.__setattr__(self, "valid_range", (float(lo), float(hi)))

    def in_range(self, values: np.ndarray) -> np.ndarray:
        """Boolean mask of cells that are present and outside valid_range."""
        if self.valid_range is None:
            return np.zeros(values.shape, dtype=bool)
        lo, hi = self.valid_range
        with np.errstate(invalid="ignore"):
            return ~np.isnan(values) & ((values < lo) | (values > hi))


def _sensor(acr, unit, rng=None):
    return ChannelSpec(acr, unit, "sensor", "mean", rng)


def _weather(acr, unit, rng=None):
    return ChannelSpec(acr, unit, "weather", "mean", rng)


DEFAULT_CHANNELS: tuple[ChannelSpec, ...] = (
    _sensor("WU", "Litres", (0.0, 10000.0)),
    _sensor("IT", "°C", (-30.0, 70.0)),
    _sensor("IH", "%", (0.0, 100.0)),
    _sensor("PET", "°C", (-30.0, 60.0)),
    _sensor("PEH", "%", (0.0, 100.0)),
    _sensor("SM", "%", (0.0, 100.0)),
    _sensor("ST", "°C", (-20.0, 60.0)),
    _sensor("PAR", "µmol m⁻² s⁻¹", (0.0, 3000.0)),
    ChannelSpec("Yield", "Kg/m", "yield", "sum", (0.0, 100.0)),
    _weather("MET", "°C", (-30.0, 50.0)),
    _weather("Vis", "dm", (0.0, 100000.0)),
    _weather("Pre", "hPa", (850.0, 1100.0)),
    _weather("MEH", "%", (0.0, 100.0)),
    _weather("Rad", "KJ/m2", (0.0, 5000.0)),
    _weather("WS", "Kn", (0.0, 200.0)),
    _weather("WD", "degrees", (0.0, 360.0)),
    _weather("WG", "Kn", (0.0, 250.0)),
    _weather("RFA", "mm", (0.0, 500.0)),
)


class ChannelRegistry(Mapping[str, ChannelSpec]):
    """Lookup of known channels by acronym."""

    def __init__(self, channels: Iterable[ChannelSpec] = DEFAULT_CHANNELS):
        self._specs: dict[str, ChannelSpec] = {}
        for spec in channels:
            if spec.acronym in self._specs:
                raise FrameError(f"duplicate channel {spec.acronym} in registry")
            self._specs[spec.acronym] = spec

    def __getitem__(self, key: str) -> ChannelSpec:
        return self._specs[key]

    def __iter__(self):
        return iter(self._specs)

    def __len__(self):
        return len(self._specs)

    def with_channels(self, channels: Iterable[ChannelSpec]) -> "ChannelRegistry":
        merged = dict(self._specs)
        for spec in channels:
            merged[spec.acronym] = spec
        return ChannelRegistry(merged.values())


def encoded_channel(acronym: str) -> ChannelSpec:
    return ChannelSpec(acronym, "", "encoded", "mean", (0.0, 1.0))


def resolution_seconds(resolution: str) -> int:
    try:
        return RESOLUTIONS[resolution]
    except KeyError:
        raise FrameError(f"unknown resolution {resolution!r}") from None


def on_boundary(ts: np.ndarray, resolution: str) -> np.ndarray:
    """Mask of timestamps that start a bucket of the given resolution."""
    secs = ts.astype("datetime64[s]").astype(np.int64)
    step = resolution_seconds(resolution)
    if resolution == "weekly":
        secs = secs - _MONDAY_OFFSET_S
    return secs % step == 0


def to_timestamps(values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.dtype.kind != "M":
        arr = np.array([np.datetime64(_strip_utc(v)) for v in arr])
    return arr.astype("datetime64[s]")


def _strip_utc(text):
    if isinstance(text, str):
        if text.endswith("Z"):
            return text[:-1]
        if text.endswith("+00:00"):
            return text[:-6]
    return text


def format_timestamp(ts: np.datetime64) -> str:
    return str(np.datetime64(ts, "s")) + "Z"


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


class TimeSeriesFrame:
    """
    Immutable multi-channel series on a uniform UTC time index.

    Parameters
    ----------
    site : str
        Site identifier (e.g. ``"Multispan"`` or ``"Seaton-2"``).
    season : int
        Calendar year of the growing season.
    resolution : str
        One of ``20min``, ``hourly``, ``daily``, ``weekly``.
    timestamps : array-like of datetime64
        Strictly increasing, exactly one resolution step apart.
    channels : sequence of ChannelSpec
    values : ndarray, shape (n_rows, n_channels)
        Float values; NaN marks a missing cell.
    """

    __slots__ = ("site", "season", "resolution", "timestamps", "channels", "values")

    def __init__(
        self,
        site: str,
        season: int,
        resolution: str,
        timestamps,
        channels: Sequence[ChannelSpec],
        values,
    ):
        ts = to_timestamps(timestamps)
        vals = np.asarray(values, dtype=np.float64)
        if vals.ndim == 1 and len(channels) == 1:
            vals = vals.reshape(-1, 1)
        if vals.size == 0 and vals.ndim != 2:
            vals = vals.reshape(len(ts), len(channels))
        object.__setattr__(self, "site", str(site))
        object.__setattr__(self, "season", int(season))
        object.__setattr__(self, "resolution", resolution)
        object.__setattr__(self, "timestamps", _frozen(ts))
        object.__setattr__(self, "channels", tuple(channels))
        object.__setattr__(self, "values", _frozen(vals))
        validate_frame(self)

    def __setattr__(self, name, value):
        raise AttributeError("TimeSeriesFrame is immutable")

    def __len__(self):
        return len(self.timestamps)

    def __repr__(self):
        names = ",".join(self.acronyms)
        return (
            f"TimeSeriesFrame(site={self.site!r}, season={self.season}, "
            f"resolution={self.resolution!r}, rows={len(self)}, channels=[{names}])"
        )

    def __eq__(self, other):
        if not isinstance(other, TimeSeriesFrame):
            return NotImplemented
        return (
            self.site == other.site
            and self.season == other.season
            and self.resolution == other.resolution
            and self.channels == other.channels
            and np.array_equal(self.timestamps, other.timestamps)
            and np.array_equal(self.values, other.values, equal_nan=True)
        )

    __hash__ = None

    @property
    def acronyms(self) -> tuple[str, ...]:
        return tuple(c.acronym for c in self.channels)

    @property
    def group(self) -> tuple[str, int]:
        return (self.site, self.season)

    def index_of(self, acronym: str) -> int:
        for i, c in enumerate(self.channels):
            if c.acronym == acronym:
                return i
        raise FrameError(f"channel {acronym} not in frame {self.site}/{self.season}")

    def channel(self, acronym: str) -> ChannelSpec:
        return self.channels[self.index_of(acronym)]

    def has(self, acronym: str) -> bool:
        return acronym in self.acronyms

    def column(self, acronym: str) -> np.ndarray:
        return self.values[:, self.index_of(acronym)]

    def with_values(self, values, channels=None, timestamps=None) -> "TimeSeriesFrame":
        return TimeSeriesFrame(
            self.site,
            self.season,
            self.resolution,
            self.timestamps if timestamps is None else timestamps,
            self.channels if channels is None else channels,
            values,
        )

    def with_column(self, acronym: str, column) -> "TimeSeriesFrame":
        vals = np.array(self.values, copy=True)
        vals[:, self.index_of(acronym)] = column
        return self.with_values(vals)

    def select(self, acronyms: Sequence[str]) -> "TimeSeriesFrame":
        idx = [self.index_of(a) for a in acronyms]
        return self.with_values(
            self.values[:, idx], channels=[self.channels[i] for i in idx]
        )

    def drop(self, acronyms: Iterable[str]) -> "TimeSeriesFrame":
        gone = set(acronyms)
        keep = [a for a in self.acronyms if a not in gone]
        return self.select(keep)

    def add_channels(self, specs: Sequence[ChannelSpec], columns) -> "TimeSeriesFrame":
        cols = np.asarray(columns, dtype=np.float64).reshape(len(self), len(specs))
        return self.with_values(
            np.hstack([self.values, cols]), channels=self.channels + tuple(specs)
        )

    def relabel(self, site: str | None = None, season: int | None = None):
        return TimeSeriesFrame(
            self.site if site is None else site,
            self.season if season is None else season,
            self.resolution,
            self.timestamps,
            self.channels,
            self.values,
        )

    def mark_synthetic(self) -> "TimeSeriesFrame":
        return self.with_values(
            self.values, channels=[replace(c, synthetic=True) for c in self.channels]
        )


def validate_frame(frame: TimeSeriesFrame) -> TimeSeriesFrame:
    """Check every frame invariant; raise FrameError on the first violation."""
    step = resolution_seconds(frame.resolution)
    acr = [c.acronym for c in frame.channels]
    if len(set(acr)) != len(acr):
        dup = sorted({a for a in acr if acr.count(a) > 1})
        raise FrameError(f"duplicate channel acronym(s): {', '.join(dup)}")
    vals = frame.values
    if vals.ndim != 2 or vals.shape != (len(frame.timestamps), len(frame.channels)):
        raise FrameError(
            f"values shape {vals.shape} does not match "
            f"{len(frame.timestamps)} rows x {len(frame.channels)} channels"
        )
    if len(frame.timestamps) > 1:
        diffs = np.diff(frame.timestamps.astype(np.int64))
        if np.any(diffs <= 0):
            raise FrameError("timestamps must be strictly increasing")
        if np.any(diffs != step):
            raise FrameError(
                f"irregular timestamp spacing for resolution {frame.resolution}"
            )
    for j, spec in enumerate(frame.channels):
        if np.any(np.isinf(vals[:, j])):
            raise FrameError(f"{spec.acronym}: infinite values are not allowed")
        bad = spec.in_range(vals[:, j])
        if bad.any():
            raise FrameError(
                f"{spec.acronym}: {int(bad.sum())} value(s) outside valid range "
                f"{spec.valid_range}"
            )
    return frame


def join_frames(frames: Sequence[TimeSeriesFrame]) -> TimeSeriesFrame:
    """Union of channels on the intersection of timestamps."""
    if not frames:
        raise FrameError("join_frames needs at least one frame")
    first = frames[0]
    for f in frames[1:]:
        if f.resolution != first.resolution:
            raise FrameError(
                f"resolution mismatch: {first.resolution} vs {f.resolution}"
            )
        if f.group != first.group:
            raise FrameError(
                f"site/season mismatch: {first.group} vs {f.group}"
            )
    seen: set[str] = set()
    for f in frames:
        for a in f.acronyms:
            if a in seen:
                raise FrameError(f"duplicate channel acronym {a} across frames")
            seen.add(a)
    if not all(len(f) for f in frames):
        raise FrameError("empty timestamp intersection")
    start = max(f.timestamps[0] for f in frames)
    end = min(f.timestamps[-1] for f in frames)
    if start > end:
        raise FrameError("empty timestamp intersection")
    step = np.timedelta64(resolution_seconds(first.resolution), "s")
    if any((f.timestamps[0] - start) % step for f in frames):
        raise FrameError("frames are not aligned to a common time grid")
    blocks, channels = [], []
    for f in frames:
        lo = int((start - f.timestamps[0]) // step)
        hi = int((end - f.timestamps[0]) // step) + 1
        blocks.append(f.values[lo:hi])
        channels.extend(f.channels)
        ts = f.timestamps[lo:hi]
    return TimeSeriesFrame(
        first.site, first.season, first.resolution, ts, channels, np.hstack(blocks)
    )


def slice_season(frame: TimeSeriesFrame, start, end) -> TimeSeriesFrame:
    """Rows with start <= t <= end."""
    start = to_timestamps([start])[0]
    end = to_timestamps([end])[0]
    if not start < end:
        raise FrameError("slice start must precede end")
    mask = (frame.timestamps >= start) & (frame.timestamps <= end)
    if not mask.any():
        raise FrameError("slice window contains no rows")
    return frame.with_values(frame.values[mask], timestamps=frame.timestamps[mask])


def concat_time(frames: Sequence[TimeSeriesFrame]) -> TimeSeriesFrame:
    """Stack contiguous frames of one group along time."""
    first = frames[0]
    ts = np.concatenate([f.timestamps for f in frames])
    vals = np.vstack([f.values for f in frames])
    for f in frames[1:]:
        if f.channels != first.channels:
            raise FrameError("concat_time requires identical channels")
    return first.with_values(vals, timestamps=ts)


@dataclass(frozen=True)
class NormalizationSpec:
    """
    Per-channel min/max fitted on one data set, plus the target interval.

    ``source`` records which frame or split the extrema came from.
    """

    ranges: Mapping[str, tuple[float, float]]
    a1: float = -1.0
    a2: float = 1.0
    source: str = ""

    def __post_init__(self):
        if not self.a1 < self.a2:
            raise FrameError("normalization interval requires a1 < a2")
        clean = {}
        for ch, (lo, hi) in dict(self.ranges).items():
            if not lo <= hi:
                raise FrameError(f"{ch}: fitted min exceeds max")
            clean[ch] = (float(lo), float(hi))
        object.__setattr__(self, "ranges", clean)

    def forward(self, channel: str, x: np.ndarray) -> np.ndarray:
        lo, hi = self._range(channel)
        x = np.asarray(x, dtype=np.float64)
        if hi == lo:
            out = np.full(x.shape, (self.a1 + self.a2) / 2.0)
            out[np.isnan(x)] = np.nan
            return out
        u = (x - lo) / (hi - lo)
        # lerp form hits a1 and a2 exactly at u = 0 and u = 1
        return self.a1 * (1.0 - u) + self.a2 * u

    def inverse(self, channel: str, x: np.ndarray) -> np.ndarray:
        lo, hi = self._range(channel)
        if hi == lo:
            raise FrameError(f"{channel}: cannot invert a constant-channel fit")
        u = (np.asarray(x, dtype=np.float64) - self.a1) / (self.a2 - self.a1)
        return lo * (1.0 - u) + hi * u

    def _range(self, channel):
        try:
            return self.ranges[channel]
        except KeyError:
            raise FrameError(f"channel {channel} not covered by normalizer") from None

    def to_dict(self) -> dict:
        return {
            "a1": self.a1,
            "a2": self.a2,
            "source": self.source,
            "ranges": {k: list(v) for k, v in self.ranges.items()},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "NormalizationSpec":
        return cls(
            {k: tuple(v) for k, v in d["ranges"].items()},
            d["a1"],
            d["a2"],
            d.get("source", ""),
        )
