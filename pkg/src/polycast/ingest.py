"""Frame CSV reading/writing and the validation report."""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .core import (
    ChannelSpec,
    FrameError,
    TimeSeriesFrame,
    format_timestamp,
    resolution_seconds,
)

log = logging.getLogger(__name__)


class SchemaError(FrameError):
    """CSV content does not match the frame schema."""


@dataclass(frozen=True)
class ValidationIssue:
    row: int
    channel: str
    issue: str


def _parse_timestamp(text: str, lineno: int) -> np.datetime64:
    raw = text.strip()
    if raw.endswith("Z"):
        raw = raw[:-1]
    elif raw.endswith("+00:00"):
        raw = raw[:-6]
    try:
        return np.datetime64(raw, "s")
    except ValueError:
        raise SchemaError(f"line {lineno}: unparsable timestamp {text!r}") from None


def read_raw_csv(path, registry: Mapping[str, ChannelSpec]):
    """
    Parse a frame CSV without checking spacing.

    Returns ``(timestamps, channels, values)``; used directly for jittered raw
    logger exports that still need snapping to a grid.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: missing header row") from None
        if not header or header[0].strip() != "timestamp":
            raise SchemaError(f"{path}: first column must be 'timestamp'")
        names = [h.strip() for h in header[1:]]
        if len(set(names)) != len(names):
            raise SchemaError(f"{path}: duplicate column in header")
        unknown = [n for n in names if n not in registry]
        if unknown:
            raise SchemaError(f"{path}: unknown column(s): {', '.join(unknown)}")
        channels = [registry[n] for n in names]
        stamps, rows = [], []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise SchemaError(
                    f"{path} line {lineno}: expected {len(header)} fields, got {len(rec)}"
                )
            stamps.append(_parse_timestamp(rec[0], lineno))
            row = []
            for name, cell in zip(names, rec[1:]):
                cell = cell.strip()
                if cell == "":
                    row.append(np.nan)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise SchemaError(
                        f"{path} line {lineno}: non-numeric cell {cell!r} in {name}"
                    ) from None
                if np.isnan(v):
                    raise SchemaError(
                        f"{path} line {lineno}: NaN literal in {name}; leave the cell empty"
                    )
                row.append(v)
            rows.append(row)
    ts = np.array(stamps, dtype="datetime64[s]")
    vals = np.array(rows, dtype=np.float64).reshape(len(rows), len(names))
    return ts, channels, vals


def read_frame_with_report(
    path,
    registry: Mapping[str, ChannelSpec],
    site: str,
    season: int,
    resolution: str,
) -> tuple[TimeSeriesFrame, list[ValidationIssue]]:
    """Read a frame; out-of-range cells become missing and are reported."""
    ts, channels, vals = read_raw_csv(path, registry)
    if len(ts) > 1:
        d = np.diff(ts.astype(np.int64))
        if np.any(d == 0):
            i = int(np.argmax(d == 0)) + 1
            raise SchemaError(f"{path}: duplicate timestamp {format_timestamp(ts[i])}")
        if np.any(d < 0):
            raise SchemaError(f"{path}: rows not sorted by timestamp")
        if np.any(d != resolution_seconds(resolution)):
            raise SchemaError(
                f"{path}: irregular timestamp spacing for resolution {resolution}"
            )
    issues = []
    vals = np.array(vals, copy=True)
    for j, spec in enumerate(channels):
        bad = spec.in_range(vals[:, j])
        for r in np.flatnonzero(bad):
            issues.append(
                ValidationIssue(
                    int(r),
                    spec.acronym,
                    f"out of range {spec.valid_range}: {vals[r, j]!r}",
                )
            )
        vals[bad, j] = np.nan
    if issues:
        msg = f"{path}: {len(issues)} out-of-range cell(s) set missing"
        warnings.warn(msg, stacklevel=2)
        log.warning(msg)
    return TimeSeriesFrame(site, season, resolution, ts, channels, vals), issues


def read_frame(path, registry, site, season, resolution) -> TimeSeriesFrame:
    frame, _ = read_frame_with_report(path, registry, site, season, resolution)
    return frame


def _cell(v: float) -> str:
    return "" if np.isnan(v) else repr(float(v))


def write_frame(frame: TimeSeriesFrame, path) -> None:
    """Write ``frame`` so that reading it back gives an identical frame."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["timestamp", *frame.acronyms])
            for t, row in zip(frame.timestamps, frame.values.tolist()):
                w.writerow([format_timestamp(t), *map(_cell, row)])
    except OSError as exc:
        raise FrameError(f"cannot write {path}: {exc}") from exc


def write_validation_report(issues: Iterable[ValidationIssue], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "channel", "issue"])
        for i in issues:
            w.writerow([i.row, i.channel, i.issue])
