"""
Stage orchestration: preprocessing, water-usage imputation, correlation
analysis, backcast training and selection, synthetic-season generation and
the yield-forecasting matrix.

Every stage is a function of the config and the previous stages' in-memory
results, never of files left in the output directory by an earlier run.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import __version__
from .config import FEATURE_SETS, PipelineConfig, parse_group
from .core import (
    ChannelRegistry,
    FrameError,
    InvariantViolation,
    PolycastError,
    TimeSeriesFrame,
    format_timestamp,
    join_frames,
    on_boundary,
    resolution_seconds,
    validate_frame,
)
from .correlate import correlation_matrix, select_by_target_correlation
from .ensemble import fit_variant, predict, save_model
from .evaluate import (
    REAL_ONLY,
    EvalReport,
    EvalRow,
    annotate_improvements,
    mae,
    rmse,
    select_best_per_target,
)
from .ingest import read_frame_with_report, write_frame, write_validation_report
from .preprocess import (
    fill_from_paired_site,
    fill_locf,
    merge_redundant_pair,
    one_hot_site,
    resample,
    site_channel,
    write_gap_report,
)
from .windowing import (
    WindowedDataset,
    backcast_features,
    build_backcast_windows,
    build_yield_windows,
    concat_datasets,
    fit_dataset_normalizer,
    normalize_dataset,
    normalize_matrix,
    split_leave_group_out,
    split_ratio,
)

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


class StageError(PolycastError):
    """A stage failed; ``stage`` names it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


def derive_seed(root: int, *labels) -> int:
    """Stable 31-bit seed for a labelled sub-task."""
    text = json.dumps([int(root), *[str(x) for x in labels]], separators=(",", ":"))
    return zlib.crc32(text.encode()) & 0x7FFFFFFF


def _key(site: str, season: int) -> str:
    return f"{site}:{season}"


def _map(fn: Callable, items: Sequence, threads: int) -> list:
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _fmt(v) -> str:
    return "" if v is None or (isinstance(v, float) and np.isnan(v)) else repr(float(v))


class RunContext:
    """Output directory, counters and seed registry shared by the stages."""

    def __init__(self, config: PipelineConfig, out_dir=None, threads: int = 1):
        self.config = config
        self.out = None if out_dir is None else Path(out_dir)
        self.threads = max(1, int(threads))
        self.counts: dict[str, int] = {}
        self.seeds: dict[str, int] = {}
        self.outputs: list[str] = []
        self.registry = ChannelRegistry()

    def seed(self, *labels) -> int:
        s = derive_seed(self.config.seed, *labels)
        self.seeds["/".join(str(x) for x in labels)] = s
        return s

    def count(self, name: str, value: int) -> None:
        self.counts[name] = int(value)

    def path(self, rel: str) -> Path | None:
        if self.out is None:
            return None
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(rel)
        return p


# ---------------------------------------------------------------- preprocess


@dataclass
class Prepared:
    """Hourly analysis frames (sensors joined with weather) per real group."""

    frames: dict[tuple[str, int], TimeSeriesFrame]
    weather: dict[int, TimeSeriesFrame]
    imputed: dict[tuple[str, int], np.ndarray] = field(default_factory=dict)
    impute_report: EvalReport | None = None


def load_weather(ctx: RunContext, season: int) -> TimeSeriesFrame:
    cfg = ctx.config
    path = cfg.weather.get(str(season))
    if path is None:
        raise FrameError(f"no weather file for season {season}")
    frame, issues = read_frame_with_report(cfg.path(path), ctx.registry, "MO", season, "hourly")
    ctx.count(f"weather/{season}/rows", len(frame))
    ctx.count(f"weather/{season}/out_of_range", len(issues))
    return frame


def preprocess(ctx: RunContext) -> Prepared:
    cfg = ctx.config
    weather = {}
    raw = {}
    issues_all = []
    for site, season in cfg.real_groups:
        if season not in weather:
            weather[season] = load_weather(ctx, season)
        frame, issues = read_frame_with_report(
            cfg.path(cfg.sensors[_key(site, season)]), ctx.registry, site, season,
            cfg.sensor_resolution,
        )
        issues_all += [(site, season, i) for i in issues]
        if frame.resolution != "hourly":
            frame = resample(frame, "hourly")
        raw[(site, season)] = frame
    for fill in cfg.preprocess.paired_fill:
        for (site, season), frame in list(raw.items()):
            if site != fill.site:
                continue
            donor = raw.get((fill.donor, season))
            if donor is None:
                raise FrameError(f"paired fill: no donor frame {fill.donor}:{season}")
            raw[(site, season)], copied = fill_from_paired_site(frame, fill.channel, donor)
            ctx.count(f"preprocess/{site}:{season}/paired_fill/{fill.channel}", copied)
    gaps = []
    frames = {}
    for (site, season), frame in raw.items():
        for m in cfg.preprocess.merges:
            frame = merge_redundant_pair(frame, m.a, m.b, m.out)
        frame, report = fill_locf(frame, max_gap=cfg.preprocess.max_gap)
        gaps += [(site, season, r) for r in report]
        joined = validate_frame(join_frames([frame, weather[season].relabel(site=site)]))
        frames[(site, season)] = joined
        ctx.count(f"preprocess/{site}:{season}/rows", len(joined))
    prepared = Prepared(frames, weather)
    if cfg.impute_water_usage.enabled:
        run_imputation(ctx, prepared)
    if ctx.out is not None:
        keyed = [
            type(r)(f"{s}:{y}:{r.channel}", r.start, r.end, r.length, r.action)
            for s, y, r in gaps
        ]
        write_gap_report(keyed, ctx.path("preprocess/gap_report.csv"))
        write_validation_report(
            [type(i)(i.row, f"{s}:{y}:{i.channel}", i.issue) for s, y, i in issues_all],
            ctx.path("preprocess/validation_report.csv"),
        )
        for (site, season), frame in sorted(prepared.frames.items()):
            write_frame(frame, ctx.path(f"preprocess/{site}_{season}.csv"))
    return prepared


# ------------------------------------------------------------ WU imputation


@dataclass
class ImputeResult:
    frames: list[TimeSeriesFrame]
    imputed: list[np.ndarray]
    report: EvalReport
    winner: str | None


def impute_water_usage(
    frames: TimeSeriesFrame | Sequence[TimeSeriesFrame],
    predictors: Sequence[str] | None = None,
    learners: Mapping[str, Mapping] | None = None,
    *,
    channel: str = "WU",
    models: Sequence[str] = ("rf", "gbdt", "xgb"),
    train_fraction: float = 0.85,
    seed: int = 0,
    site: str | None = None,
    normalization=(-1.0, 1.0),
    threads: int = 1,
) -> ImputeResult:
    """
    Fill missing ``channel`` cells from same-timestamp predictors.

    Candidate learners train on the observed rows of all given frames
    (pooled) and the lowest test RMSE wins. Only missing cells change; the
    returned masks flag them. Frames without gaps are returned unchanged.
    """
    from .config import _default_backcast_learners

    frames = [frames] if isinstance(frames, TimeSeriesFrame) else list(frames)
    learners = dict(learners or _default_backcast_learners())
    site = site or frames[0].site
    if predictors is None:
        predictors = [
            ch for ch in frames[0].acronyms
            if ch != channel and frames[0].channel(ch).kind in ("sensor", "weather")
        ]
    predictors = tuple(predictors)
    missing = [np.isnan(f.column(channel)) for f in frames]
    if not any(m.any() for m in missing):
        return ImputeResult(frames, missing, EvalReport([], "impute"), None)
    X_parts, y_parts, groups = [], [], []
    for f in frames:
        X = np.column_stack([f.column(p) for p in predictors])
        y = f.column(channel)
        ok = ~(np.isnan(y) | np.isnan(X).any(axis=1))
        X_parts.append(X[ok])
        y_parts.append(y[ok])
        groups.append(f.season)
    X = np.vstack(X_parts)
    y = np.concatenate(y_parts)
    if len(y) == 0:
        raise FrameError(f"no observed {channel} rows to learn from")
    n = len(y)
    ds = WindowedDataset(
        X, y, predictors, channel,
        np.array([site] * n, dtype=object), np.zeros(n, dtype=np.int64),
        np.zeros(n, dtype="datetime64[s]"), np.zeros(n, dtype=bool),
    )
    train, test = split_ratio(ds, train_fraction, seed=seed)
    spec = fit_dataset_normalizer(train, *normalization, source=f"impute/{site}")
    train_n, test_n = normalize_dataset(spec, train), normalize_dataset(spec, test)

    def fit_one(model):
        params = dict(learners.get(model, {}))
        fitted = fit_variant(
            model, train_n.X, train_n.y, params, derive_seed(seed, model), predictors
        )
        pred = predict(fitted, test_n.X)
        return fitted, EvalRow(
            model, site, channel, REAL_ONLY, rmse(pred, test.y), mae(pred, test.y), len(test)
        )

    results = _map(fit_one, list(models), threads)
    report = EvalReport([row for _, row in results], "impute")
    winner = select_best_per_target(report, candidates=tuple(models))[(site, channel)]
    model = dict(zip(models, [m for m, _ in results]))[winner]
    out_frames = []
    for f, miss in zip(frames, missing):
        if not miss.any():
            out_frames.append(f)
            continue
        Xg = np.column_stack([f.column(p) for p in predictors])[miss]
        if np.isnan(Xg).any():
            raise FrameError(
                f"{f.site}/{f.season}: predictors missing over {channel} gaps"
            )
        col = np.array(f.column(channel), copy=True)
        col[miss] = predict(model, normalize_matrix(spec, Xg, predictors))
        out_frames.append(f.with_column(channel, col))
    return ImputeResult(out_frames, missing, report, winner)


def run_imputation(ctx: RunContext, prepared: Prepared) -> None:
    cfg = ctx.config.impute_water_usage
    ch = cfg.site_channel
    rows = []
    for site in ctx.config.sites:
        keys = sorted(k for k in prepared.frames if k[0] == site)
        frames = [prepared.frames[k] for k in keys]
        if not frames or not any(f.has(ch) for f in frames):
            continue
        result = impute_water_usage(
            frames, cfg.predictors, cfg.learners.model_dump(), channel=ch,
            train_fraction=cfg.train_fraction, seed=ctx.seed("impute", site),
            site=site, normalization=(ctx.config.normalization.a1, ctx.config.normalization.a2),
            threads=ctx.threads,
        )
        for k, f, m in zip(keys, result.frames, result.imputed):
            prepared.frames[k] = validate_frame(f)
            prepared.imputed[k] = m
            ctx.count(f"impute/{k[0]}:{k[1]}/filled", int(m.sum()))
        rows += result.report.rows
    prepared.impute_report = EvalReport(rows, "impute")
    if ctx.out is not None:
        prepared.impute_report.to_csv(ctx.path("impute/report.csv"))
        with ctx.path("impute/imputed_cells.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["site", "season", "timestamp", "channel"])
            for (site, season), mask in sorted(prepared.imputed.items()):
                ts = prepared.frames[(site, season)].timestamps
                for i in np.flatnonzero(mask):
                    w.writerow([site, season, format_timestamp(ts[i]), ch])


# -------------------------------------------------------------- correlation


def run_correlation(ctx: RunContext, prepared: Prepared) -> dict:
    out = {}
    for site in ctx.config.sites:
        frames = [f for (s, _), f in sorted(prepared.frames.items()) if s == site]
        if not frames:
            continue
        chans = [c for c in frames[0].acronyms if frames[0].channel(c).kind != "encoded"]
        m = correlation_matrix(frames, chans)
        out[site] = m
        if ctx.out is not None:
            m.to_square_csv(ctx.path(f"correlate/hourly_{site}.csv"))
            m.to_long_csv(ctx.path(f"correlate/hourly_{site}_long.csv"))
    return out


def run_weekly_correlation(ctx: RunContext, weekly: Mapping) -> dict:
    out = {}
    for site in ctx.config.sites:
        frames = [f for (s, _), f in sorted(weekly.items()) if s == site]
        if not frames:
            continue
        chans = [c for c in frames[0].acronyms if frames[0].channel(c).kind != "encoded"]
        m = correlation_matrix(frames, chans)
        out[site] = m
        if ctx.out is not None:
            m.to_square_csv(ctx.path(f"correlate/weekly_{site}.csv"))
            m.to_long_csv(ctx.path(f"correlate/weekly_{site}_long.csv"))
            if "Yield" in m.channels:
                picked = select_by_target_correlation(m, "Yield", "moderate")
                ctx.path(f"correlate/yield_selection_{site}.txt").write_text(
                    "".join(f"{c}\n" for c in picked)
                )
    return out


# ----------------------------------------------------------------- backcast


@dataclass
class BackcastResult:
    report: EvalReport
    winners: dict[tuple[str, str], str]
    models: dict[tuple[str, str, str], object]
    normalizers: dict[tuple[str, str], object]
    test_sets: dict[tuple[str, str], WindowedDataset]
    predictions: dict[tuple[str, str, str], np.ndarray]


def backcast_datasets(ctx: RunContext, prepared: Prepared, site: str) -> dict[str, WindowedDataset]:
    cfg = ctx.config.backcast
    per_target: dict[str, list[WindowedDataset]] = {t: [] for t in cfg.targets}
    keys = sorted(k for k in prepared.frames if k[0] == site)
    for k in keys:
        ds = build_backcast_windows(
            prepared.frames[k], cfg.exogenous, cfg.targets, cfg.window, cfg.offset_base
        )
        for t in cfg.targets:
            per_target[t].append(ds[t])
    out = {}
    for t, parts in per_target.items():
        ds = concat_datasets(parts)
        if len(ds) == 0:
            raise FrameError(f"{site}/{t}: no complete backcast windows")
        out[t] = ds
    return out


def run_backcast_training(ctx: RunContext, prepared: Prepared) -> BackcastResult:
    """Per (site, target): 85/15 split, fit every candidate, select by test RMSE."""
    cfg = ctx.config.backcast
    norm = ctx.config.normalization
    learners = cfg.learners.model_dump()
    cells = []
    splits = {}
    for site in ctx.config.sites:
        if not any(k[0] == site for k in prepared.frames):
            continue
        for t, ds in backcast_datasets(ctx, prepared, site).items():
            train, test = split_ratio(ds, cfg.train_fraction, seed=ctx.seed("split", site, t))
            spec = fit_dataset_normalizer(train, norm.a1, norm.a2, source=f"backcast/{site}/{t}")
            splits[(site, t)] = (train, test, spec)
            ctx.count(f"backcast/{site}/{t}/train", len(train))
            ctx.count(f"backcast/{site}/{t}/test", len(test))
            ctx.count(f"backcast/{site}/{t}/dropped", ds.dropped)
            for m in cfg.models:
                cells.append((site, t, m, ctx.seed("backcast", site, t, m)))

    def fit_cell(cell):
        site, t, model, seed = cell
        train, test, spec = splits[(site, t)]
        fitted = fit_variant(
            model, normalize_dataset(spec, train).X, train.y, learners[model], seed,
            train.feature_names,
        )
        pred = predict(fitted, normalize_dataset(spec, test).X)
        return fitted, pred

    fitted = _map(fit_cell, cells, ctx.threads)
    report = EvalReport([], "backcast")
    models, predictions = {}, {}
    for (site, t, m, _), (model, pred) in zip(cells, fitted):
        test = splits[(site, t)][1]
        report.add(EvalRow(m, site, t, REAL_ONLY, rmse(pred, test.y), mae(pred, test.y), len(test)))
        models[(site, t, m)] = model
        predictions[(site, t, m)] = pred
    report.check()
    selection = select_best_per_target(report, candidates=tuple(cfg.models))
    winners = {k: v for k, v in selection.winners.items()}
    result = BackcastResult(
        report, winners, models,
        {k: v[2] for k, v in splits.items()},
        {k: v[1] for k, v in splits.items()},
        predictions,
    )
    if ctx.out is not None:
        _write_backcast(ctx, result, selection)
    return result


def _write_backcast(ctx: RunContext, result: BackcastResult, selection) -> None:
    cfg = ctx.config.backcast
    result.report.to_csv(ctx.path("backcast/report.csv"))
    ctx.path("backcast/summary.txt").write_text(result.report.summary())
    with ctx.path("backcast/selection.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["site", "target", "model", "tied_with"])
        for (site, t), m in sorted(result.winners.items()):
            w.writerow([site, t, m, "|".join(selection.ties.get((site, t), ()))])
    for (site, t), test in sorted(result.test_sets.items()):
        order = np.argsort(test.anchors, kind="stable")
        with ctx.path(f"backcast/plot/{site}_{t}.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["timestamp", "actual", *cfg.models])
            for i in order:
                w.writerow(
                    [format_timestamp(test.anchors[i]), _fmt(test.y[i])]
                    + [_fmt(result.predictions[(site, t, m)][i]) for m in cfg.models]
                )
        ctx.path(f"backcast/normalizers/{site}_{t}.json").write_text(
            json.dumps(result.normalizers[(site, t)].to_dict(), indent=1, sort_keys=True) + "\n"
        )
    for (site, t, m), model in sorted(result.models.items()):
        save_model(model, ctx.path(f"backcast/models/{site}_{t}_{m}.json"))


# --------------------------------------------------------------- synthesis


@dataclass
class SyntheticFrameSet:
    """Generated hourly sensor frames per (site, season), all channels flagged synthetic."""

    frames: dict[tuple[str, int], TimeSeriesFrame] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)
    missing: dict[tuple[str, int, str], int] = field(default_factory=dict)

    def __post_init__(self):
        for key, f in self.frames.items():
            if any(c.kind == "yield" for c in f.channels):
                raise InvariantViolation(f"synthetic frame {key} contains a yield channel")
            if not all(c.synthetic for c in f.channels):
                raise InvariantViolation(f"synthetic frame {key} has unflagged channels")


def generate_synthetic_seasons(
    backcast: BackcastResult,
    weather: Mapping[tuple[str, int], TimeSeriesFrame],
    exogenous: Sequence[str],
    window: int = 6,
    offset_base: str = "anchor",
    registry: ChannelRegistry | None = None,
    seed: int = 0,
) -> SyntheticFrameSet:
    """
    Drive each site's winning backcast models with the weather of seasons
    that have no sensors. Anchors without a complete weather window stay
    missing and are counted in ``missing``.
    """
    registry = registry or ChannelRegistry()
    out = SyntheticFrameSet(provenance={"window": window, "offset_base": offset_base, "seed": seed, "models": {}})
    for (site, season), w in sorted(weather.items()):
        absent = [c for c in exogenous if not w.has(c)]
        if absent:
            raise FrameError(f"weather for {site}/{season} lacks {absent}")
        X, names, valid = backcast_features(w, exogenous, window, offset_base)
        targets = sorted({t for s, t in backcast.winners if s == site})
        if not targets:
            raise FrameError(f"no backcast models for site {site}")
        cols, specs = [], []
        for t in targets:
            model_id = backcast.winners[(site, t)]
            model = backcast.models[(site, t, model_id)]
            spec = backcast.normalizers[(site, t)]
            col = np.full(len(w), np.nan)
            if valid.any():
                col[valid] = predict(model, normalize_matrix(spec, X[valid], names), names)
            cols.append(col)
            specs.append(_synthetic_spec(registry, t))
            out.missing[(site, season, t)] = int((~valid).sum())
            out.provenance["models"][f"{site}:{t}"] = model_id
        frame = TimeSeriesFrame(site, season, "hourly", w.timestamps, specs, np.column_stack(cols))
        out.frames[(site, season)] = frame
    out.__post_init__()
    return out


def _synthetic_spec(registry, channel):
    # predictions of a bounded sensor may overshoot its physical range slightly
    return replace(registry[channel], synthetic=True, valid_range=None)


def run_synthesis(ctx: RunContext, prepared: Prepared, backcast: BackcastResult) -> SyntheticFrameSet:
    cfg = ctx.config
    weather = {}
    for site, season in cfg.historical_groups:
        if season not in prepared.weather:
            prepared.weather[season] = load_weather(ctx, season)
        weather[(site, season)] = prepared.weather[season].relabel(site=site)
    syn = generate_synthetic_seasons(
        backcast, weather, cfg.backcast.exogenous, cfg.backcast.window,
        cfg.backcast.offset_base, ctx.registry, cfg.seed,
    )
    for (site, season), f in syn.frames.items():
        ctx.count(f"synthetic/{site}:{season}/rows", len(f))
    for (site, season, t), k in syn.missing.items():
        ctx.count(f"synthetic/{site}:{season}/{t}/missing", k)
    if ctx.out is not None:
        for (site, season), f in sorted(syn.frames.items()):
            write_frame(f, ctx.path(f"synthetic/{site}_{season}.csv"))
        with ctx.path("synthetic/missing_report.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["site", "season", "channel", "trailing_missing"])
            for (site, season, t), k in sorted(syn.missing.items()):
                w.writerow([site, season, t, k])
        ctx.path("synthetic/provenance.json").write_text(
            json.dumps(syn.provenance, indent=1, sort_keys=True) + "\n"
        )
    return syn


# ------------------------------------------------------------- yield matrix


@dataclass
class YieldResult:
    report: EvalReport
    sizes: dict[tuple[str, str], dict[str, int]]
    datasets: dict[tuple[str, str], tuple[WindowedDataset, WindowedDataset]]


def _feature_channels(cfg: PipelineConfig, feature_set: str):
    env = []
    if "sensor" in feature_set:
        env += list(cfg.yield_experiment.pruned_sensors)
    if "MO" in feature_set:
        env += list(cfg.backcast.exogenous)
    static = []
    if cfg.yield_experiment.site_onehot and feature_set != "yield-only":
        static = [site_channel(s) for s in cfg.sites]
    return env, static


def whole_weeks(frame: TimeSeriesFrame) -> TimeSeriesFrame:
    """Trim to the complete Monday-aligned weeks the frame covers."""
    per_week = resolution_seconds("weekly") // resolution_seconds(frame.resolution)
    start = np.flatnonzero(on_boundary(frame.timestamps, "weekly"))
    if start.size == 0:
        raise FrameError(f"{frame.site}/{frame.season}: no week boundary in frame")
    i0 = int(start[0])
    n = (len(frame) - i0) // per_week * per_week
    if n == 0:
        raise FrameError(f"{frame.site}/{frame.season}: less than one whole week")
    if i0 == 0 and n == len(frame):
        return frame
    return frame.with_values(
        frame.values[i0 : i0 + n], timestamps=frame.timestamps[i0 : i0 + n]
    )


def weekly_frames(
    ctx: RunContext, prepared: Prepared, synthetic: SyntheticFrameSet | None
) -> tuple[dict[tuple[str, int], TimeSeriesFrame], set[tuple[str, int]]]:
    """
    Weekly (site, season) frames holding yield, weather, pruned sensors and
    the site one-hot. Returns the frames and the set of synthetic-sensor groups.
    """
    cfg = ctx.config
    sensors = list(cfg.yield_experiment.pruned_sensors)
    out, synthetic_groups = {}, set()
    groups = sorted(parse_group(k) for k in cfg.yield_)
    for site, season in groups:
        daily, _ = read_frame_with_report(
            cfg.path(cfg.yield_[_key(site, season)]), ctx.registry, site, season, "daily"
        )
        weekly_yield = resample(whole_weeks(daily), "weekly")
        if (site, season) in prepared.frames:
            hourly = prepared.frames[(site, season)]
            env = hourly.select(sensors + list(cfg.backcast.exogenous))
        elif synthetic is not None and (site, season) in synthetic.frames:
            syn = synthetic.frames[(site, season)]
            if season not in prepared.weather:
                prepared.weather[season] = load_weather(ctx, season)
            w = prepared.weather[season]
            env = join_frames([syn.select(sensors), w.relabel(site=site)])
            synthetic_groups.add((site, season))
        else:
            continue
        weekly_env = resample(whole_weeks(env.relabel(site=site)), "weekly")
        frame = join_frames([weekly_yield, weekly_env])
        if cfg.yield_experiment.site_onehot:
            frame = one_hot_site(frame, cfg.sites)
        out[(site, season)] = validate_frame(frame)
        ctx.count(f"weekly/{site}:{season}/rows", len(frame))
    return out, synthetic_groups


def run_yield_experiment(
    ctx: RunContext,
    weekly: Mapping[tuple[str, int], TimeSeriesFrame],
    synthetic_groups: set,
    feature_sets: Sequence[str] | None = None,
    data_modes: Sequence[str] | None = None,
    held_out: Sequence[tuple[str, int]] | None = None,
) -> YieldResult:
    """
    The (model x feature set x data mode) matrix with leave-group-out
    evaluation on real groups only.
    """
    cfg = ctx.config
    ycfg = cfg.yield_experiment
    feature_sets = list(feature_sets or ycfg.feature_sets)
    data_modes = list(data_modes or ycfg.data_modes)
    held = [tuple(h) for h in (held_out if held_out is not None else ycfg.held_out)]
    if not held:
        raise FrameError("the yield experiment needs at least one held-out group")
    real = set(cfg.real_groups)
    for g in held:
        if g not in real or g not in weekly:
            raise FrameError(f"held-out group {g[0]}:{g[1]} is not a real weekly group")
    learners = ycfg.learners.model_dump()
    norm = cfg.normalization
    cells, prepared_sets, sizes = [], {}, {}
    for fs in feature_sets:
        env, static = _feature_channels(cfg, fs)
        for mode in data_modes:
            groups = [g for g in sorted(weekly) if g in real]
            if mode == "syn+real":
                groups += [g for g in sorted(weekly) if g not in real]
            parts = [build_yield_windows(weekly[g], env, static) for g in groups]
            pool = concat_datasets(parts)
            train, test = split_leave_group_out(pool, held)
            prov_real = np.array([g in real for g in test.groups], dtype=bool)
            if not prov_real.all() or test.synthetic.any():
                raise InvariantViolation("yield test rows must be real-provenance only")
            n_syn = sum(len(p) for g, p in zip(groups, parts) if g not in real)
            sizes[(fs, mode)] = {
                "pool": len(pool), "train": len(train), "test": len(test),
                "augmented_windows": n_syn,
            }
            ctx.count(f"yield/{fs}/{mode}/train", len(train))
            ctx.count(f"yield/{fs}/{mode}/test", len(test))
            ctx.count(f"yield/{fs}/{mode}/augmented_windows", n_syn)
            spec = fit_dataset_normalizer(train, norm.a1, norm.a2, source=f"yield/{fs}/{mode}")
            prepared_sets[(fs, mode)] = (train, test, spec)
            for m in ycfg.models:
                cells.append((fs, mode, m, ctx.seed("yield", m)))

    def fit_cell(cell):
        fs, mode, model, seed = cell
        train, test, spec = prepared_sets[(fs, mode)]
        fitted = fit_variant(
            model, normalize_dataset(spec, train).X, train.y, learners[model], seed,
            train.feature_names,
        )
        return predict(fitted, normalize_dataset(spec, test).X)

    preds = _map(fit_cell, cells, ctx.threads)
    report = EvalReport([], "yield")
    site_label = "+".join(f"{s}:{y}" for s, y in sorted(held))
    for (fs, mode, m, _), pred in zip(cells, preds):
        test = prepared_sets[(fs, mode)][1]
        report.add(EvalRow(m, site_label, fs, mode, rmse(pred, test.y), mae(pred, test.y), len(test)))
    report = annotate_improvements(report)
    return YieldResult(report, sizes, {k: v[:2] for k, v in prepared_sets.items()})


def write_yield_outputs(ctx: RunContext, result: YieldResult, prefix: str = "forecast") -> None:
    if ctx.out is None:
        return
    result.report.to_csv(ctx.path(f"{prefix}/report.csv"))
    ctx.path(f"{prefix}/summary.txt").write_text(result.report.summary())
    with ctx.path(f"{prefix}/sizes.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature_set", "data_mode", "pool", "train", "test", "augmented_windows"])
        for (fs, mode), s in sorted(result.sizes.items()):
            w.writerow([fs, mode, s["pool"], s["train"], s["test"], s["augmented_windows"]])


# ------------------------------------------------------------------ driver


def _versions() -> dict:
    return {
        "polycast": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
    }


def write_manifest(ctx: RunContext, status: str, stages: Iterable[str], error: str | None = None):
    if ctx.out is None:
        return
    ctx.out.mkdir(parents=True, exist_ok=True)
    inventory = {}
    for rel in sorted(set(ctx.outputs)):
        p = ctx.out / rel
        if p.is_file():
            inventory[rel] = hashlib.sha256(p.read_bytes()).hexdigest()
    doc = {
        "format": "polycast-manifest",
        "status": status,
        "config_sha256": ctx.config.digest(),
        "config": ctx.config.canonical(),
        "versions": _versions(),
        "stages": list(stages),
        "seeds": dict(sorted(ctx.seeds.items())),
        "counts": dict(sorted(ctx.counts.items())),
        "outputs": inventory,
    }
    if error is not None:
        doc["error"] = error
    (ctx.out / MANIFEST).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


STAGES = ("preprocess", "correlate", "backcast", "synthesize", "forecast")


@dataclass
class RunResult:
    prepared: Prepared | None = None
    backcast: BackcastResult | None = None
    synthetic: SyntheticFrameSet | None = None
    weekly: dict | None = None
    yield_result: YieldResult | None = None


def run_stages(
    ctx: RunContext,
    until: str = "forecast",
    feature_sets: Sequence[str] | None = None,
    data_modes: Sequence[str] | None = None,
    held_out: Sequence[tuple[str, int]] | None = None,
) -> RunResult:
    """
    Run the stage chain up to and including ``until`` and write the manifest
    (first as incomplete, finally as complete).
    """
    if until not in STAGES:
        raise FrameError(f"unknown stage {until!r}")
    chain = STAGES[: STAGES.index(until) + 1]
    write_manifest(ctx, "incomplete", chain)
    res = RunResult()
    stage = "preprocess"
    try:
        res.prepared = preprocess(ctx)
        if "correlate" in chain:
            stage = "correlate"
            run_correlation(ctx, res.prepared)
        if "backcast" in chain:
            stage = "backcast"
            res.backcast = run_backcast_training(ctx, res.prepared)
        if "synthesize" in chain:
            stage = "synthesize"
            res.synthetic = run_synthesis(ctx, res.prepared, res.backcast)
        if "forecast" in chain:
            stage = "forecast"
            res.weekly, syn_groups = weekly_frames(ctx, res.prepared, res.synthetic)
            run_weekly_correlation(ctx, res.weekly)
            res.yield_result = run_yield_experiment(
                ctx, res.weekly, syn_groups, feature_sets, data_modes, held_out
            )
            _check_accounting(ctx, res)
            write_yield_outputs(ctx, res.yield_result)
    except (PolycastError, OSError) as exc:
        write_manifest(ctx, "incomplete", chain, error=f"[{stage}] {exc}")
        if isinstance(exc, (StageError,)):
            raise
        raise StageError(stage, exc) from exc
    write_manifest(ctx, "complete", chain)
    return res


def _check_accounting(ctx: RunContext, res: RunResult) -> None:
    sizes = res.yield_result.sizes
    for (fs, mode), s in sizes.items():
        if mode != "syn+real" or (fs, "real-only") not in sizes:
            continue
        real = sizes[(fs, "real-only")]
        if s["train"] != real["train"] + s["augmented_windows"]:
            raise InvariantViolation(
                f"{fs}: syn+real train {s['train']} != real {real['train']} + "
                f"synthetic {s['augmented_windows']}"
            )
        if s["test"] != real["test"]:
            raise InvariantViolation(f"{fs}: augmentation changed the test set")


def run_full(config: PipelineConfig, out_dir=None, threads: int = 1) -> RunResult:
    """preprocess, correlate, backcast, synthesize, then the yield matrix."""
    return run_stages(RunContext(config, out_dir, threads), "forecast")
