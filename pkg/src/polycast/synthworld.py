"""
Seeded generator of weather, in-tunnel sensor and yield series whose
relationships are known exactly.

In ``tree`` mode the weather is quantized (MET, MEH and Pre to integers, Rad
to multiples of 100) and every sensor is a monotone step function of one
weather channel at a fixed forward offset, with breakpoints on half-grid
values. Tree learners can represent such responses exactly, which makes the
backcast stage verifiable to rounding error. ``smooth`` mode uses linear
responses on unquantized weather instead.
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import DEFAULT_CHANNELS, ChannelRegistry, FrameError, TimeSeriesFrame

MODES = ("tree", "smooth")
WEATHER_CHANNELS = ("MET", "Vis", "Pre", "MEH", "Rad", "WS", "WD", "WG", "RFA")
YIELD_CLIP = (0.0, 1.2)


@dataclass(frozen=True)
class StepResponse:
    """``channel[t] = levels[i]`` where ``i`` counts breakpoints below ``source[t + offset]``."""

    channel: str
    source: str
    offset: int
    breakpoints: tuple[float, ...]
    levels: tuple[float, ...]

    def __post_init__(self):
        if len(self.levels) != len(self.breakpoints) + 1:
            raise FrameError(f"{self.channel}: need one more level than breakpoints")
        if any(b >= c for b, c in zip(self.breakpoints, self.breakpoints[1:])):
            raise FrameError(f"{self.channel}: breakpoints must be strictly increasing")
        if self.offset < 0:
            raise FrameError(f"{self.channel}: offset must be >= 0")

    def step(self, x: np.ndarray, shift: float = 0.0) -> np.ndarray:
        idx = np.searchsorted(np.asarray(self.breakpoints), x, side="right")
        return np.asarray(self.levels, dtype=np.float64)[idx] + shift

    def linear(self, x: np.ndarray, shift: float = 0.0) -> np.ndarray:
        # straight line through the outer breakpoints' levels
        b0, b1 = self.breakpoints[0], self.breakpoints[-1]
        l0, l1 = self.levels[0], self.levels[-1]
        if b1 == b0:
            slope = (l1 - l0) / 10.0
        else:
            slope = (l1 - l0) / (b1 - b0)
        return l0 + slope * (x - b0) + shift


DEFAULT_RESPONSES: tuple[StepResponse, ...] = (
    StepResponse("WU", "Rad", 0, (350.0, 1250.0), (3.0, 9.0, 15.0)),
    StepResponse("IT", "MET", 0, (5.5, 10.5, 15.5, 20.5), (7.0, 11.0, 15.5, 20.0, 26.0)),
    StepResponse("IH", "MEH", 0, (55.5, 65.5, 75.5, 85.5), (52.0, 61.0, 70.0, 79.0, 88.0)),
    StepResponse("PET", "MET", 0, (9.5, 17.5), (10.0, 15.0, 21.0)),
    StepResponse("PEH", "MEH", 0, (60.5, 80.5), (58.0, 71.0, 84.0)),
    StepResponse("SM", "Pre", 2, (1003.5, 1009.5, 1015.5), (34.0, 30.0, 26.0, 22.0)),
    StepResponse("ST", "MET", 1, (8.5, 13.5, 18.5), (9.0, 12.5, 16.0, 19.5)),
    StepResponse(
        "PAR", "Rad", 0, (50.0, 550.0, 1050.0, 1550.0), (40.0, 260.0, 640.0, 1000.0, 1380.0)
    ),
)

NOISY_STD = {
    "WU": 0.5, "IT": 0.4, "IH": 1.5, "PET": 0.4, "PEH": 1.5,
    "SM": 0.5, "ST": 0.3, "PAR": 10.0,
}


@dataclass(frozen=True)
class WorldParams:
    """
    Everything the generator needs. ``real_seasons`` have sensor files;
    ``historical`` (site, season) pairs get weather and yield only.
    ``wu_outage`` blanks WU for ``days`` days from ``start_day`` in one
    real (site, season).
    """

    seed: int = 0
    sites: tuple[str, ...] = ("Multispan", "Seaton")
    real_seasons: tuple[int, ...] = (2023, 2024)
    historical: tuple[tuple[str, int], ...] = (
        ("Multispan", 2021), ("Multispan", 2022), ("Seaton", 2022),
    )
    season_days: int = 70
    mode: str = "tree"
    responses: tuple[StepResponse, ...] = DEFAULT_RESPONSES
    noise: Mapping[str, float] = field(default_factory=dict)
    yield_noise: float = 0.0
    site_shift: Mapping[str, Mapping[str, float]] = field(
        default_factory=lambda: {"Seaton": {"IT": 2.0, "PET": 2.0, "ST": 1.5}}
    )
    site_yield_scale: Mapping[str, float] = field(
        default_factory=lambda: {"Multispan": 1.0, "Seaton": 0.85}
    )
    wu_outage: tuple | None = ("Multispan", 2024, 30, 7)

    def __post_init__(self):
        if self.mode not in MODES:
            raise FrameError(f"mode must be one of {MODES}")
        if self.season_days < 7 or self.season_days % 7:
            raise FrameError("season_days must be a positive multiple of 7")
        for ch, s in self.noise.items():
            if s < 0:
                raise FrameError(f"noise std for {ch} must be >= 0")
        if self.yield_noise < 0:
            raise FrameError("yield_noise must be >= 0")
        chans = [r.channel for r in self.responses]
        if len(set(chans)) != len(chans):
            raise FrameError("duplicate sensor response")
        for site, _ in self.historical:
            if site not in self.sites:
                raise FrameError(f"historical site {site} is not a world site")
        if self.wu_outage is not None:
            site, season, start, days = self.wu_outage
            if site not in self.sites or season not in self.real_seasons:
                raise FrameError("wu_outage must name a real (site, season)")
            if start < 0 or days < 1 or start + days > self.season_days:
                raise FrameError("wu_outage lies outside the season")

    @property
    def sensor_channels(self) -> tuple[str, ...]:
        return tuple(r.channel for r in self.responses)

    @property
    def max_offset(self) -> int:
        return max((r.offset for r in self.responses), default=0)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise"] = dict(self.noise)
        d["site_shift"] = {k: dict(v) for k, v in self.site_shift.items()}
        d["site_yield_scale"] = dict(self.site_yield_scale)
        return d


def season_start(season: int) -> np.datetime64:
    """First Monday on or after 1 May of ``season``, 00:00 UTC."""
    may1 = np.datetime64(f"{season}-05-01", "D")
    # 1970-01-01 was a Thursday
    weekday = (int(may1.astype(np.int64)) + 3) % 7
    return (may1 + np.timedelta64((7 - weekday) % 7, "D")).astype("datetime64[s]")


def _stream(seed: int, *key) -> np.random.Generator:
    words = [int(seed)]
    for k in key:
        words.append(zlib.crc32(k.encode()) if isinstance(k, str) else int(k))
    return np.random.default_rng(np.random.SeedSequence(words))


def _ar1(rng, n, phi, sigma):
    e = rng.normal(0.0, sigma, n)
    out = np.empty(n)
    acc = 0.0
    for i in range(n):
        acc = phi * acc + e[i]
        out[i] = acc
    return out


def _registry_specs(acronyms, synthetic=False):
    reg = ChannelRegistry(DEFAULT_CHANNELS)
    return [replace(reg[a], synthetic=synthetic) for a in acronyms]


def generate_weather(params: WorldParams, season: int, n_hours: int | None = None) -> TimeSeriesFrame:
    """
    Hourly weather for one season, shared by every site.

    ``n_hours`` defaults to the season length and may run up to one extra
    day; shorter or longer requests always agree on their common prefix.
    """
    full = (params.season_days + 1) * 24
    n_out = params.season_days * 24 if n_hours is None else int(n_hours)
    if not 1 <= n_out <= full:
        raise FrameError(f"n_hours must lie in [1, {full}]")
    n = full
    rng = _stream(params.seed, "weather", season)
    hours = np.arange(n)
    hod = hours % 24
    day = hours // 24
    days = int(day[-1]) + 1
    daily_offset = rng.normal(0.0, 2.0, days)[day]
    met = (
        11.0
        + 7.0 * day / max(params.season_days, 1)
        + 5.0 * np.sin(2 * np.pi * (hod - 9) / 24.0)
        + daily_offset
        + _ar1(rng, n, 0.9, 0.6)
    )
    meh = 76.0 - 2.2 * (met - 14.0) + _ar1(rng, n, 0.8, 2.0)
    meh = np.clip(meh, 25.0, 100.0)
    sun = np.clip(np.sin(np.pi * (hod - 5) / 16.0), 0.0, None)
    sun[(hod <= 5) | (hod >= 21)] = 0.0
    cloud = rng.uniform(0.35, 1.0, days)[day]
    rad = 2500.0 * sun * cloud * (1.0 + 0.08 * rng.standard_normal(n))
    rad = np.clip(rad, 0.0, None)
    rad[sun == 0.0] = 0.0
    pre = np.clip(1010.0 + _ar1(rng, n, 0.98, 1.4), 980.0, 1040.0)
    ws = np.abs(8.0 + _ar1(rng, n, 0.9, 1.5))
    wg = ws * rng.uniform(1.2, 1.7, n)
    wd = np.mod(200.0 + np.cumsum(rng.normal(0.0, 8.0, n)), 360.0)
    rain = rng.random(n) < 0.06
    rfa = np.where(rain, rng.exponential(1.2, n), 0.0)
    vis = np.clip(35000.0 + _ar1(rng, n, 0.95, 2500.0) - 6000.0 * rain, 500.0, 90000.0)
    if params.mode == "tree":
        met = np.round(met)
        meh = np.clip(np.round(meh), 25.0, 100.0)
        pre = np.round(pre)
        rad = np.round(rad / 100.0) * 100.0
    cols = {
        "MET": met, "Vis": np.round(vis), "Pre": pre, "MEH": meh, "Rad": rad,
        "WS": np.round(ws, 1), "WD": np.round(wd), "WG": np.round(wg, 1),
        "RFA": np.round(rfa, 1),
    }
    ts = season_start(season) + np.arange(n_out).astype("timedelta64[h]").astype("timedelta64[s]")
    values = np.column_stack([cols[c][:n_out] for c in WEATHER_CHANNELS])
    return TimeSeriesFrame("MO", season, "hourly", ts, _registry_specs(WEATHER_CHANNELS), values)


def sensor_truth(
    weather: TimeSeriesFrame, params: WorldParams, site: str, lookahead: TimeSeriesFrame | None = None
) -> TimeSeriesFrame:
    """
    Noise-free sensor series for ``site`` driven by ``weather``.

    A response with offset k reads the weather k hours later; ``lookahead``
    supplies those hours past the end of the frame (otherwise the last
    values are missing).
    """
    n = len(weather)
    ext = weather if lookahead is None else lookahead
    shift = params.site_shift.get(site, {})
    cols = []
    for r in params.responses:
        src = ext.column(r.source)
        x = np.full(n, np.nan)
        avail = min(n, len(src) - r.offset)
        x[:avail] = src[r.offset : r.offset + avail]
        if params.mode == "tree":
            y = r.step(x, shift.get(r.channel, 0.0))
        else:
            y = r.linear(x, shift.get(r.channel, 0.0))
        y[np.isnan(x)] = np.nan
        cols.append(y)
    return TimeSeriesFrame(
        site, weather.season, "hourly", weather.timestamps,
        _registry_specs(params.sensor_channels), np.column_stack(cols),
    )


def daily_yield(truth: TimeSeriesFrame, params: WorldParams) -> TimeSeriesFrame:
    """
    Daily yield from accumulated degree units of IT and the previous day's
    mean PAR through a saturating response, plus noise; each day is clipped
    so the weekly sums stay inside [0, 1.2].
    """
    rng = _stream(params.seed, "yield", truth.site, truth.season)
    days = len(truth) // 24
    it = truth.column("IT")[: days * 24].reshape(days, 24)
    par = truth.column("PAR")[: days * 24].reshape(days, 24)
    du = np.clip(np.array([math.fsum(r) / 24.0 for r in it.tolist()]) - 5.0, 0.0, None)
    maturity = 1.0 - np.exp(-np.cumsum(du) / 180.0)
    light = np.array([math.fsum(r) / 24.0 for r in par.tolist()]) / 400.0
    light = np.concatenate([[light[0]], light[:-1]])
    response = 2.0 * light / (1.0 + light)
    scale = params.site_yield_scale.get(truth.site, 1.0)
    y = 0.11 * scale * maturity * response
    if params.yield_noise > 0:
        y = y + rng.normal(0.0, params.yield_noise, days)
    y = np.clip(y, YIELD_CLIP[0], YIELD_CLIP[1] / 7.0)
    ts = truth.timestamps[::24][:days]
    return TimeSeriesFrame(
        truth.site, truth.season, "daily", ts, _registry_specs(["Yield"]), y.reshape(-1, 1)
    )


@dataclass
class Polytunnel:
    """One (site, season): observed sensors, daily and weekly yield, noise-free truth."""

    sensors: TimeSeriesFrame
    daily_yield: TimeSeriesFrame
    weekly_yield: TimeSeriesFrame
    truth: TimeSeriesFrame


def _weekly_sum(daily: TimeSeriesFrame) -> TimeSeriesFrame:
    from .preprocess import resample

    return resample(daily, "weekly")


def generate_polytunnel(weather: TimeSeriesFrame, params: WorldParams, site: str) -> Polytunnel:
    """
    Sensors, yield and truth for ``site`` over the span of ``weather``.

    Offsets past the end of the season read extra generated hours, so every
    timestamp has a defined truth value.
    """
    if site not in params.sites:
        raise FrameError(f"unknown site {site!r}")
    lookahead = generate_weather(params, weather.season, len(weather) + params.max_offset)
    truth = sensor_truth(weather, params, site, lookahead)
    rng = _stream(params.seed, "sensor-noise", site, weather.season)
    vals = np.array(truth.values, copy=True)
    for j, ch in enumerate(truth.acronyms):
        s = float(params.noise.get(ch, 0.0))
        draw = rng.standard_normal(len(truth))
        if s > 0:
            vals[:, j] = vals[:, j] + s * draw
    lo_hi = [spec.valid_range for spec in truth.channels]
    for j, rng_ in enumerate(lo_hi):
        if rng_ is not None:
            vals[:, j] = np.clip(vals[:, j], rng_[0], rng_[1])
    if params.wu_outage is not None and "WU" in truth.acronyms:
        o_site, o_season, start, days = params.wu_outage
        if (o_site, o_season) == (site, weather.season):
            vals[start * 24 : (start + days) * 24, truth.index_of("WU")] = np.nan
    sensors = truth.with_values(vals)
    daily = daily_yield(truth, params)
    return Polytunnel(sensors, daily, _weekly_sum(daily), truth)


def ground_truth_manifest(params: WorldParams) -> dict:
    """Response specs and noise levels; enough to recompute the noise floor per channel."""
    return {
        "format": "polycast-synthworld",
        "version": 1,
        "params": params.to_dict(),
        "responses": [asdict(r) for r in params.responses],
        "noise_std": {ch: float(params.noise.get(ch, 0.0)) for ch in params.sensor_channels},
        "bayes_rmse": {ch: float(params.noise.get(ch, 0.0)) for ch in params.sensor_channels},
    }


def write_world(params: WorldParams, out_dir, window: int = 6) -> dict:
    """
    Write the whole inventory plus a ready-to-run pipeline config.

    Layout (relative to ``out_dir``)::

        weather/MO_<season>.csv
        sensors/<site>_<season>.csv          real seasons only
        yield/<site>_<season>.csv            daily
        truth/<site>_<season>.csv            noise-free sensors, every season
        truth.json
        config.json
    """
    from .ingest import write_frame

    out = Path(out_dir)
    seasons = sorted(set(params.real_seasons) | {s for _, s in params.historical})
    counts = {}
    inventory = {"weather": {}, "sensors": {}, "yield": {}}
    rel = lambda p: p.relative_to(out).as_posix()  # noqa: E731
    for season in seasons:
        w = generate_weather(params, season)
        p = out / "weather" / f"MO_{season}.csv"
        write_frame(w, p)
        inventory["weather"][str(season)] = rel(p)
        counts[f"weather/{season}"] = len(w)
        pairs = [(s, season) for s in params.sites if season in params.real_seasons]
        pairs += [(s, y) for s, y in params.historical if y == season]
        for site, _ in pairs:
            tunnel = generate_polytunnel(w, params, site)
            key = f"{site}:{season}"
            if season in params.real_seasons:
                sp = out / "sensors" / f"{site}_{season}.csv"
                write_frame(tunnel.sensors, sp)
                inventory["sensors"][key] = rel(sp)
            yp = out / "yield" / f"{site}_{season}.csv"
            write_frame(tunnel.daily_yield, yp)
            inventory["yield"][key] = rel(yp)
            write_frame(tunnel.truth, out / "truth" / f"{site}_{season}.csv")
            counts[f"yield/{key}"] = len(tunnel.daily_yield)
    truth = ground_truth_manifest(params)
    truth["files"] = inventory
    (out / "truth.json").write_text(json.dumps(truth, indent=1, sort_keys=True) + "\n")
    config = default_world_config(params, inventory, window)
    (out / "config.json").write_text(json.dumps(config, indent=1) + "\n")
    return {"inventory": inventory, "counts": counts}


def default_world_config(params: WorldParams, inventory: Mapping, window: int = 6) -> dict:
    """Pipeline config for a written world; paths are relative to the config file."""
    targets = [c for c in ("WU", "IT", "IH", "SM", "ST", "PAR") if c in params.sensor_channels]
    held = [[s, min(params.real_seasons)] for s in params.sites]
    return {
        "sites": list(params.sites),
        "weather": dict(inventory["weather"]),
        "sensors": dict(inventory["sensors"]),
        "yield": dict(inventory["yield"]),
        "backcast": {"window": window, "targets": targets},
        "impute_water_usage": {"enabled": params.wu_outage is not None},
        "yield_experiment": {"held_out": held},
        "seed": params.seed,
    }


def noise_preset(scale: float = 1.0) -> dict[str, float]:
    """Per-channel sensor noise used by the noisy acceptance world."""
    return {k: v * scale for k, v in NOISY_STD.items()}


def params_from_dict(d: Mapping) -> WorldParams:
    d = dict(d)
    if "responses" in d:
        d["responses"] = tuple(
            StepResponse(
                r["channel"], r["source"], int(r["offset"]),
                tuple(r["breakpoints"]), tuple(r["levels"]),
            )
            for r in d["responses"]
        )
    for key in ("sites", "real_seasons"):
        if key in d:
            d[key] = tuple(d[key])
    if "historical" in d:
        d["historical"] = tuple((s, int(y)) for s, y in d["historical"])
    if d.get("wu_outage") is not None:
        d["wu_outage"] = tuple(d["wu_outage"])
    known = WorldParams.__dataclass_fields__
    unknown = set(d) - set(known)
    if unknown:
        raise FrameError(f"unknown world parameter(s): {sorted(unknown)}")
    return WorldParams(**d)

