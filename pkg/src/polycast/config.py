"""Validated pipeline configuration (JSON document, unknown keys rejected)."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .core import FrameError, RESOLUTIONS
from .ensemble.params import BoostParams, ForestParams

FEATURE_SETS = ("yield-only", "yield+MO", "yield+sensor", "yield+sensor+MO")
DATA_MODES = ("real-only", "syn+real")
MO_CHANNELS = ("MET", "Vis", "Pre", "MEH", "Rad", "WS", "WD", "WG", "RFA")
BACKCAST_TARGETS = ("WU", "IT", "IH", "SM", "ST", "PAR")


class ConfigError(FrameError):
    """Configuration failed validation; the message carries the field path."""


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


def _default_backcast_learners():
    return {
        "rf": {"n_trees": 30, "min_samples_leaf": 3, "feature_subsample": "third"},
        "gbdt": {"n_rounds": 40, "learning_rate": 0.5, "max_depth": 4, "min_samples_leaf": 3},
        "xgb": {
            "n_rounds": 40, "learning_rate": 0.5, "max_depth": 4, "min_samples_leaf": 3,
            "l2_lambda": 1.0,
        },
    }


def _default_yield_learners():
    return {
        "rf": {"n_trees": 100, "min_samples_leaf": 2, "feature_subsample": "third"},
        "gbdt": {"n_rounds": 100, "learning_rate": 0.1, "max_depth": 3, "min_samples_leaf": 2},
        "xgb": {
            "n_rounds": 100, "learning_rate": 0.1, "max_depth": 3, "min_samples_leaf": 2,
            "l2_lambda": 1.0,
        },
    }


class Learners(_Section):
    rf: dict = Field(default_factory=dict)
    gbdt: dict = Field(default_factory=dict)
    xgb: dict = Field(default_factory=dict)

    @model_validator(mode="after")
    def _known_fields(self):
        for name, cls in (("rf", ForestParams), ("gbdt", BoostParams), ("xgb", BoostParams)):
            params = dict(getattr(self, name))
            params.pop("seed", None)
            try:
                cls.from_dict(params)
            except FrameError as exc:
                raise ValueError(f"{name}: {exc}") from None
        return self


class PairedFill(_Section):
    channel: str
    site: str
    donor: str


class Merge(_Section):
    a: str
    b: str
    out: str


class Preprocess(_Section):
    max_gap: int = Field(6, ge=0)
    paired_fill: list[PairedFill] = Field(default_factory=list)
    merges: list[Merge] = Field(default_factory=list)


class Normalization(_Section):
    a1: float = -1.0
    a2: float = 1.0

    @model_validator(mode="after")
    def _ordered(self):
        if not self.a1 < self.a2:
            raise ValueError("normalization interval needs a1 < a2")
        return self


class Impute(_Section):
    enabled: bool = True
    site_channel: str = "WU"
    predictors: list[str] | None = None
    train_fraction: float = Field(0.85, gt=0, lt=1)
    learners: Learners = Field(default_factory=lambda: Learners(**_default_backcast_learners()))


class Backcast(_Section):
    window: int = Field(6, ge=1)
    offset_base: Literal["anchor", "future"] = "anchor"
    exogenous: list[str] = Field(default_factory=lambda: list(MO_CHANNELS))
    targets: list[str] = Field(default_factory=lambda: list(BACKCAST_TARGETS))
    train_fraction: float = Field(0.85, gt=0, lt=1)
    models: list[Literal["rf", "gbdt", "xgb"]] = Field(default_factory=lambda: ["rf", "gbdt", "xgb"])
    learners: Learners = Field(default_factory=lambda: Learners(**_default_backcast_learners()))

    @model_validator(mode="after")
    def _disjoint(self):
        overlap = set(self.exogenous) & set(self.targets)
        if overlap:
            raise ValueError(f"exogenous and targets overlap: {sorted(overlap)}")
        if not self.targets:
            raise ValueError("at least one backcast target is required")
        return self


class YieldExperiment(_Section):
    feature_sets: list[Literal[FEATURE_SETS]] = Field(default_factory=lambda: list(FEATURE_SETS))
    data_modes: list[Literal[DATA_MODES]] = Field(default_factory=lambda: list(DATA_MODES))
    pruned_sensors: list[str] = Field(default_factory=lambda: ["IT", "IH", "SM", "PAR"])
    held_out: list[tuple[str, int]] = Field(default_factory=list)
    site_onehot: bool = True
    models: list[Literal["rf", "gbdt", "xgb"]] = Field(default_factory=lambda: ["rf", "gbdt", "xgb"])
    learners: Learners = Field(default_factory=lambda: Learners(**_default_yield_learners()))


class PipelineConfig(_Section):
    """
    Site/season inventory plus stage settings. Inventory keys are
    ``"<site>:<season>"`` (sensors, yield) or ``"<season>"`` (weather); paths
    are relative to the config file.
    """

    sites: list[str]
    weather: dict[str, str]
    sensors: dict[str, str]
    yield_: dict[str, str] = Field(alias="yield")
    sensor_resolution: Literal[tuple(RESOLUTIONS)] = "hourly"
    preprocess: Preprocess = Field(default_factory=Preprocess)
    impute_water_usage: Impute = Field(default_factory=Impute)
    backcast: Backcast = Field(default_factory=Backcast)
    normalization: Normalization = Field(default_factory=Normalization)
    yield_experiment: YieldExperiment = Field(default_factory=YieldExperiment)
    seed: int = 0
    base_dir: str = ""

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    @field_validator("sensors", "yield_")
    @classmethod
    def _keys(cls, v):
        for key in v:
            parse_group(key)
        return v

    @model_validator(mode="after")
    def _inventory(self):
        seasons_with_weather = set(self.weather)
        for key in list(self.sensors) + list(self.yield_):
            site, season = parse_group(key)
            if site not in self.sites:
                raise ValueError(f"{key}: site {site!r} is not listed in sites")
            if str(season) not in seasons_with_weather:
                raise ValueError(f"{key}: no weather file for season {season}")
        for site, season in self.yield_experiment.held_out:
            if f"{site}:{season}" not in self.sensors:
                raise ValueError(f"held_out {site}:{season} has no sensor frame")
            if f"{site}:{season}" not in self.yield_:
                raise ValueError(f"held_out {site}:{season} has no yield frame")
        return self

    def path(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def real_groups(self) -> list[tuple[str, int]]:
        return sorted(parse_group(k) for k in self.sensors)

    @property
    def historical_groups(self) -> list[tuple[str, int]]:
        real = set(self.real_groups)
        return sorted(g for g in (parse_group(k) for k in self.yield_) if g not in real)

    def canonical(self) -> dict:
        d = self.model_dump(mode="json", by_alias=True)
        d.pop("base_dir")
        return d

    def digest(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def parse_group(key: str) -> tuple[str, int]:
    site, sep, season = key.rpartition(":")
    if not sep or not site:
        raise ValueError(f"group key {key!r} must look like 'site:season'")
    try:
        return site, int(season)
    except ValueError:
        raise ValueError(f"group key {key!r} has a non-integer season") from None


def _format_errors(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def config_from_dict(d: dict, base_dir="") -> PipelineConfig:
    try:
        return PipelineConfig.model_validate({**d, "base_dir": str(base_dir)})
    except ValidationError as exc:
        raise ConfigError(f"invalid config: {_format_errors(exc)}") from None


def load_config(path, overrides: dict | None = None) -> PipelineConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError("config root must be an object")
    if "base_dir" in data:
        raise ConfigError("invalid config: base_dir: Extra inputs are not permitted")
    data.update(overrides or {})
    return config_from_dict(data, path.parent)
