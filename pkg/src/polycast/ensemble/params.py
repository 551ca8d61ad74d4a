"""Hyperparameter records for the tree learners."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Mapping

from ..core import FrameError


def _check_subsample(value):
    if value is None or value == "third":
        return
    if isinstance(value, bool):
        raise FrameError("feature_subsample must be a count, a fraction, 'third' or None")
    if isinstance(value, int):
        if value < 1:
            raise FrameError("feature_subsample count must be >= 1")
    elif isinstance(value, float):
        if not 0.0 < value <= 1.0:
            raise FrameError("feature_subsample fraction must lie in (0, 1]")
    else:
        raise FrameError("feature_subsample must be a count, a fraction, 'third' or None")


def resolve_subsample(value, n_features: int) -> int:
    """Number of candidate features examined at each split."""
    if value is None:
        return n_features
    if value == "third":
        return max(1, n_features // 3)
    if isinstance(value, float):
        return max(1, int(value * n_features))
    return min(int(value), n_features)


class _Params:
    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise FrameError(f"unknown {cls.__name__} field(s): {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class TreeParams(_Params):
    max_depth: int | None = 6
    min_samples_leaf: int = 5
    min_split_gain: float = 0.0
    feature_subsample: int | float | str | None = None

    def __post_init__(self):
        if self.max_depth is not None and self.max_depth < 1:
            raise FrameError("max_depth must be >= 1")
        if self.min_samples_leaf < 1:
            raise FrameError("min_samples_leaf must be >= 1")
        if self.min_split_gain < 0:
            raise FrameError("min_split_gain must be >= 0")
        _check_subsample(self.feature_subsample)


@dataclass(frozen=True)
class ForestParams(_Params):
    n_trees: int = 300
    bootstrap: bool = True
    feature_subsample: int | float | str | None = "third"
    max_depth: int | None = None
    min_samples_leaf: int = 5
    min_split_gain: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise FrameError("n_trees must be >= 1")
        self.tree_params()

    def tree_params(self) -> TreeParams:
        return TreeParams(
            self.max_depth, self.min_samples_leaf, self.min_split_gain, self.feature_subsample
        )


@dataclass(frozen=True)
class BoostParams(_Params):
    """
    Shared by the first-order (gbdt) and second-order (xgb) boosters.

    ``l2_lambda`` and ``min_split_gain`` only affect the xgb variant.
    ``early_stopping_rounds=None`` disables early stopping.
    """

    n_rounds: int = 500
    learning_rate: float = 0.05
    max_depth: int | None = 3
    min_samples_leaf: int = 5
    l2_lambda: float = 1.0
    min_split_gain: float = 0.0
    early_stopping_rounds: int | None = None
    validation_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_rounds < 0:
            raise FrameError("n_rounds must be >= 0")
        if not 0.0 < self.learning_rate <= 1.0:
            raise FrameError("learning_rate must lie in (0, 1]")
        if self.l2_lambda < 0:
            raise FrameError("l2_lambda must be >= 0")
        if self.min_split_gain < 0:
            raise FrameError("min_split_gain must be >= 0")
        if self.early_stopping_rounds is not None and self.early_stopping_rounds < 1:
            raise FrameError("early_stopping_rounds must be >= 1")
        if not 0.0 < self.validation_fraction < 1.0:
            raise FrameError("validation_fraction must lie in (0, 1)")
        if self.max_depth is not None and self.max_depth < 1:
            raise FrameError("max_depth must be >= 1")
        if self.min_samples_leaf < 1:
            raise FrameError("min_samples_leaf must be >= 1")
