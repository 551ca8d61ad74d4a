"""
Regression learners built on :mod:`polycast.ensemble.tree`: a single CART,
a bagged random forest, a first-order gradient booster and a second-order
L2-regularized booster, plus prediction and (de)serialization.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..core import FrameError
from .params import BoostParams, ForestParams, TreeParams
from .tree import Tree, grow_tree, presort

VARIANTS = ("cart", "rf", "gbdt", "xgb")
MODEL_FORMAT = "polycast-model"


@dataclass
class EnsembleModel:
    """
    A fitted learner.

    For boosters the prediction is ``base + learning_rate * sum(trees)``; for
    the forest it is the mean over trees; for cart the single tree.
    ``history`` holds the per-round training RMSE of boosters (index 0 is the
    constant base model).
    """

    variant: str
    trees: list[Tree]
    feature_names: tuple[str, ...]
    params: dict
    seed: int
    base: float = 0.0
    learning_rate: float = 1.0
    history: list[float] = field(default_factory=list)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)


def _tree_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _check_xy(X, y, min_leaf, feature_names):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2:
        raise FrameError("features must be a 2-D matrix")
    if y.shape != (X.shape[0],):
        raise FrameError(f"{X.shape[0]} rows but {y.shape} targets")
    if np.isnan(X).any() or np.isnan(y).any():
        raise FrameError("learners require complete rows (no missing cells)")
    if X.shape[0] < 2 * min_leaf:
        raise FrameError(
            f"need at least {2 * min_leaf} rows for min_samples_leaf={min_leaf}, "
            f"got {X.shape[0]}"
        )
    if feature_names is None:
        feature_names = tuple(f"x{j}" for j in range(X.shape[1]))
    feature_names = tuple(feature_names)
    if len(feature_names) != X.shape[1]:
        raise FrameError("feature_names length does not match the matrix")
    return X, y, feature_names


def _mean_leaf(y):
    def leaf(rows):
        return float(np.sum(y[rows]) / rows.size)

    return leaf


def _cart_tree(X, y, params: TreeParams, rng, sorted_rows=None) -> Tree:
    gain = params.min_split_gain
    return grow_tree(
        X,
        y,
        lam=0.0,
        accept=lambda s: s > gain,
        leaf_value=_mean_leaf(y),
        max_depth=params.max_depth,
        min_leaf=params.min_samples_leaf,
        feature_subsample=params.feature_subsample,
        rng=rng,
        sorted_rows=sorted_rows,
    )


def fit_cart(
    X, y, params: TreeParams = TreeParams(), seed: int = 0, feature_names=None
) -> EnsembleModel:
    """Greedy squared-error regression tree with exact split search."""
    X, y, names = _check_xy(X, y, params.min_samples_leaf, feature_names)
    tree = _cart_tree(X, y, params, _tree_rng(seed, 0))
    return EnsembleModel("cart", [tree], names, params.to_dict(), seed)


def fit_random_forest(
    X, y, params: ForestParams = ForestParams(), feature_names=None, n_jobs: int = 1
) -> EnsembleModel:
    """
    Bagged CART ensemble.

    Tree ``i`` draws its bootstrap sample and split-feature subsets from a
    stream seeded by ``(seed, i)``, so results do not depend on ``n_jobs``.
    """
    X, y, names = _check_xy(X, y, params.min_samples_leaf, feature_names)
    tp = params.tree_params()
    n = X.shape[0]
    shared_sort = None if params.bootstrap else presort(X)

    def build(i):
        rng = _tree_rng(params.seed, i)
        if params.bootstrap:
            idx = rng.integers(0, n, size=n)
            return _cart_tree(X[idx], y[idx], tp, rng)
        return _cart_tree(X, y, tp, rng, sorted_rows=shared_sort)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            trees = list(pool.map(build, range(params.n_trees)))
    else:
        trees = [build(i) for i in range(params.n_trees)]
    return EnsembleModel("rf", trees, names, params.to_dict(), params.seed)


def _rmse(r: np.ndarray) -> float:
    return math.sqrt(math.fsum((r * r).tolist()) / r.size)


def _holdout(n, params: BoostParams):
    if params.early_stopping_rounds is None:
        return np.arange(n), None
    rng = np.random.default_rng(np.random.SeedSequence([params.seed, 7919]))
    perm = rng.permutation(n)
    n_val = max(1, int(round(n * params.validation_fraction)))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _boost(X, y, params: BoostParams, names, variant) -> EnsembleModel:
    X, y, names = _check_xy(X, y, params.min_samples_leaf, names)
    train, val = _holdout(X.shape[0], params)
    Xt, yt = X[train], y[train]
    if Xt.shape[0] < 2 * params.min_samples_leaf:
        raise FrameError("too few rows left for training after the validation holdout")
    base = float(np.sum(yt) / yt.size)
    eta = params.learning_rate
    S = presort(Xt)
    F = np.full(yt.shape, base)
    history = [_rmse(yt - F)]
    trees: list[Tree] = []
    best_val, best_round, F_val = math.inf, 0, None
    if val is not None:
        F_val = np.full(len(val), base)
        best_val = _rmse(y[val] - F_val)
    for _ in range(params.n_rounds):
        if variant == "gbdt":
            resid = yt - F
            tree = grow_tree(
                Xt, resid, lam=0.0, accept=lambda s: s > 0.0,
                leaf_value=_mean_leaf(resid), max_depth=params.max_depth,
                min_leaf=params.min_samples_leaf, sorted_rows=S,
            )
        else:
            grad = F - yt
            lam, gamma = params.l2_lambda, params.min_split_gain

            def leaf(rows, grad=grad):
                return float(-np.sum(grad[rows]) / (rows.size + lam))

            tree = grow_tree(
                Xt, grad, lam=lam, accept=lambda s: 0.5 * s - gamma > 0.0,
                leaf_value=leaf, max_depth=params.max_depth,
                min_leaf=params.min_samples_leaf, sorted_rows=S,
            )
        trees.append(tree)
        F = F + eta * tree.predict(Xt)
        history.append(_rmse(yt - F))
        if val is not None:
            F_val = F_val + eta * tree.predict(X[val])
            score = _rmse(y[val] - F_val)
            if score < best_val:
                best_val, best_round = score, len(trees)
            elif len(trees) - best_round >= params.early_stopping_rounds:
                break
    if val is not None:
        trees = trees[:best_round]
        history = history[: best_round + 1]
    return EnsembleModel(
        variant, trees, names, params.to_dict(), params.seed, base, eta, history
    )


def fit_gbdt(X, y, params: BoostParams = BoostParams(), feature_names=None) -> EnsembleModel:
    """First-order booster: each round fits a CART to the current residuals."""
    return _boost(X, y, params, feature_names, "gbdt")


def fit_xgb(X, y, params: BoostParams = BoostParams(), feature_names=None) -> EnsembleModel:
    """
    Second-order booster for squared loss (hessian 1 per row).

    Leaf weight is ``-G / (H + lambda)``; a split is taken only when
    ``0.5 * score - gamma > 0``.
    """
    return _boost(X, y, params, feature_names, "xgb")


def _check_schema(model: EnsembleModel, X, feature_names):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise FrameError(
            f"model expects {model.n_features} features, got matrix of shape {X.shape}"
        )
    if feature_names is not None and tuple(feature_names) != model.feature_names:
        raise FrameError("feature names/order differ from the training schema")
    return X


def _row_fsum(P: np.ndarray) -> np.ndarray:
    """Correctly rounded column sums of ``P`` (trees x rows); order-free."""
    return np.array([math.fsum(col) for col in P.T.tolist()], dtype=np.float64)


def predict(model: EnsembleModel, X, feature_names: Sequence[str] | None = None) -> np.ndarray:
    X = _check_schema(model, X, feature_names)
    if model.variant == "cart":
        return model.trees[0].predict(X)
    if not model.trees:
        return np.full(X.shape[0], model.base)
    P = np.stack([t.predict(X) for t in model.trees])
    total = _row_fsum(P)
    if model.variant == "rf":
        return total / len(model.trees)
    return model.base + model.learning_rate * total


def staged_predict(model: EnsembleModel, X):
    """Booster predictions after 0, 1, ..., n_rounds rounds."""
    if model.variant not in ("gbdt", "xgb"):
        raise FrameError("staged_predict is defined for boosters only")
    X = _check_schema(model, X, None)
    F = np.full(X.shape[0], model.base)
    yield F.copy()
    for t in model.trees:
        F = F + model.learning_rate * t.predict(X)
        yield F.copy()


def model_to_dict(model: EnsembleModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": 1,
        "variant": model.variant,
        "seed": model.seed,
        "params": model.params,
        "feature_names": list(model.feature_names),
        "base": model.base,
        "learning_rate": model.learning_rate,
        "history": model.history,
        "trees": [t.to_dict() for t in model.trees],
    }


def model_from_dict(d: dict) -> EnsembleModel:
    if d.get("format") != MODEL_FORMAT:
        raise FrameError("not a polycast model file")
    if d["variant"] not in VARIANTS:
        raise FrameError(f"unknown model variant {d['variant']!r}")
    return EnsembleModel(
        d["variant"],
        [Tree.from_dict(t) for t in d["trees"]],
        tuple(d["feature_names"]),
        d["params"],
        d["seed"],
        d["base"],
        d["learning_rate"],
        list(d.get("history", [])),
    )


def save_model(model: EnsembleModel, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(model_to_dict(model), indent=1) + "\n", encoding="utf-8")


def load_model(path) -> EnsembleModel:
    return model_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def fit_variant(variant: str, X, y, params: dict, seed: int, feature_names=None, n_jobs=1):
    """Fit any variant from a plain parameter mapping (as found in configs)."""
    params = dict(params)
    if variant == "cart":
        return fit_cart(X, y, TreeParams.from_dict(params), seed, feature_names)
    if variant == "rf":
        params["seed"] = seed
        return fit_random_forest(X, y, ForestParams.from_dict(params), feature_names, n_jobs)
    if variant in ("gbdt", "xgb"):
        params["seed"] = seed
        fit = fit_gbdt if variant == "gbdt" else fit_xgb
        return fit(X, y, BoostParams.from_dict(params), feature_names)
    raise FrameError(f"unknown model variant {variant!r}")
