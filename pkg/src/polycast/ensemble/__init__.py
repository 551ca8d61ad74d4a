"""From-scratch tree ensembles for regression."""

from .models import (
    VARIANTS,
    EnsembleModel,
    fit_cart,
    fit_gbdt,
    fit_random_forest,
    fit_variant,
    fit_xgb,
    load_model,
    model_from_dict,
    model_to_dict,
    predict,
    save_model,
    staged_predict,
)
from .params import BoostParams, ForestParams, TreeParams
from .tree import Tree

__all__ = [
    "VARIANTS",
    "BoostParams",
    "EnsembleModel",
    "ForestParams",
    "Tree",
    "TreeParams",
    "fit_cart",
    "fit_gbdt",
    "fit_random_forest",
    "fit_variant",
    "fit_xgb",
    "load_model",
    "model_from_dict",
    "model_to_dict",
    "predict",
    "save_model",
    "staged_predict",
]
