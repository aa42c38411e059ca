"""The four learner families behind one fit/predict contract."""

from __future__ import annotations

import numpy as np

from ..features import DesignMatrix
from .base import (
    FAMILIES,
    ConvergenceError,
    DegenerateLabelsError,
    LearnerError,
    TrainedModel,
    TrainingError,
    check_transport,
    load_model,
    save_model,
)
from .gbt import fit_gbt, predict_gbt
from .logistic import fit_logistic_l1, predict_logistic
from .neural import fit_resnet, fit_transformer, predict_neural
from .spaces import (
    DESK_SAMPLES,
    ConfigError,
    GbtGrid,
    LogisticSearchSpec,
    ResNetSpace,
    TrainConfig,
    TransformerSpace,
    sample_hyperparameters,
)

__all__ = [
    "FAMILIES", "ConfigError", "ConvergenceError", "DegenerateLabelsError", "LearnerError", "TrainedModel",
    "TrainingError", "DESK_SAMPLES", "GbtGrid", "LogisticSearchSpec", "ResNetSpace", "TrainConfig",
    "TransformerSpace", "fit", "fit_gbt", "fit_logistic_l1", "fit_resnet", "fit_transformer", "load_model",
    "predict", "sample_hyperparameters", "save_model",
]


def fit(family: str, matrix: DesignMatrix, seed: int, train_config: TrainConfig | None = None,
        provenance: dict | None = None, jobs: int = 1) -> TrainedModel:
    """Fit ``family`` with its default search space.

    ``train_config`` and ``jobs`` only apply to the neural families; the
    config's seed is replaced by ``seed``.
    """
    if family == "logistic":
        return fit_logistic_l1(matrix, LogisticSearchSpec(), seed=seed, provenance=provenance)
    if family == "gbt":
        return fit_gbt(matrix, GbtGrid(), seed=seed, provenance=provenance)
    cfg = (train_config or TrainConfig()).with_overrides(seed=seed)
    if family == "resnet":
        return fit_resnet(matrix, ResNetSpace(), cfg, provenance, jobs=jobs)
    if family == "transformer":
        return fit_transformer(matrix, TransformerSpace(), cfg, provenance, jobs=jobs)
    raise LearnerError(f"unknown model family {family!r}")


def refit(model: TrainedModel, matrix: DesignMatrix, seed: int, train_config: TrainConfig | None = None,
          provenance: dict | None = None) -> TrainedModel:
    """Fit the same family on new rows with the hyperparameters frozen."""
    hp = model.hyperparameters
    if model.family == "logistic":
        from .logistic import fit_logistic_fixed

        out = fit_logistic_fixed(matrix, hp["variance"], LogisticSearchSpec(), provenance)
    elif model.family == "gbt":
        from .gbt import fit_gbt_fixed

        out = fit_gbt_fixed(matrix, hp["n_trees"], hp["max_depth"], hp["learning_rate"], GbtGrid())
        out.provenance = dict(provenance or {})
    else:
        cfg = (train_config or TrainConfig()).with_overrides(seed=seed, n_hyperparameter_samples=1)
        space = ResNetSpace() if model.family == "resnet" else TransformerSpace()
        frozen = [{k: hp[k] for k in space.dimensions()}]
        fitter = fit_resnet if model.family == "resnet" else fit_transformer
        out = fitter(matrix, space, cfg, provenance, hyperparameters=frozen)
    out.provenance["seed"] = seed
    return out


def predict(model: TrainedModel, matrix: DesignMatrix) -> np.ndarray:
    """Probabilities in (0, 1), one per row of ``matrix``."""
    check_transport(model, matrix)
    if model.family == "logistic":
        return predict_logistic(model, matrix)
    if model.family == "gbt":
        return predict_gbt(model, matrix)
    return predict_neural(model, matrix)
