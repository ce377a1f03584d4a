"""Batched, context-aware prediction and the probability-averaging ensemble.

The context of every prediction is the mean feature row of the test batch
it arrives in, so results depend on the batch size; callers should record
the batch size alongside any reported accuracy. Labels never enter a
forward pass: :func:`predict_labels` only sees features and scoring happens
afterwards.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datasets import DomainDataset
from .errors import ContractError, DimensionError, LabelError
from .models import ModelBundle, forward_adapted


@dataclass
class EnsembleModel:
    bundles: list[ModelBundle]
    require_shared_adapter: bool = True

    def __post_init__(self):
        if not self.bundles:
            raise ContractError("an ensemble needs at least one model")
        first = self.bundles[0]
        for b in self.bundles[1:]:
            if (b.extractor.in_dim, b.feature_dim, b.num_classes) != (
                first.extractor.in_dim,
                first.feature_dim,
                first.num_classes,
            ):
                raise DimensionError("ensemble members disagree on input, feature or class dimension")
            if self.require_shared_adapter and b.adapter is not first.adapter:
                raise ContractError("ensemble members must share one adapter instance")

    @property
    def num_classes(self) -> int:
        return self.bundles[0].num_classes

    @property
    def input_dim(self) -> int:
        return self.bundles[0].extractor.in_dim


def _as_ensemble(model) -> EnsembleModel:
    if isinstance(model, EnsembleModel):
        return model
    if isinstance(model, ModelBundle):
        return EnsembleModel([model])
    raise TypeError(f"expected EnsembleModel or ModelBundle, got {type(model).__name__}")


def predict_batch(bundle: ModelBundle, x) -> np.ndarray:
    """Probabilities [B x K]; the context is this batch's own feature mean."""
    return forward_adapted(bundle, x).data


def ensemble_probs(model: EnsembleModel, x) -> np.ndarray:
    model = _as_ensemble(model)
    total = predict_batch(model.bundles[0], x).copy()
    for bundle in model.bundles[1:]:
        total += predict_batch(bundle, x)
    return total / len(model.bundles)


def ensemble_predict(model: EnsembleModel, x) -> np.ndarray:
    """Argmax of the mean probability vector; ties go to the lowest class index."""
    return np.argmax(ensemble_probs(model, x), axis=1)


def predict_labels(model, features: np.ndarray, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Predict in consecutive batches of ``batch_size`` (last one may be short).

    Returns ``(labels, mean_probs)``.
    """
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    model = _as_ensemble(model)
    if features.ndim != 2 or features.shape[1] != model.input_dim:
        raise DimensionError(f"features of shape {features.shape} do not match input dim {model.input_dim}")
    probs = [ensemble_probs(model, features[s : s + batch_size]) for s in range(0, len(features), batch_size)]
    probs = np.concatenate(probs, axis=0)
    return np.argmax(probs, axis=1), probs


def accuracy(model, features: np.ndarray, labels: np.ndarray, batch_size: int) -> float:
    model = _as_ensemble(model)
    if labels.size and labels.max() >= model.num_classes:
        raise LabelError(f"dataset has label {labels.max()} but the model predicts {model.num_classes} classes")
    predicted, _ = predict_labels(model, features, batch_size)
    return float(np.mean(predicted == labels))


def evaluate(model, dataset: DomainDataset, batch_size: int = 32) -> float:
    """Fraction of correctly labelled samples, traversing ``dataset`` in order."""
    return accuracy(model, dataset.features, dataset.labels, batch_size)


def write_predictions(path, model, dataset: DomainDataset, batch_size: int = 32) -> float:
    """Dump ``sample_index,true_label,pred_label,prob_0..`` rows; returns accuracy."""
    model = _as_ensemble(model)
    predicted, probs = predict_labels(model, dataset.features, batch_size)
    with open(Path(path), "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["sample_index", "true_label", "pred_label"] + [f"prob_{k}" for k in range(probs.shape[1])])
        for i, (y, p, row) in enumerate(zip(dataset.labels, predicted, probs)):
            writer.writerow([i, int(y), int(p)] + [repr(float(v)) for v in row])
    return float(np.mean(predicted == dataset.labels))
