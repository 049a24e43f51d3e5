"""Accuracy, confusion matrices and patch-importance maps."""

import csv
from dataclasses import dataclass

import numpy as np

from .core import GRID_N, N_PATCHES, N_VIEWS, PATCH_DIM, InvalidArgument
from .forest import ForestConfig, feature_importance, train_forest


@dataclass
class EvalReport:
    accuracy: float
    confusion: np.ndarray  # rows = ground truth, columns = prediction
    n_images: int

    @property
    def quarter_turn_mass(self):
        """Fraction of images predicted exactly 4 bins (90 degrees) away from the truth."""
        v = np.arange(N_VIEWS)
        d = np.abs(v[:, None] - v[None, :]) % N_VIEWS
        mask = (d == 4) | (d == N_VIEWS - 4)
        return float(self.confusion[mask].sum() / max(self.n_images, 1))

    @property
    def front_back_mass(self):
        """Fraction of images predicted 8 bins (180 degrees) away from the truth."""
        v = np.arange(N_VIEWS)
        mask = (np.abs(v[:, None] - v[None, :]) % N_VIEWS) == 8
        return float(self.confusion[mask].sum() / max(self.n_images, 1))

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "n_images": self.n_images,
            "quarter_turn_mass": self.quarter_turn_mass,
            "front_back_mass": self.front_back_mass,
        }


def evaluate(predictions, ground_truth):
    pred = np.asarray(predictions, dtype=np.int64)
    truth = np.asarray(ground_truth, dtype=np.int64)
    if pred.shape != truth.shape or pred.ndim != 1:
        raise InvalidArgument("predictions and ground truth must be equal-length vectors")
    if len(pred) and (min(pred.min(), truth.min()) < 1 or max(pred.max(), truth.max()) > N_VIEWS):
        raise InvalidArgument(f"labels must lie in 1..{N_VIEWS}")
    confusion = np.zeros((N_VIEWS, N_VIEWS), dtype=np.int64)
    np.add.at(confusion, (truth - 1, pred - 1), 1)
    n = len(pred)
    accuracy = float(np.trace(confusion) / n) if n else 0.0
    return EvalReport(accuracy, confusion, n)


def write_confusion_csv(path, confusion):
    with open(path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(np.asarray(confusion, dtype=np.int64).tolist())


def read_confusion_csv(path):
    with open(path, newline="") as fh:
        return np.array([[int(x) for x in row] for row in csv.reader(fh)], dtype=np.int64)


def global_features(features):
    """Flatten (n, 36, 576) patch features into (n, 20736) whole-image vectors."""
    features = np.asarray(features, dtype=np.float32)
    return features.reshape(len(features), -1)


def global_train(features, labels, config=ForestConfig(), threads=1):
    """One forest on the concatenated whole-image feature."""
    return train_forest(global_features(features), labels, config, threads=threads)


def global_predict(forest, features):
    features = np.asarray(features, dtype=np.float32)
    single = features.ndim == 2 and features.shape[0] == N_PATCHES
    if single:
        features = features[None]
    out = forest.predict_proba(global_features(features))
    return out[0] if single else out


def patch_importance(global_forest):
    """Per-patch share of the global forest's impurity decrease as a 6x6 grid.

    A forest with no split nodes gives the uniform map.
    """
    imp = feature_importance(global_forest)
    if imp.shape != (N_PATCHES * PATCH_DIM,):
        raise InvalidArgument(f"expected a forest over {N_PATCHES * PATCH_DIM} features")
    blocks = imp.reshape(N_PATCHES, PATCH_DIM).sum(axis=1)
    total = blocks.sum()
    if total <= 0:
        return np.full((GRID_N, GRID_N), 1.0 / N_PATCHES)
    return (blocks / total).reshape(GRID_N, GRID_N)
