"""
Classification metrics, the linear SVM baseline and classification-map rendering.
"""
import json
import logging
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
from PIL import Image
from sklearn.metrics import cohen_kappa_score, confusion_matrix

from core.errors import InvalidArgumentError
from models.cube_models import Coord, LabelMap
from models.eval_models import ConfusionMatrix, Report, SvmConfig, SvmModel

logger = logging.getLogger(__name__)

# Class colours for labels 1..16; label 0 (unlabeled) is black.
PALETTE = np.array([
    (230, 25, 75), (60, 180, 75), (255, 225, 25), (0, 130, 200),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 212), (0, 128, 128), (220, 190, 255),
    (170, 110, 40), (255, 250, 200), (128, 0, 0), (170, 255, 195),
], dtype=np.uint8)


# Metrics

def confusion(truth: Sequence[int], pred: Sequence[int], classes: Optional[int] = None) -> ConfusionMatrix:
    """
    Count (truth, prediction) pairs of 1-based labels.

    Args:
        truth: True labels, unlabeled pixels already removed
        pred: Predicted labels
        classes: Class count Mc (defaults to the largest label seen)
    """
    truth = np.asarray(truth, dtype=np.int64)
    pred = np.asarray(pred, dtype=np.int64)
    if truth.shape != pred.shape or truth.ndim != 1:
        raise InvalidArgumentError(f"truth and prediction lengths differ: {truth.shape} vs {pred.shape}")
    if classes is None:
        classes = int(max(truth.max(initial=1), pred.max(initial=1)))
    for name, values in (("truth", truth), ("prediction", pred)):
        if values.size and (values.min() < 1 or values.max() > classes):
            raise InvalidArgumentError(f"{name} labels must lie in 1..{classes}")
    if not truth.size:
        return ConfusionMatrix(np.zeros((classes, classes), dtype=np.int64))
    return ConfusionMatrix(confusion_matrix(truth, pred, labels=np.arange(1, classes + 1)).astype(np.int64))


def metrics(cm: ConfusionMatrix) -> Report:
    """OA, per-class recall, AA over classes present in the truth, and Cohen's kappa."""
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total <= 0:
        raise InvalidArgumentError("confusion matrix is empty")
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)
    diag = np.diag(counts)
    per_class = np.full(cm.classes, np.nan)
    present = rows > 0
    per_class[present] = diag[present] / rows[present]

    oa = diag.sum() / total
    aa = float(per_class[present].mean())
    pe = float(np.dot(rows, cols)) / total ** 2
    if pe == 1.0:
        # cohen_kappa_score is nan here
        kappa = 1.0 if oa == 1.0 else 0.0
    else:
        truth, pred = np.nonzero(cm.counts)
        weights = cm.counts[truth, pred].astype(np.int64)
        kappa = cohen_kappa_score(np.repeat(truth, weights), np.repeat(pred, weights),
                                  labels=np.arange(cm.classes))
    return Report(per_class=per_class.tolist(), oa=float(oa), aa=aa, kappa=float(kappa), confusion=cm)


def compression_ratio(k: int, l: int) -> float:
    """Measurements per voxel column: K snapshots over L bands."""
    if k < 1 or l < 1:
        raise InvalidArgumentError(f"snapshots and bands must be >= 1, got {k}, {l}")
    return k / l


def save_report(report: Report, path):
    Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n", encoding="utf-8")
    logger.info("wrote report (OA %.4f) to %s", report.oa, path)


# Linear SVM

def _standardize(features: np.ndarray, mean: np.ndarray, scale: np.ndarray) -> np.ndarray:
    return (features - mean) / scale


def svm_train(features: np.ndarray, labels: Sequence[int], cfg: SvmConfig = None) -> SvmModel:
    """
    One-vs-rest linear SVM by subgradient descent.

    Minimises mean hinge loss + ||w||^2 / (2c) per class with step eta / sqrt(t + 1).
    Features are standardized with training statistics.

    Args:
        features: (samples, features) array
        labels: 1-based labels, at least two distinct
        cfg: Training settings; cfg.batch = 0 runs full-batch steps
    """
    cfg = cfg or SvmConfig()
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or len(x) != len(y):
        raise InvalidArgumentError(f"features must be (samples, features) matching labels, got {x.shape}")
    classes = sorted(int(c) for c in np.unique(y))
    if len(classes) < 2:
        raise InvalidArgumentError("SVM training needs at least two classes")
    if not cfg.c > 0 or not cfg.eta > 0 or cfg.epochs < 1:
        raise InvalidArgumentError("SVM needs c > 0, eta > 0 and epochs >= 1")

    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    xs = _standardize(x, mean, scale)
    targets = np.where(y[:, None] == np.array(classes)[None, :], 1.0, -1.0)  # (samples, classes)

    weights = np.zeros((len(classes), x.shape[1]))
    biases = np.zeros(len(classes))
    rng = np.random.default_rng(cfg.seed)
    t = 0
    for _ in range(cfg.epochs):
        if cfg.batch > 0:
            order = rng.permutation(len(xs))
            batches = [order[i:i + cfg.batch] for i in range(0, len(xs), cfg.batch)]
        else:
            batches = [slice(None)]
        for idx in batches:
            xb, tb = xs[idx], targets[idx]
            margins = tb * (xb @ weights.T + biases)
            active = (margins < 1.0) * tb
            grad_w = -(active.T @ xb) / len(xb) + weights / cfg.c
            grad_b = -active.sum(axis=0) / len(xb)
            step = cfg.eta / np.sqrt(t + 1.0)
            weights -= step * grad_w
            biases -= step * grad_b
            t += 1
    logger.debug("svm trained on %d samples, %d features, %d classes", len(x), x.shape[1], len(classes))
    return SvmModel(classes=classes, weights=weights, biases=biases, mean=mean, scale=scale)


def svm_decision(model: SvmModel, features: np.ndarray) -> np.ndarray:
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    return _standardize(x, model.mean, model.scale) @ model.weights.T + model.biases


def svm_predict(model: SvmModel, features: np.ndarray) -> np.ndarray:
    """Labels with the largest decision value; ties go to the smallest label."""
    return np.array(model.classes)[np.argmax(svm_decision(model, features), axis=1)]


# Maps

def prediction_map(n: int, m: int, classes: int, coords: Sequence[Coord], predicted: Sequence[int]) -> LabelMap:
    """Label map holding predictions at coords and 0 elsewhere."""
    labels = np.zeros((n, m), dtype=np.int64)
    if len(coords):
        xs, ys = zip(*coords)
        labels[np.array(xs), np.array(ys)] = np.asarray(predicted)
    return LabelMap(labels, classes)


def render_map(pred: LabelMap, palette: np.ndarray = PALETTE) -> np.ndarray:
    """RGB image (n, m, 3); labels above the palette size cycle through it."""
    palette = np.asarray(palette, dtype=np.uint8)
    labels = pred.labels
    rgb = np.zeros(labels.shape + (3,), dtype=np.uint8)
    mask = labels > 0
    rgb[mask] = palette[(labels[mask] - 1) % len(palette)]
    return rgb


def save_map(rgb: np.ndarray, path):
    """Write an RGB array as binary PPM (P6)."""
    Image.fromarray(np.asarray(rgb, dtype=np.uint8)).save(path, format="PPM")
    logger.info("wrote %dx%d classification map to %s", rgb.shape[0], rgb.shape[1], path)


def mean_reports(reports: List[Report]) -> Report:
    """Average OA, AA, kappa, per-class accuracy and timing over repeated runs."""
    if not reports:
        raise InvalidArgumentError("no reports to average")
    counts = np.sum([r.confusion.counts for r in reports], axis=0)
    stacked = np.array([r.per_class for r in reports], dtype=np.float64)
    seen = (~np.isnan(stacked)).sum(axis=0)
    per_class = np.where(seen > 0, np.nansum(stacked, axis=0) / np.maximum(seen, 1), np.nan)
    timing = {key: float(np.mean([r.timing.get(key, 0.0) for r in reports])) for key in reports[0].timing}
    return Report(
        per_class=per_class.tolist(),
        oa=float(np.mean([r.oa for r in reports])),
        aa=float(np.mean([r.aa for r in reports])),
        kappa=float(np.mean([r.kappa for r in reports])),
        confusion=ConfusionMatrix(counts),
        timing=timing,
        extra=dict(reports[0].extra, runs=len(reports)),
    )
