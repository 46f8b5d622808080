"""
Evaluation data models: confusion matrices, reports, and the SVM baseline.
"""
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np


@dataclass
class ConfusionMatrix:
    """Mc x Mc counts, rows = truth, columns = prediction."""
    counts: np.ndarray

    @property
    def classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass
class Report:
    """Accuracy summary of one evaluated method."""
    per_class: List[float]  # NaN for classes absent from the test split
    oa: float
    aa: float
    kappa: float
    confusion: ConfusionMatrix
    timing: Dict[str, float] = field(default_factory=dict)
    extra: Dict = field(default_factory=dict)

    def to_dict(self) -> Dict:
        data = {
            "per_class": [None if np.isnan(v) else float(v) for v in self.per_class],
            "oa": float(self.oa),
            "aa": float(self.aa),
            "kappa": float(self.kappa),
            "confusion": self.confusion.counts.astype(int).tolist(),
            "timing": dict(self.timing),
        }
        data.update(self.extra)
        return data


@dataclass
class SvmConfig:
    """Linear one-vs-rest SVM training settings."""
    c: float = 10.0  # inverse regularisation strength
    epochs: int = 200
    eta: float = 0.1
    seed: int = 0
    batch: int = 0  # 0 = full batch

    def to_dict(self) -> Dict:
        return {"c": self.c, "epochs": self.epochs, "eta": self.eta,
                "seed": self.seed, "batch": self.batch}


@dataclass
class SvmModel:
    """One weight vector and bias per class over standardized features."""
    classes: List[int]
    weights: np.ndarray  # (classes, features)
    biases: np.ndarray  # (classes,)
    mean: np.ndarray
    scale: np.ndarray
