"""
Hyperspectral scene data models.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from core.errors import InvalidArgumentError

Coord = Tuple[int, int]


@dataclass
class HyperCube:
    """N x M x L radiance volume of the target scene."""
    values: np.ndarray  # (n, m, l) float64

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise InvalidArgumentError(f"cube must be N x M x L with positive dims, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgumentError("cube values must be finite")

    @property
    def n(self) -> int:
        """Number of rows (first spatial axis)."""
        return self.values.shape[0]

    @property
    def m(self) -> int:
        """Number of columns (dispersion axis)."""
        return self.values.shape[1]

    @property
    def l(self) -> int:
        """Number of spectral bands."""
        return self.values.shape[2]


@dataclass
class LabelMap:
    """Ground-truth class labels, 0 = unlabeled."""
    labels: np.ndarray  # (n, m) int
    classes: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.ndim != 2 or min(self.labels.shape) < 1:
            raise InvalidArgumentError(f"label map must be N x M, got {self.labels.shape}")
        if self.labels.min() < 0 or self.labels.max() > self.classes:
            raise InvalidArgumentError(f"labels must lie in 0..{self.classes}")

    @property
    def n(self) -> int:
        return self.labels.shape[0]

    @property
    def m(self) -> int:
        return self.labels.shape[1]

    @property
    def labeled_count(self) -> int:
        """Number of labeled pixels."""
        return int(np.count_nonzero(self.labels))

    def labeled_coords(self) -> List[Coord]:
        """Labeled pixel coordinates (x = row, y = column) ordered by (y, x)."""
        xs, ys = np.nonzero(self.labels)
        order = np.lexsort((xs, ys))
        return [(int(xs[i]), int(ys[i])) for i in order]


@dataclass
class SplitIndex:
    """Train/test partition of the labeled pixels."""
    train: List[Coord]
    test: List[Coord]
    seed: int
    fraction: float = 0.3
    stratified: bool = False

    def to_dict(self) -> Dict:
        return {
            "seed": self.seed,
            "fraction": self.fraction,
            "stratified": self.stratified,
            "train": [list(c) for c in self.train],
            "test": [list(c) for c in self.test],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "SplitIndex":
        return cls(
            train=[(int(x), int(y)) for x, y in data["train"]],
            test=[(int(x), int(y)) for x, y in data["test"]],
            seed=int(data["seed"]),
            fraction=float(data.get("fraction", 0.3)),
            stratified=bool(data.get("stratified", False)),
        )


@dataclass
class SceneStats:
    """Mean spectral angles between and within classes (radians)."""
    between: float
    within: float
    per_class: Dict[int, int] = field(default_factory=dict)
