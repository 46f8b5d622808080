"""
3D-CNN parameter and training configuration models.
"""
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from core.errors import InvalidArgumentError


class Activation(Enum):
    """Nonlinearity applied after every convolution."""
    RELU = "relu"
    TANH = "tanh"


class Padding(Enum):
    """Convolution border rule."""
    SAME = "same"
    VALID = "valid"


@dataclass
class ConvLayer:
    """One 3D convolution: kernels (filters, k1, k2, k3, in_channels) and biases."""
    kernels: np.ndarray
    biases: np.ndarray


@dataclass
class NetworkParams:
    """All weights of the seven-layer 3D-CNN."""
    depth: int  # input depth (K snapshots, or L bands for the original-cube methods)
    p: int
    classes: int
    conv: List[ConvLayer]
    fc_weights: np.ndarray  # (classes, flattened)
    fc_biases: np.ndarray  # (classes,)
    activation: Activation = Activation.RELU
    padding: Padding = Padding.SAME
    version: int = 0  # bumped on every in-place update

    # Per-layer filter counts and (snapshot, row, col) kernel sizes.
    FILTERS = (20, 20, 35, 35, 35, 35)
    KERNELS = ((3, 3, 3), (3, 1, 1), (3, 3, 3), (3, 1, 1), (3, 1, 1), (2, 1, 1))

    @property
    def flat_size(self) -> int:
        return self.fc_weights.shape[1]

    def groups(self) -> Iterator[Tuple[str, np.ndarray]]:
        """Yield (name, array) for every parameter group in a fixed order."""
        for i, layer in enumerate(self.conv):
            yield f"conv{i + 1}.kernels", layer.kernels
            yield f"conv{i + 1}.biases", layer.biases
        yield "fc.weights", self.fc_weights
        yield "fc.biases", self.fc_biases

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            depth=self.depth, p=self.p, classes=self.classes,
            conv=[ConvLayer(c.kernels.copy(), c.biases.copy()) for c in self.conv],
            fc_weights=self.fc_weights.copy(), fc_biases=self.fc_biases.copy(),
            activation=self.activation, padding=self.padding,
        )

    def topology(self) -> Dict:
        return {
            "k": self.depth,
            "p": self.p,
            "classes": self.classes,
            "activation": self.activation.value,
            "padding": self.padding.value,
        }


@dataclass
class NetworkGrads:
    """Gradients mirroring NetworkParams, plus the gradient w.r.t. the input batch."""
    conv: List[ConvLayer]
    fc_weights: np.ndarray
    fc_biases: np.ndarray
    d_input: Optional[np.ndarray] = None

    def groups(self) -> Iterator[Tuple[str, np.ndarray]]:
        for i, layer in enumerate(self.conv):
            yield f"conv{i + 1}.kernels", layer.kernels
            yield f"conv{i + 1}.biases", layer.biases
        yield "fc.weights", self.fc_weights
        yield "fc.biases", self.fc_biases

    def global_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for _, g in self.groups())))


@dataclass
class TrainConfig:
    """Plain SGD settings."""

    # Defaults
    ETA = 0.01
    EPOCHS = 100
    BATCH = 64

    eta: float = ETA
    epochs: int = EPOCHS
    batch: int = BATCH
    seed: int = 0
    patch_p: int = 7
    clip: Optional[float] = None  # gradient-norm cap
    activation: Activation = Activation.RELU
    padding: Padding = Padding.SAME
    progress: bool = False

    def __post_init__(self):
        self.activation = Activation(self.activation)
        self.padding = Padding(self.padding)
        if not self.eta >= 0:
            raise InvalidArgumentError("eta must be non-negative")
        if self.epochs < 1:
            raise InvalidArgumentError("epochs must be >= 1")
        if self.batch < 1:
            raise InvalidArgumentError("batch must be >= 1")
        if self.patch_p < 1 or self.patch_p % 2 == 0:
            raise InvalidArgumentError("patch_p must be an odd positive integer")
        if self.clip is not None and not self.clip > 0:
            raise InvalidArgumentError("clip must be positive when given")

    def to_dict(self) -> Dict:
        return {
            "eta": self.eta,
            "epochs": self.epochs,
            "batch": self.batch,
            "seed": self.seed,
            "patch_p": self.patch_p,
            "clip": self.clip,
            "activation": self.activation.value,
            "padding": self.padding.value,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "TrainConfig":
        keys = ("eta", "epochs", "batch", "seed", "patch_p", "clip", "activation", "padding")
        return cls(**{k: data[k] for k in keys if k in data})
