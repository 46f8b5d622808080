"""
Measurement and system matrix data models.
"""
from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.sparse

from core.errors import InvalidArgumentError

# Dense export refuses matrices with more entries than this.
DENSE_LIMIT = 2 ** 32


class NoiseKind(Enum):
    """Detector noise model."""
    NONE = "none"
    GAUSSIAN = "gaussian"


@dataclass
class NoiseConfig:
    """Additive detector noise settings."""
    kind: NoiseKind = NoiseKind.NONE
    snr_db: float = 40.0  # signal RMS over noise RMS
    seed: int = 0

    def __post_init__(self):
        self.kind = NoiseKind(self.kind)
        if self.kind == NoiseKind.GAUSSIAN and not np.isfinite(self.snr_db):
            raise InvalidArgumentError("snr_db must be finite for gaussian noise")

    @property
    def sigma_factor(self) -> float:
        """Noise RMS as a fraction of the signal RMS."""
        return 10.0 ** (-self.snr_db / 20.0)


@dataclass
class MeasurementCube:
    """N x M x K stack of detector snapshots."""
    values: np.ndarray  # (n, m, k)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise InvalidArgumentError(f"measurement must be N x M x K, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise InvalidArgumentError("measurement values must be finite")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    @property
    def k(self) -> int:
        return self.values.shape[2]


@dataclass
class SystemMatrix:
    """Sparse DD-CASSI system matrix H stored as (row, col, value) triplets."""
    rows: int
    cols: int
    row_idx: np.ndarray
    col_idx: np.ndarray
    data: np.ndarray

    @property
    def nnz(self) -> int:
        """Structural nonzero count (explicit zeros included)."""
        return int(self.data.size)

    def nnz_per_row(self) -> np.ndarray:
        return np.bincount(self.row_idx, minlength=self.rows)

    def to_sparse(self) -> scipy.sparse.csr_matrix:
        """CSR matrix keeping explicit zeros as structural entries."""
        return scipy.sparse.csr_matrix(
            (self.data, (self.row_idx, self.col_idx)), shape=(self.rows, self.cols)
        )

    def to_dense(self) -> np.ndarray:
        if self.rows * self.cols > DENSE_LIMIT:
            raise InvalidArgumentError(
                f"dense export of {self.rows} x {self.cols} exceeds {DENSE_LIMIT} entries"
            )
        return self.to_sparse().toarray()

    def matvec(self, vec: np.ndarray) -> np.ndarray:
        return self.to_sparse() @ np.asarray(vec, dtype=np.float64)
