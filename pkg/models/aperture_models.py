"""
Coded aperture data models.
"""
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional

import numpy as np

from core.errors import InvalidArgumentError


class ApertureMode(Enum):
    """How an aperture set stores its transmittance."""
    PERIODIC = "periodic"
    FULL = "full"


@dataclass(frozen=True)
class BasicBlock:
    """B x B transmittance tile repeated cyclically over the aperture."""
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 2 or values.shape[0] != values.shape[1] or values.shape[0] < 1:
            raise InvalidArgumentError(f"basic block must be B x B with B >= 1, got {values.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def b(self) -> int:
        """Block side length."""
        return self.values.shape[0]


@dataclass(frozen=True)
class CodedApertureSet:
    """K coded apertures, either periodic blocks or stored full patterns."""
    blocks: List[BasicBlock] = field(default_factory=list)
    mode: ApertureMode = ApertureMode.PERIODIC
    pattern: Optional[np.ndarray] = None  # (k, n, m + l - 1) in full mode

    def __post_init__(self):
        if self.mode == ApertureMode.PERIODIC:
            if not self.blocks:
                raise InvalidArgumentError("periodic aperture set needs at least one block")
            if len({blk.b for blk in self.blocks}) != 1:
                raise InvalidArgumentError("all basic blocks must share the same size B")
            object.__setattr__(self, "blocks", list(self.blocks))
        else:
            if self.pattern is None:
                raise InvalidArgumentError("full-mode aperture set needs a stored pattern")
            pattern = np.array(self.pattern, dtype=np.float64)
            if pattern.ndim != 3 or min(pattern.shape) < 1:
                raise InvalidArgumentError(f"full pattern must be K x N x cols, got {pattern.shape}")
            pattern.setflags(write=False)
            object.__setattr__(self, "pattern", pattern)

    @property
    def k(self) -> int:
        """Snapshot count."""
        if self.mode == ApertureMode.PERIODIC:
            return len(self.blocks)
        return self.pattern.shape[0]

    @property
    def b(self) -> Optional[int]:
        """Block side length (periodic mode only)."""
        return self.blocks[0].b if self.mode == ApertureMode.PERIODIC else None

    @property
    def is_periodic(self) -> bool:
        return self.mode == ApertureMode.PERIODIC

    def stack(self) -> np.ndarray:
        """Blocks as a (K, B, B) array copy."""
        if not self.is_periodic:
            raise InvalidArgumentError("full-mode aperture set has no basic blocks")
        return np.stack([blk.values for blk in self.blocks]).copy()

    @classmethod
    def from_stack(cls, blocks: np.ndarray) -> "CodedApertureSet":
        """Build a periodic set from a (K, B, B) array."""
        blocks = np.asarray(blocks, dtype=np.float64)
        if blocks.ndim != 3:
            raise InvalidArgumentError(f"block stack must be K x B x B, got {blocks.shape}")
        return cls(blocks=[BasicBlock(blk) for blk in blocks])
