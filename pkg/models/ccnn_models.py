"""
Joint coded-aperture / network data models.
"""
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from models.aperture_models import CodedApertureSet
from models.network_models import NetworkParams


@dataclass
class PatchSample:
    """Zero-padded P x P x L scene patch centred on a labeled pixel."""
    scene_patch: np.ndarray
    center: Tuple[int, int]  # (x0 = row, y0 = column)
    label: int  # 1..Mc

    @property
    def p(self) -> int:
        return self.scene_patch.shape[0]

    @property
    def class_index(self) -> int:
        """Zero-based class index fed to the network."""
        return self.label - 1


@dataclass
class JointParams:
    """Network weights and periodic aperture blocks trained together."""
    net: NetworkParams
    blocks: CodedApertureSet
    loss_trace: List[float] = field(default_factory=list)
    config: Dict = field(default_factory=dict)
    initial_blocks: Optional[CodedApertureSet] = None

    @property
    def k(self) -> int:
        return self.blocks.k
