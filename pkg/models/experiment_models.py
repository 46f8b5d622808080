"""
Experiment configuration model shared by the command line and the compare harness.
"""
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from core.errors import ConfigError

METHODS = (
    "ccnn",
    "rand-compress-3dcnn",
    "bluenoise-compress-3dcnn",
    "rand-compress-svm",
    "bluenoise-compress-svm",
    "original-3dcnn",
    "original-svm",
)


@dataclass
class SynthSpec:
    """Parameters of a generated stand-in scene."""
    n: int = 48
    m: int = 48
    l: int = 8
    classes: int = 5
    seed: int = 3


@dataclass
class ExperimentConfig:
    """Every parameter of one reproducible experiment."""

    # Defaults
    SNAPSHOTS = 5
    BLOCK = 4
    PATCH = 7
    FRACTION = 0.3
    TRANSMITTANCE = 0.5

    scene: Optional[str] = None  # .hsc path; synth is used when missing
    labels: Optional[str] = None  # .pgm path
    synth: SynthSpec = field(default_factory=SynthSpec)
    snapshots: int = SNAPSHOTS
    block: int = BLOCK
    patch: int = PATCH
    fraction: float = FRACTION
    stratified: bool = False
    transmittance: float = TRANSMITTANCE
    noise: str = "none"
    snr_db: float = 40.0
    eta: float = 0.01
    epochs: int = 100
    batch: int = 64
    clip: Optional[float] = None
    activation: str = "relu"
    padding: str = "same"
    init: str = "uniform"
    project_every_step: bool = False
    aperture_eta: Optional[float] = None  # block step size; None follows eta
    refine_epochs: int = 0
    svm_c: float = 10.0
    svm_epochs: int = 200
    svm_eta: float = 0.1
    methods: List[str] = field(default_factory=lambda: list(METHODS[:5]))
    runs: int = 1
    out_dir: str = "."
    seed: int = 0

    def validate(self) -> "ExperimentConfig":
        """Check invariants, naming the flag that carries the bad value."""
        if self.patch < 1 or self.patch % 2 == 0:
            raise ConfigError("--patch", f"must be an odd positive integer, got {self.patch}")
        if self.snapshots < 2:
            raise ConfigError("--snapshots", f"must be >= 2, got {self.snapshots}")
        if self.block < 1:
            raise ConfigError("--block", f"must be >= 1, got {self.block}")
        if not 0.0 < self.fraction < 1.0:
            raise ConfigError("--fraction", f"must lie in (0, 1), got {self.fraction}")
        if not 0.0 < self.transmittance < 1.0:
            raise ConfigError("--transmittance", f"must lie in (0, 1), got {self.transmittance}")
        if self.noise not in ("none", "gaussian"):
            raise ConfigError("--noise", f"unknown noise kind {self.noise!r}")
        if self.eta < 0:
            raise ConfigError("--eta", "must be non-negative")
        if self.epochs < 1:
            raise ConfigError("--epochs", "must be >= 1")
        if self.batch < 1:
            raise ConfigError("--batch", "must be >= 1")
        if self.activation not in ("relu", "tanh"):
            raise ConfigError("--activation", f"unknown activation {self.activation!r}")
        if self.padding not in ("same", "valid"):
            raise ConfigError("--padding", f"unknown padding {self.padding!r}")
        if self.init not in ("uniform", "binary"):
            raise ConfigError("--init", f"unknown block initialisation {self.init!r}")
        if self.aperture_eta is not None and self.aperture_eta < 0:
            raise ConfigError("--aperture-eta", "must be non-negative")
        if self.refine_epochs < 0:
            raise ConfigError("--refine-epochs", "must be >= 0")
        if self.runs < 1:
            raise ConfigError("--runs", "must be >= 1")
        unknown = [name for name in self.methods if name not in METHODS]
        if unknown:
            raise ConfigError("--methods", f"unknown method(s) {', '.join(unknown)}")
        if not self.methods:
            raise ConfigError("--methods", "at least one method is required")
        if (self.scene is None) != (self.labels is None):
            raise ConfigError("--scene", "scene and labels must be given together")
        return self

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "ExperimentConfig":
        data = dict(data)
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError("--config", f"unknown key(s) {', '.join(unknown)}")
        if isinstance(data.get("synth"), dict):
            data["synth"] = SynthSpec(**data["synth"])
        return cls(**data)

    @classmethod
    def from_json(cls, path: str) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError("--config", f"file not found: {path}")
        except json.JSONDecodeError as exc:
            raise ConfigError("--config", f"invalid JSON: {exc}")
        return cls.from_dict(data)

    def with_overrides(self, **overrides) -> "ExperimentConfig":
        """Copy with every non-None override applied."""
        data = self.to_dict()
        for key, value in overrides.items():
            if value is None:
                continue
            if key.startswith("synth_"):
                data["synth"][key[len("synth_"):]] = value
            else:
                data[key] = value
        return ExperimentConfig.from_dict(data)
