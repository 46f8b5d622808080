"""
Provenance records (run.json) for command-line runs.
"""
import csv
import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

logger = logging.getLogger(__name__)

RUN_FILE = "run.json"
TIMING_KEY = "timing"
TIMING_COLUMN = "seconds"


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _without_timing(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _without_timing(v) for k, v in value.items() if k != TIMING_KEY}
    if isinstance(value, list):
        return [_without_timing(v) for v in value]
    return value


def stable_sha256(path) -> str:
    """
    Checksum of a report file with its wall-clock fields left out.

    JSON reports drop every "timing" object; CSV tables drop the "seconds" column.
    """
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".csv":
        rows = list(csv.reader(io.StringIO(text)))
        keep = [i for i, name in enumerate(rows[0]) if name != TIMING_COLUMN] if rows else []
        canonical = "\n".join(",".join(row[i] for i in keep) for row in rows)
    else:
        canonical = json.dumps(_without_timing(json.loads(text)), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass
class RunRecord:
    """Everything needed to reproduce one command's outputs."""
    command: str
    config: Dict
    seed: int
    inputs: Dict[str, str] = field(default_factory=dict)  # role -> path
    outputs: Dict[str, str] = field(default_factory=dict)
    timing: Dict[str, float] = field(default_factory=dict)
    rows: List[Dict] = field(default_factory=list)  # compare rows for the registry
    timed: Tuple[str, ...] = ()  # output roles checksummed without their timing fields
    status: int = 0  # process exit status

    @property
    def primary_output(self) -> Optional[str]:
        return next(iter(self.outputs.values()), None)

    def artifacts(self) -> List[Dict]:
        """Role, path and checksum of every input and output, inputs first."""
        entries = []
        for kind, paths in (("input", self.inputs), ("output", self.outputs)):
            for role, path in paths.items():
                timed = kind == "output" and role in self.timed
                digest = stable_sha256(path) if timed else sha256_file(path)
                entries.append({"role": f"{kind}:{role}", "path": str(path), "sha256": digest})
        return entries

    def to_dict(self) -> Dict:
        return {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "artifacts": self.artifacts(),
            "timing": self.timing,
        }


def default_run_path(record: RunRecord) -> Path:
    """run.json next to the primary output (current directory when there is none)."""
    primary = record.primary_output
    return (Path(primary).parent if primary else Path(".")) / RUN_FILE


def write_run_json(record: RunRecord, path=None) -> Path:
    """Write the record with sorted keys so reruns differ only in timing."""
    path = Path(path) if path else default_run_path(record)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("wrote provenance record to %s", path)
    return path
