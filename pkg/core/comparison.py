"""
Method comparison harness: runs every configured classifier on a shared split.
"""
import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from core import ccnn_train
from core.coded_aperture import bluenoise_set, random_full_set
from core.datacube import generate_synthetic_scene, load_cube, load_labels, normalize_cube, split_train_test
from core.evalbench import compression_ratio, confusion, mean_reports, metrics, svm_predict, svm_train
from core.forward_model import extract_patches, simulate_all
from models.aperture_models import CodedApertureSet
from models.cube_models import HyperCube, LabelMap
from models.eval_models import Report, SvmConfig
from models.experiment_models import ExperimentConfig
from models.measurement_models import NoiseConfig
from models.network_models import TrainConfig

logger = logging.getLogger(__name__)

CSV_HEADER = ("method", "oa", "aa", "kappa", "seconds")


@dataclass
class CompareResult:
    """Averaged report per method, in configuration order."""
    rows: List[Tuple[str, Report]] = field(default_factory=list)
    config: Dict = field(default_factory=dict)

    def methods(self) -> List[str]:
        return [name for name, _ in self.rows]


def load_scene(config: ExperimentConfig) -> Tuple[HyperCube, LabelMap]:
    """Scene and labels from files (normalised to a maximum of 1) or a synthetic stand-in."""
    if config.scene:
        cube = normalize_cube(load_cube(config.scene))
        return cube, load_labels(config.labels)
    s = config.synth
    return generate_synthetic_scene(s.n, s.m, s.l, s.classes, s.seed)


def train_config(config: ExperimentConfig, seed: int, progress: bool = False) -> TrainConfig:
    return TrainConfig(eta=config.eta, epochs=config.epochs, batch=config.batch, seed=seed,
                       patch_p=config.patch, clip=config.clip, activation=config.activation,
                       padding=config.padding, progress=progress)


class _Run:
    """One seeded repetition: a split, its patches and the shared simulation settings."""

    def __init__(self, config: ExperimentConfig, cube: HyperCube, labels: LabelMap, seed: int, threads: int):
        self.config = config
        self.cube = cube
        self.labels = labels
        self.seed = seed
        self.threads = threads
        split = split_train_test(labels, config.fraction, seed, config.stratified)
        self.train, self.test = ccnn_train.build_patch_dataset(cube, labels, split, config.patch)
        self.train_coords = [s.center for s in self.train]
        self.test_coords = [s.center for s in self.test]
        self.train_labels = np.array([s.label for s in self.train])
        self.test_labels = np.array([s.label for s in self.test])
        self.noise = NoiseConfig(kind=config.noise, snr_db=config.snr_db, seed=seed)

    def measured(self, apertures: CodedApertureSet) -> Tuple[np.ndarray, np.ndarray]:
        """Train and test measurement patches (S, P, P, K) under the given apertures."""
        meas = simulate_all(self.cube, apertures, self.noise, self.threads)
        p = self.config.patch
        return extract_patches(meas.values, self.train_coords, p), extract_patches(meas.values, self.test_coords, p)

    def raw(self) -> Tuple[np.ndarray, np.ndarray]:
        return (np.stack([s.scene_patch for s in self.train]),
                np.stack([s.scene_patch for s in self.test]))

    def fixed_apertures(self, source: str) -> CodedApertureSet:
        c = self.config
        cols = self.cube.m + self.cube.l - 1
        if source == "rand":
            return random_full_set(c.snapshots, self.cube.n, cols, c.transmittance, self.seed)
        return bluenoise_set(c.snapshots, self.cube.n, cols, c.transmittance, self.seed)


def _cnn(run: _Run, train_x: np.ndarray, test_x: np.ndarray) -> Tuple[np.ndarray, float]:
    cfg = train_config(run.config, run.seed)
    start = time.perf_counter()
    net = ccnn_train.train_fixed(list(zip(train_x, run.train_labels)), cfg, run.labels.classes, run.seed)
    trained = time.perf_counter() - start
    return ccnn_train.predict_batch(net, test_x.transpose(0, 3, 1, 2)[..., None]), trained


def _svm(run: _Run, train_x: np.ndarray, test_x: np.ndarray) -> Tuple[np.ndarray, float]:
    c = run.config
    cfg = SvmConfig(c=c.svm_c, epochs=c.svm_epochs, eta=c.svm_eta, seed=run.seed)
    start = time.perf_counter()
    model = svm_train(train_x.reshape(len(train_x), -1), run.train_labels, cfg)
    trained = time.perf_counter() - start
    return svm_predict(model, test_x.reshape(len(test_x), -1)), trained


def _ccnn(run: _Run) -> Tuple[np.ndarray, float]:
    c = run.config
    start = time.perf_counter()
    joint = ccnn_train.train_joint(run.train, train_config(c, run.seed), c.snapshots, c.block,
                                   run.labels.classes, run.seed, c.init, c.project_every_step,
                                   c.aperture_eta, c.refine_epochs)
    trained = time.perf_counter() - start
    _, test_x = run.measured(joint.blocks)
    return ccnn_train.predict_batch(joint.net, test_x.transpose(0, 3, 1, 2)[..., None]), trained


def run_method(run: _Run, method: str) -> Report:
    """Train and evaluate one method on a prepared run."""
    start = time.perf_counter()
    l = run.cube.l
    ratio = compression_ratio(run.config.snapshots, l)
    if method == "ccnn":
        pred, trained = _ccnn(run)
    elif method.startswith("original-"):
        train_x, test_x = run.raw()
        ratio = 1.0
        pred, trained = (_cnn if method.endswith("3dcnn") else _svm)(run, train_x, test_x)
    else:
        source = method.split("-", 1)[0]
        train_x, test_x = run.measured(run.fixed_apertures(source))
        pred, trained = (_cnn if method.endswith("3dcnn") else _svm)(run, train_x, test_x)
    total = time.perf_counter() - start

    report = metrics(confusion(run.test_labels, pred, run.labels.classes))
    report.timing = {"train": trained, "predict": total - trained, "total": total}
    report.extra = {"method": method, "compression_ratio": ratio, "seed": run.seed}
    logger.info("%s (seed %d): OA %.4f AA %.4f kappa %.4f in %.1fs",
                method, run.seed, report.oa, report.aa, report.kappa, total)
    return report


def compare(config: ExperimentConfig, threads: int = 1) -> CompareResult:
    """
    Evaluate every configured method over config.runs seeded splits.

    Methods run one after another; run r uses seed config.seed + r for the
    split, the apertures and all training.
    """
    config.validate()
    cube, labels = load_scene(config)
    per_method: Dict[str, List[Report]] = {name: [] for name in config.methods}
    for r in range(config.runs):
        run = _Run(config, cube, labels, config.seed + r, threads)
        for method in config.methods:
            per_method[method].append(run_method(run, method))
    result = CompareResult(config=config.to_dict())
    for method in config.methods:
        report = mean_reports(per_method[method])
        report.extra["seed"] = config.seed
        result.rows.append((method, report))
    return result


def write_csv(result: CompareResult, path):
    """One row per method: method,oa,aa,kappa,seconds."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for method, report in result.rows:
            writer.writerow([method, f"{report.oa:.6f}", f"{report.aa:.6f}", f"{report.kappa:.6f}",
                             f"{report.timing.get('total', 0.0):.3f}"])
    logger.info("wrote %d comparison rows to %s", len(result.rows), path)


def write_json(result: CompareResult, path):
    body = {
        "config": result.config,
        "methods": [dict(report.to_dict(), method=method) for method, report in result.rows],
    }
    Path(path).write_text(json.dumps(body, indent=2) + "\n", encoding="utf-8")
