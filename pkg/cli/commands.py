"""
Command-line entry point.

Subcommands: synth, aperture, simulate, train, eval, compare, gradcheck.
Exit status: 0 on success, 2 on invalid input, 1 on runtime failure.
"""
import argparse
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from cli.provenance import RunRecord, write_run_json
from core import ccnn_train, net3d
from core.coded_aperture import (
    aperture_difference, bluenoise_set, load_apertures, low_frequency_energy, mean_transmittance,
    random_aperture_set, random_full_set, save_apertures, tile_set, uniform_aperture_set,
)
from core.comparison import compare, load_scene, train_config, write_csv, write_json
from core.database import RunRegistry
from core.datacube import (
    class_signature_angles, generate_synthetic_scene, load_cube, normalize_cube, save_cube, save_labels,
    split_train_test,
)
from core.errors import CcnnError, ConfigError, EmptySplitError, FormatError, InvalidArgumentError
from core.evalbench import (
    compression_ratio, confusion, metrics, prediction_map, render_map, save_map, save_report,
)
from core.forward_model import (
    build_system_matrix, extract_patches, save_measurement, save_triplets, simulate_all,
)
from models.ccnn_models import PatchSample
from models.cube_models import SplitIndex
from models.experiment_models import ExperimentConfig
from models.measurement_models import NoiseConfig

logger = logging.getLogger(__name__)

THREADS_ENV = "CCNN_THREADS"
SPLIT_FILE = "split.json"

# Experiment flags shared by several subcommands: dest -> (flag, type, help)
EXPERIMENT_FLAGS = {
    "snapshots": ("--snapshots", int, "snapshot count K"),
    "block": ("--block", int, "basic block size B"),
    "patch": ("--patch", int, "odd patch size P"),
    "fraction": ("--fraction", float, "training share of labeled pixels"),
    "transmittance": ("--transmittance", float, "open share of random / blue-noise apertures"),
    "noise": ("--noise", str, "detector noise: none or gaussian"),
    "snr_db": ("--snr-db", float, "signal-to-noise ratio in dB for gaussian noise"),
    "eta": ("--eta", float, "SGD learning rate"),
    "epochs": ("--epochs", int, "training epochs"),
    "batch": ("--batch", int, "mini-batch size"),
    "clip": ("--clip", float, "gradient-norm cap"),
    "activation": ("--activation", str, "relu or tanh"),
    "padding": ("--padding", str, "same or valid"),
    "init": ("--init", str, "trainable block initialisation: uniform or binary"),
    "aperture_eta": ("--aperture-eta", float, "step size of the trainable blocks (default: --eta)"),
    "refine_epochs": ("--refine-epochs", int, "weight-only epochs behind the clamped blocks"),
    "svm_c": ("--svm-c", float, "SVM inverse regularisation"),
    "svm_epochs": ("--svm-epochs", int, "SVM epochs"),
    "svm_eta": ("--svm-eta", float, "SVM step size"),
    "runs": ("--runs", int, "repetitions averaged by compare"),
    "out_dir": ("--out-dir", str, "output directory"),
    "seed": ("--seed", int, "random seed"),
    "scene": ("--scene", str, "input cube (.hsc)"),
    "labels": ("--labels", str, "ground-truth labels (.pgm)"),
}
BOOLEAN_FLAGS = {
    "stratified": ("--stratified", "split within every class"),
    "project_every_step": ("--project-every-step", "clamp blocks to [0, 1] after every step"),
}
# Path arguments whose dest differs from their flag
DEST_FLAGS = {"scene_file": "--scene", "labels_out": "--labels"}


# Configuration

def _add_experiment_flags(parser: argparse.ArgumentParser, names: List[str]):
    for name in names:
        if name in BOOLEAN_FLAGS:
            flag, help_text = BOOLEAN_FLAGS[name]
            parser.add_argument(flag, dest=name, action="store_const", const=True, default=None, help=help_text)
        else:
            flag, kind, help_text = EXPERIMENT_FLAGS[name]
            parser.add_argument(flag, dest=name, type=kind, default=None, help=help_text)


def resolve_config(args: argparse.Namespace, **extra) -> ExperimentConfig:
    """Config file (or defaults) overridden by every flag given on the command line."""
    base = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    overrides = {f.name: getattr(args, f.name) for f in fields(ExperimentConfig) if hasattr(args, f.name)}
    if isinstance(overrides.get("methods"), str):
        overrides["methods"] = [m.strip() for m in overrides["methods"].split(",") if m.strip()]
    overrides.update(extra)
    return base.with_overrides(**overrides).validate()


def resolve_threads(args: argparse.Namespace) -> int:
    raw = args.threads if args.threads is not None else os.environ.get(THREADS_ENV, "1")
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError("--threads", f"not an integer: {raw!r}")
    if threads < 1:
        raise ConfigError("--threads", f"must be >= 1, got {threads}")
    return threads


def _noise(config: ExperimentConfig) -> NoiseConfig:
    return NoiseConfig(kind=config.noise, snr_db=config.snr_db, seed=config.seed)


def _parent(path) -> Path:
    parent = Path(path).parent
    parent.mkdir(parents=True, exist_ok=True)
    return parent


def _scene_inputs(config: ExperimentConfig) -> Dict[str, str]:
    return {"scene": config.scene, "labels": config.labels} if config.scene else {}


# Commands

def cmd_synth(args: argparse.Namespace) -> RunRecord:
    """Generate a synthetic scene and its label map."""
    config = resolve_config(args, synth_n=args.synth_n, synth_m=args.synth_m, synth_l=args.synth_l,
                            synth_classes=args.synth_classes, synth_seed=args.synth_seed)
    s = config.synth
    cube, labels = generate_synthetic_scene(s.n, s.m, s.l, s.classes, s.seed)
    _parent(args.out)
    _parent(args.labels_out)
    save_cube(cube, args.out)
    save_labels(labels, args.labels_out)
    stats = class_signature_angles(cube, labels)
    logger.info("class angles: between %.3f rad, within %.3f rad", stats.between, stats.within)
    return RunRecord("synth", config.to_dict(), s.seed, outputs={"scene": args.out, "labels": args.labels_out})


def cmd_aperture(args: argparse.Namespace) -> RunRecord:
    """Generate K coded apertures."""
    config = resolve_config(args)
    k, b, t, seed = config.snapshots, config.block, config.transmittance, config.seed
    full = args.full or args.kind == "bluenoise"
    if full and (args.rows is None or args.cols is None):
        raise ConfigError("--rows" if args.rows is None else "--cols", "required for full-size apertures")
    if args.kind == "random":
        apertures = random_full_set(k, args.rows, args.cols, t, seed) if full else random_aperture_set(k, b, t, seed)
    elif args.kind == "bluenoise":
        apertures = bluenoise_set(k, args.rows, args.cols, t, seed)
    elif full:
        raise ConfigError("--full", "uniform apertures are periodic blocks only")
    else:
        apertures = uniform_aperture_set(k, b, seed)
    _parent(args.out)
    save_apertures(apertures, args.out)
    logger.info("mean transmittance %.4f", mean_transmittance(apertures))
    if full:
        energy = np.mean([low_frequency_energy(p) for p in apertures.pattern])
        logger.info("mean low-frequency energy %.4g", energy)
    record_config = dict(config.to_dict(), kind=args.kind, full=full, rows=args.rows, cols=args.cols)
    return RunRecord("aperture", record_config, seed, outputs={"apertures": args.out})


def cmd_simulate(args: argparse.Namespace) -> RunRecord:
    """Simulate the K snapshots of a scene."""
    config = resolve_config(args)
    threads = resolve_threads(args)
    cube = normalize_cube(load_cube(args.scene_file))
    apertures = load_apertures(args.apertures)
    meas = simulate_all(cube, apertures, _noise(config), threads)
    _parent(args.out)
    save_measurement(meas, args.out)
    outputs = {"measurement": args.out}
    if args.matrix:
        save_triplets(build_system_matrix(apertures, cube.n, cube.m, cube.l), args.matrix)
        outputs["matrix"] = args.matrix
    logger.info("compression ratio %.4f", compression_ratio(apertures.k, cube.l))
    return RunRecord("simulate", config.to_dict(), config.seed,
                     inputs={"scene": args.scene_file, "apertures": args.apertures}, outputs=outputs)


def _write_split(split: SplitIndex, path: Path):
    path.write_text(json.dumps(split.to_dict(), indent=2) + "\n", encoding="utf-8")


def cmd_train(args: argparse.Namespace) -> RunRecord:
    """Train the joint model, or a network behind fixed apertures / on raw bands."""
    config = resolve_config(args)
    threads = resolve_threads(args)
    cube, labels = load_scene(config)
    split = split_train_test(labels, config.fraction, config.seed, config.stratified)
    train, _ = ccnn_train.build_patch_dataset(cube, labels, split, config.patch)
    cfg = train_config(config, config.seed, progress=args.progress)

    out_dir = _parent(args.out)
    split_path = out_dir / SPLIT_FILE
    _write_split(split, split_path)
    inputs = _scene_inputs(config)
    outputs = {"model": args.out, "split": str(split_path)}
    record_config = dict(config.to_dict(), raw=args.raw, apertures=args.apertures)

    if args.apertures or args.raw:
        if args.apertures and args.raw:
            raise ConfigError("--raw", "cannot be combined with --apertures")
        coords = [s.center for s in train]
        if args.raw:
            patches = extract_patches(cube.values, coords, config.patch)
        else:
            inputs["apertures"] = args.apertures
            meas = simulate_all(cube, load_apertures(args.apertures), _noise(config), threads)
            patches = extract_patches(meas.values, coords, config.patch)
        trace: List[float] = []
        net = ccnn_train.train_fixed(list(zip(patches, [s.label for s in train])), cfg,
                                     labels.classes, config.seed, trace)
        net3d.save_network(net, args.out)
        record_config["loss_trace"] = trace
        return RunRecord("train", record_config, config.seed, inputs=inputs, outputs=outputs)

    joint = ccnn_train.train_joint(train, cfg, config.snapshots, config.block, labels.classes,
                                   config.seed, config.init, config.project_every_step,
                                   config.aperture_eta, config.refine_epochs)
    ccnn_train.save_joint(joint, args.out)
    optimized = out_dir / "optimized.apt.json"
    initial = out_dir / "initial.apt.json"
    tiled = out_dir / "optimized_tiled.apt.json"
    difference = out_dir / "difference.json"
    save_apertures(joint.blocks, optimized)
    save_apertures(joint.initial_blocks, initial)
    save_apertures(tile_set(joint.blocks, cube.n, cube.m + cube.l - 1), tiled)
    difference.write_text(json.dumps({"difference": aperture_difference(joint.initial_blocks, joint.blocks).tolist()}),
                          encoding="utf-8")
    outputs.update(optimized=str(optimized), initial=str(initial), tiled=str(tiled), difference=str(difference))
    return RunRecord("train", record_config, config.seed, inputs=inputs, outputs=outputs)


def _load_model(path: str, apertures_path: Optional[str]):
    """(network, apertures or None) from a .ccnn.json or .net.json file."""
    if str(path).endswith(".ccnn.json"):
        joint = ccnn_train.load_joint(path)
        return joint.net, joint.blocks
    net = net3d.load_network(path)
    return net, (load_apertures(apertures_path) if apertures_path else None)


def cmd_eval(args: argparse.Namespace) -> RunRecord:
    """Evaluate a stored model on the test pixels of a stored split."""
    config = resolve_config(args)
    threads = resolve_threads(args)
    cube, labels = load_scene(config)
    try:
        split = SplitIndex.from_dict(json.loads(Path(args.split).read_text(encoding="utf-8")))
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError("split", str(exc))
    net, apertures = _load_model(args.model, args.apertures)

    start = time.perf_counter()
    if apertures is None:
        if net.depth != cube.l:
            raise InvalidArgumentError(f"network depth {net.depth} needs --apertures for a {cube.l}-band scene")
        volume = cube.values
        ratio = 1.0
    else:
        volume = simulate_all(cube, apertures, _noise(config), threads).values
        ratio = compression_ratio(apertures.k, cube.l)
    _, test = ccnn_train.build_patch_dataset(cube, labels, split, net.p)
    test_coords = [s.center for s in test]
    pred = ccnn_train.predict_batch(net, extract_patches(volume, test_coords, net.p).transpose(0, 3, 1, 2)[..., None])
    report = metrics(confusion([s.label for s in test], pred, labels.classes))
    report.timing = {"predict": time.perf_counter() - start}
    report.extra = {"compression_ratio": ratio}
    _parent(args.out)
    save_report(report, args.out)

    inputs = dict(_scene_inputs(config), model=args.model, split=args.split)
    if args.apertures:
        inputs["apertures"] = args.apertures
    outputs = {"report": args.out}
    if args.map:
        coords = labels.labeled_coords()
        every = ccnn_train.predict_batch(net, extract_patches(volume, coords, net.p).transpose(0, 3, 1, 2)[..., None])
        _parent(args.map)
        save_map(render_map(prediction_map(cube.n, cube.m, labels.classes, coords, every)), args.map)
        outputs["map"] = args.map
    return RunRecord("eval", config.to_dict(), config.seed, inputs=inputs, outputs=outputs,
                     timing=dict(report.timing), timed=("report",))


def cmd_compare(args: argparse.Namespace) -> RunRecord:
    """Run every configured method and write compare.csv / compare.json."""
    config = resolve_config(args)
    threads = resolve_threads(args)
    result = compare(config, threads)
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out_dir / "compare.csv", out_dir / "compare.json"
    write_csv(result, csv_path)
    write_json(result, json_path)
    rows = [{"method": m, "oa": r.oa, "aa": r.aa, "kappa": r.kappa, "seconds": r.timing.get("total", 0.0)}
            for m, r in result.rows]
    return RunRecord("compare", config.to_dict(), config.seed, inputs=_scene_inputs(config),
                     outputs={"csv": str(csv_path), "json": str(json_path)},
                     timing={m: r.timing.get("total", 0.0) for m, r in result.rows}, rows=rows,
                     timed=("csv", "json"))


def cmd_gradcheck(args: argparse.Namespace) -> RunRecord:
    """Finite-difference check of a tiny network (with its aperture blocks when --joint)."""
    rng = np.random.default_rng(args.seed)
    net = net3d.build_network(args.snapshots, args.patch, args.classes, args.seed, args.activation)
    sample_cap = args.sample if args.sample > 0 else None
    if args.joint:
        q = args.patch // 2
        sample = PatchSample(rng.random((args.patch, args.patch, args.bands)), (q, q), 1)
        blocks = rng.random((args.snapshots, args.block, args.block))
        report = ccnn_train.joint_grad_check(net, blocks, sample, args.eps, args.tol, sample_cap, args.seed)
    else:
        inputs = rng.normal(size=(args.snapshots, args.patch, args.patch, 1))
        report = net3d.grad_check(net, inputs, 0, args.eps, args.tol, sample=sample_cap, seed=args.seed)
    body = {
        "max_rel_error": report.max_rel_error,
        "group": report.group,
        "index": list(report.index) if report.index else None,
        "checked": report.checked,
        "passed": report.passed,
    }
    _parent(args.out)
    Path(args.out).write_text(json.dumps(body, indent=2) + "\n", encoding="utf-8")
    config = {key: getattr(args, key) for key in
              ("snapshots", "patch", "classes", "bands", "block", "eps", "tol", "sample", "activation", "joint")}
    record = RunRecord("gradcheck", config, args.seed, outputs={"report": args.out})
    if not report.passed:
        logger.error("gradient check failed: relative error %.3g at %s %s (tolerance %g)",
                     report.max_rel_error, report.group, report.index, report.tol)
        record.status = 1
    return record


# Parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON; flags override its values")
    common.add_argument("--threads", type=int, default=None, help=f"worker threads (default: ${THREADS_ENV} or 1)")
    common.add_argument("--run-json", default=None, help="provenance record path (default: next to the output)")
    common.add_argument("--registry", default=None, help="SQLite run registry to append to")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    common.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")

    parser = argparse.ArgumentParser(prog="ccnn", description="Compressive spectral classification toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic scene")
    p.add_argument("--n", dest="synth_n", type=int, default=None)
    p.add_argument("--m", dest="synth_m", type=int, default=None)
    p.add_argument("--l", dest="synth_l", type=int, default=None)
    p.add_argument("--classes", dest="synth_classes", type=int, default=None)
    p.add_argument("--seed", dest="synth_seed", type=int, default=None)
    p.add_argument("--out", required=True, help="cube file (.hsc)")
    p.add_argument("--labels", dest="labels_out", required=True, help="label file (.pgm)")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("aperture", parents=[common], help="generate coded apertures")
    p.add_argument("--kind", choices=("random", "bluenoise", "uniform"), default="random")
    p.add_argument("--full", action="store_true", help="full-size patterns instead of periodic blocks")
    p.add_argument("--rows", type=int, default=None, help="full pattern rows (N)")
    p.add_argument("--cols", type=int, default=None, help="full pattern columns (M + L - 1)")
    p.add_argument("--out", required=True, help="aperture file (.apt.json)")
    _add_experiment_flags(p, ["snapshots", "block", "transmittance", "seed"])
    p.set_defaults(handler=cmd_aperture)

    p = sub.add_parser("simulate", parents=[common], help="simulate DD-CASSI snapshots")
    p.add_argument("--scene", dest="scene_file", required=True, help="input cube (.hsc)")
    p.add_argument("--apertures", required=True)
    p.add_argument("--out", required=True, help="measurement file (.msc)")
    p.add_argument("--matrix", default=None, help="also export the system matrix as text triplets")
    _add_experiment_flags(p, ["noise", "snr_db", "seed"])
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("train", parents=[common], help="train a classifier")
    p.add_argument("--out", required=True, help="model file (.ccnn.json, or .net.json with --apertures / --raw)")
    p.add_argument("--apertures", default=None, help="train behind these fixed apertures")
    p.add_argument("--raw", action="store_true", help="train on raw scene bands")
    p.add_argument("--progress", action="store_true", help="show a progress bar")
    _add_experiment_flags(p, ["scene", "labels", "snapshots", "block", "patch", "fraction", "stratified",
                              "noise", "snr_db", "eta", "epochs", "batch", "clip", "activation", "padding",
                              "init", "project_every_step", "aperture_eta", "refine_epochs", "seed"])
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--split", required=True, help=f"{SPLIT_FILE} written by train")
    p.add_argument("--apertures", default=None, help="apertures of a .net.json model")
    p.add_argument("--out", required=True, help="report file (.json)")
    p.add_argument("--map", default=None, help="classification map (.ppm)")
    _add_experiment_flags(p, ["scene", "labels", "noise", "snr_db", "seed"])
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("compare", parents=[common], help="compare classification methods")
    p.add_argument("--methods", default=None, help="comma-separated method names")
    _add_experiment_flags(p, list(EXPERIMENT_FLAGS) + list(BOOLEAN_FLAGS))
    p.set_defaults(handler=cmd_compare)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--snapshots", type=int, default=2)
    p.add_argument("--patch", type=int, default=3)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--bands", type=int, default=3)
    p.add_argument("--block", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--sample", type=int, default=20, help="entries per parameter group (0 = all)")
    p.add_argument("--activation", choices=("relu", "tanh"), default="relu")
    p.add_argument("--joint", action="store_true", help="include aperture block entries")
    p.add_argument("--out", default="gradcheck.json")
    p.set_defaults(handler=cmd_gradcheck)
    return parser


def _configure_logging(args: argparse.Namespace):
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger().setLevel(level)


def _flag_for(args: argparse.Namespace, filename) -> Optional[str]:
    """Flag whose value is the given path, if it came from the command line."""
    if filename is None:
        return None
    for dest, value in vars(args).items():
        if isinstance(value, str) and Path(value) == Path(filename):
            return DEST_FLAGS.get(dest, "--" + dest.replace("_", "-"))
    return None


def _register(path: str, record: RunRecord):
    registry = RunRegistry(path)
    run_id = registry.create_run(record.command, record.seed, record.config)
    registry.add_artifacts(run_id, record.artifacts())
    for row in record.rows:
        registry.add_report(run_id, row["method"], row["oa"], row["aa"], row["kappa"], row["seconds"])
    logger.info("registered run %d in %s", run_id, path)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging(args)
    try:
        start = time.perf_counter()
        record = args.handler(args)
        record.timing.setdefault("total", time.perf_counter() - start)
        write_run_json(record, args.run_json)
        if args.registry:
            _register(args.registry, record)
        return record.status
    except FileNotFoundError as exc:
        flag = _flag_for(args, exc.filename)
        if flag:
            logger.error("%s: file not found: %s", flag, exc.filename)
        else:
            logger.error("%s: file not found", exc.filename)
        return 2
    except (ConfigError, InvalidArgumentError, FormatError, EmptySplitError) as exc:
        logger.error("%s", exc)
        return 2
    except (CcnnError, OSError) as exc:
        logger.error("%s failed: %s", args.command, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
