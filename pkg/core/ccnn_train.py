"""
Joint coded-aperture / 3D-CNN training.

The periodic coded aperture acts as a pixel-wise linear layer in front of the
network; its block entries are trained with the network weights by plain SGD.
"""
import json
import logging
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from core import net3d
from core.coded_aperture import (
    aperture_from_dict, aperture_to_dict, clamp_blocks, random_aperture_set,
    underdetermined_warning, uniform_aperture_set,
)
from core.errors import EmptySplitError, FormatError, InvalidArgumentError, NonFiniteError
from core.forward_model import padded_volume, patch_forward
from models.aperture_models import CodedApertureSet
from models.ccnn_models import JointParams, PatchSample
from models.cube_models import HyperCube, LabelMap, SplitIndex
from models.network_models import NetworkParams, TrainConfig

logger = logging.getLogger(__name__)

# Independent random streams derived from one training seed.
BLOCK_STREAM = 1
SHUFFLE_STREAM = 2
REFINE_STREAM = 3
PREDICT_BATCH = 256

Model = Union[JointParams, Tuple[NetworkParams, CodedApertureSet]]


def _stream_seed(seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


# Aperture layer

def _code_indices(centers: np.ndarray, p: int, l: int, b: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Block indices seen by every patch.

    Returns:
        rows (S, P) = (x0 + a - q) mod B and cols (S, P, L) = (y0 + c - q + band) mod B
    """
    q = p // 2
    offsets = np.arange(p) - q
    rows = np.mod(centers[:, 0, None] + offsets[None, :], b)
    cols = np.mod(centers[:, 1, None, None] + offsets[None, :, None] + np.arange(l)[None, None, :], b)
    return rows, cols


def _measure(scenes: np.ndarray, rows: np.ndarray, cols: np.ndarray, blocks: np.ndarray) -> np.ndarray:
    """Measurement patches (S, K, P, P) of scene patches (S, P, P, L); bands summed in ascending order."""
    codes = blocks[:, rows[:, :, None, None], cols[:, None, :, :]]
    out = scenes[None, ..., 0] * codes[..., 0]
    for band in range(1, scenes.shape[3]):
        out = out + scenes[None, ..., band] * codes[..., band]
    return out.transpose(1, 0, 2, 3)


def _block_grad(scenes: np.ndarray, rows: np.ndarray, cols: np.ndarray, d_meas: np.ndarray,
                shape: Tuple[int, int, int]) -> np.ndarray:
    """Accumulate dL/dC over a batch in fixed sample order."""
    k = shape[0]
    contrib = d_meas[..., None] * scenes[:, None, :, :, :]  # (S, K, P, P, L)
    grad = np.zeros(shape)
    np.add.at(grad, (np.arange(k)[None, :, None, None, None],
                     rows[:, None, :, None, None],
                     cols[:, None, None, :, :]), contrib)
    return grad


def _require_periodic(blocks: CodedApertureSet):
    if not blocks.is_periodic:
        raise InvalidArgumentError("the aperture layer needs periodic basic blocks")


def aperture_layer_forward(sample: PatchSample, blocks: CodedApertureSet) -> np.ndarray:
    """P x P x K measurement patch of one sample."""
    _require_periodic(blocks)
    return patch_forward(sample.scene_patch, blocks, *sample.center)


def aperture_layer_backward(sample: PatchSample, d_meas: np.ndarray, b: int) -> np.ndarray:
    """
    Gradient over block entries for one sample.

    Args:
        sample: Patch the layer was applied to
        d_meas: Loss gradient w.r.t. the P x P x K measurement patch
        b: Block size

    Returns:
        (K, B, B) gradient
    """
    d_meas = np.asarray(d_meas, dtype=np.float64)
    p, _, l = sample.scene_patch.shape
    if d_meas.ndim != 3 or d_meas.shape[:2] != (p, p):
        raise InvalidArgumentError(f"measurement gradient must be {p} x {p} x K, got {d_meas.shape}")
    rows, cols = _code_indices(np.array([sample.center]), p, l, b)
    k = d_meas.shape[2]
    return _block_grad(sample.scene_patch[None], rows, cols, d_meas.transpose(2, 0, 1)[None], (k, b, b))


# Datasets

def _samples(cube: HyperCube, labels: LabelMap, coords, p: int) -> List[PatchSample]:
    padded = padded_volume(cube.values, p)
    return [PatchSample(padded[x:x + p, y:y + p].copy(), (x, y), int(labels.labels[x, y]))
            for x, y in sorted(coords, key=lambda c: (c[1], c[0]))]


def build_patch_dataset(cube: HyperCube, labels: LabelMap, split: SplitIndex,
                        p: int) -> Tuple[List[PatchSample], List[PatchSample]]:
    """Zero-padded scene patches for every train and test pixel, ordered by (y, x)."""
    if p < 1 or p % 2 == 0:
        raise InvalidArgumentError(f"patch size must be odd and positive, got {p}")
    if (cube.n, cube.m) != (labels.n, labels.m):
        raise InvalidArgumentError(f"cube {cube.n}x{cube.m} and labels {labels.n}x{labels.m} differ in size")
    if not split.train or not split.test:
        raise EmptySplitError(f"split has {len(split.train)} train and {len(split.test)} test pixels")
    return _samples(cube, labels, split.train, p), _samples(cube, labels, split.test, p)


def _stack(samples: Sequence[PatchSample], classes: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    shapes = {s.scene_patch.shape for s in samples}
    if len(shapes) != 1:
        raise InvalidArgumentError(f"samples differ in patch shape: {sorted(shapes)}")
    targets = np.array([s.class_index for s in samples])
    if targets.min() < 0 or targets.max() >= classes:
        raise InvalidArgumentError(f"sample labels must lie in 1..{classes}")
    scenes = np.stack([s.scene_patch for s in samples])
    centers = np.array([s.center for s in samples], dtype=np.int64)
    return scenes, centers, targets


# Training

def _run_epochs(count: int, cfg: TrainConfig, seed: int, step: Callable[[np.ndarray], float],
                desc: str, epochs: Optional[int] = None, stream: int = SHUFFLE_STREAM) -> List[float]:
    """Seeded shuffled mini-batch epochs; returns the per-epoch mean loss."""
    epochs = cfg.epochs if epochs is None else epochs
    rng = np.random.default_rng(_stream_seed(seed, stream))
    trace = []
    for epoch in tqdm(range(epochs), desc=desc, disable=not cfg.progress):
        order = rng.permutation(count)
        total = 0.0
        for batch, start in enumerate(range(0, count, cfg.batch)):
            idx = order[start:start + cfg.batch]
            try:
                value = step(idx)
            except NonFiniteError as exc:
                raise NonFiniteError("training diverged", epoch=epoch, batch=batch, group=exc.group)
            logger.debug("%s epoch %d batch %d: loss %.6f", desc, epoch, batch, value)
            total += value * len(idx)
        trace.append(total / count)
        logger.info("%s epoch %d/%d: loss %.6f", desc, epoch + 1, epochs, trace[-1])
    return trace


def _checked_loss(logits: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray]:
    value, dlogits = net3d.batch_loss(net3d.softmax(logits), targets)
    if not np.isfinite(value):
        raise NonFiniteError("non-finite loss")
    return value, dlogits


def train_joint(train: Sequence[PatchSample], cfg: TrainConfig, k: int, b: int, classes: int,
                seed: int, init: str = "uniform", project_every_step: bool = False,
                aperture_eta: Optional[float] = None, refine_epochs: int = 0) -> JointParams:
    """
    Train network weights and K periodic B x B blocks end to end.

    Blocks are clamped to [0, 1] once after the last epoch (every step as
    well when project_every_step is set). With refine_epochs > 0 the
    network then keeps training behind the clamped, frozen blocks.

    Args:
        train: Training scene patches
        cfg: SGD settings; cfg.patch_p must equal the sample patch size
        k: Snapshot count
        b: Block size
        classes: Class count
        seed: Seed for weights, block initialisation and shuffling
        init: "uniform" (greyscale [0, 1]) or "binary" (Bernoulli 0.5)
        aperture_eta: Step size of the block entries; None uses cfg.eta
        refine_epochs: Weight-only epochs run after the final clamp
    """
    if not train:
        raise EmptySplitError("no training samples")
    scenes, centers, targets = _stack(train, classes)
    p, l = scenes.shape[1], scenes.shape[3]
    if p != cfg.patch_p:
        raise InvalidArgumentError(f"samples have patch size {p}, config says {cfg.patch_p}")
    if b < 1:
        raise InvalidArgumentError(f"block size must be >= 1, got {b}")
    block_eta = cfg.eta if aperture_eta is None else aperture_eta
    if not block_eta >= 0:
        raise InvalidArgumentError(f"aperture step size must be non-negative, got {aperture_eta}")
    if refine_epochs < 0:
        raise InvalidArgumentError(f"refine_epochs must be >= 0, got {refine_epochs}")
    underdetermined_warning(k, b, len(train))

    net = net3d.build_network(k, p, classes, seed, cfg.activation, cfg.padding)
    block_seed = _stream_seed(seed, BLOCK_STREAM)
    if init == "uniform":
        initial = uniform_aperture_set(k, b, block_seed)
    elif init == "binary":
        initial = random_aperture_set(k, b, 0.5, block_seed)
    else:
        raise InvalidArgumentError(f"unknown block initialisation {init!r}")
    blocks = initial.stack()
    rows, cols = _code_indices(centers, p, l, b)

    def step(idx: np.ndarray) -> float:
        nonlocal blocks
        meas = _measure(scenes[idx], rows[idx], cols[idx], blocks)
        logits, cache = net3d.forward(net, meas[..., None])
        value, dlogits = _checked_loss(logits, targets[idx])
        grads = net3d.backward(net, cache, dlogits)
        d_blocks = _block_grad(scenes[idx], rows[idx], cols[idx], grads.d_input[..., 0], blocks.shape)
        if not np.all(np.isfinite(d_blocks)):
            raise NonFiniteError("non-finite gradient", group="blocks")
        if cfg.clip is not None:
            net3d.clip_gradients(grads, cfg.clip, extra=[d_blocks])
        net3d.sgd_step(net, grads, cfg.eta)
        blocks = blocks - block_eta * d_blocks
        if project_every_step:
            blocks = clamp_blocks(CodedApertureSet.from_stack(blocks)).stack()
        return value

    trace = _run_epochs(len(train), cfg, seed, step, "joint")
    final = clamp_blocks(CodedApertureSet.from_stack(blocks))

    if refine_epochs:
        frozen = final.stack()

        def refine(idx: np.ndarray) -> float:
            meas = _measure(scenes[idx], rows[idx], cols[idx], frozen)
            logits, cache = net3d.forward(net, meas[..., None])
            value, dlogits = _checked_loss(logits, targets[idx])
            grads = net3d.backward(net, cache, dlogits)
            if cfg.clip is not None:
                net3d.clip_gradients(grads, cfg.clip)
            net3d.sgd_step(net, grads, cfg.eta)
            return value

        trace += _run_epochs(len(train), cfg, seed, refine, "refine", refine_epochs, REFINE_STREAM)

    config = dict(cfg.to_dict(), k=k, b=b, classes=classes, seed=seed, init=init,
                  project_every_step=project_every_step, aperture_eta=block_eta,
                  refine_epochs=refine_epochs)
    return JointParams(net=net, blocks=final, loss_trace=trace, config=config, initial_blocks=initial)


def _measured_inputs(train_measured: Sequence[Tuple[np.ndarray, int]], classes: int) -> Tuple[np.ndarray, np.ndarray]:
    if not train_measured:
        raise EmptySplitError("no training samples")
    shapes = {np.shape(patch) for patch, _ in train_measured}
    if len(shapes) != 1:
        raise InvalidArgumentError(f"patches differ in shape: {sorted(shapes)}")
    inputs = np.stack([np.asarray(patch, dtype=np.float64).transpose(2, 0, 1) for patch, _ in train_measured])
    targets = np.array([label - 1 for _, label in train_measured])
    if targets.min() < 0 or targets.max() >= classes:
        raise InvalidArgumentError(f"labels must lie in 1..{classes}")
    return inputs[..., None], targets


def train_fixed(train_measured: Sequence[Tuple[np.ndarray, int]], cfg: TrainConfig, classes: int,
                seed: int, trace: Optional[List[float]] = None) -> NetworkParams:
    """
    Train the network on precomputed P x P x D patches (aperture frozen, or raw cube bands).

    Args:
        train_measured: (patch, label) pairs with labels in 1..classes
        trace: When given, receives the per-epoch loss
    """
    inputs, targets = _measured_inputs(train_measured, classes)
    depth, p = inputs.shape[1], inputs.shape[2]
    if p != cfg.patch_p:
        raise InvalidArgumentError(f"patches have size {p}, config says {cfg.patch_p}")
    net = net3d.build_network(depth, p, classes, seed, cfg.activation, cfg.padding)

    def step(idx: np.ndarray) -> float:
        logits, cache = net3d.forward(net, inputs[idx])
        value, dlogits = _checked_loss(logits, targets[idx])
        grads = net3d.backward(net, cache, dlogits)
        if cfg.clip is not None:
            net3d.clip_gradients(grads, cfg.clip)
        net3d.sgd_step(net, grads, cfg.eta)
        return value

    losses = _run_epochs(len(inputs), cfg, seed, step, "fixed")
    if trace is not None:
        trace.extend(losses)
    return net


# Prediction

def _unpack(model: Model) -> Tuple[NetworkParams, CodedApertureSet]:
    if isinstance(model, JointParams):
        return model.net, model.blocks
    net, blocks = model
    return net, blocks


def predict_batch(net: NetworkParams, inputs: np.ndarray, batch: int = PREDICT_BATCH) -> np.ndarray:
    """
    Labels (1-based) for inputs of shape (S, D, P, P, 1).

    argmax keeps the first maximum, so ties go to the smallest class.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    out = np.zeros(len(inputs), dtype=np.int64)
    for start in range(0, len(inputs), batch):
        logits, _ = net3d.forward(net, inputs[start:start + batch])
        out[start:start + batch] = np.argmax(net3d.softmax(logits), axis=1) + 1
    return out


def predict(model: Model, sample: PatchSample) -> int:
    """Label (1-based) of one scene patch seen through the model's aperture."""
    net, blocks = _unpack(model)
    meas = aperture_layer_forward(sample, blocks)
    logits, _ = net3d.forward(net, meas.transpose(2, 0, 1)[..., None])
    return int(np.argmax(net3d.softmax(logits))) + 1


def predict_samples(model: Model, samples: Sequence[PatchSample], batch: int = PREDICT_BATCH) -> np.ndarray:
    """Labels (1-based) for many scene patches."""
    net, blocks = _unpack(model)
    _require_periodic(blocks)
    if not samples:
        return np.zeros(0, dtype=np.int64)
    scenes = np.stack([s.scene_patch for s in samples])
    centers = np.array([s.center for s in samples], dtype=np.int64)
    rows, cols = _code_indices(centers, scenes.shape[1], scenes.shape[3], blocks.b)
    block_values = blocks.stack()
    out = np.zeros(len(samples), dtype=np.int64)
    for start in range(0, len(samples), batch):
        part = slice(start, start + batch)
        meas = _measure(scenes[part], rows[part], cols[part], block_values)
        out[part] = predict_batch(net, meas[..., None], batch)
    return out


# Gradient checking

def joint_grad_check(net: NetworkParams, blocks: np.ndarray, sample: PatchSample, eps: float = 1e-6,
                     tol: float = 1e-4, sample_cap: Optional[int] = None, seed: int = 0) -> net3d.GradCheckReport:
    """
    Finite-difference check of the concatenated (weights, block entries) gradient
    of one sample's loss.

    Args:
        net: Network (left unchanged)
        blocks: Mutable (K, B, B) block array (left unchanged)
        sample: Scene patch and label
        sample_cap: Entries checked per group; None checks every one
    """
    blocks = np.asarray(blocks)
    scene = sample.scene_patch[None]
    rows, cols = _code_indices(np.array([sample.center]), sample.p, scene.shape[3], blocks.shape[1])
    target = sample.class_index

    meas = _measure(scene, rows, cols, blocks)
    logits, cache = net3d.forward(net, meas[0][..., None])
    grads = net3d.backward(net, cache, net3d.loss_grad(net3d.softmax(logits), target))
    d_blocks = _block_grad(scene, rows, cols, grads.d_input[None, ..., 0], blocks.shape)

    def loss_fn() -> float:
        out, _ = net3d.forward(net, _measure(scene, rows, cols, blocks)[0][..., None])
        return net3d.loss(net3d.softmax(out), target)

    analytic = dict(grads.groups(), blocks=d_blocks)
    groups = list(net.groups()) + [("blocks", blocks)]
    return net3d.compare_gradients(loss_fn, groups, analytic, eps=eps, tol=tol, sample=sample_cap, seed=seed)


# Persistence

def save_joint(joint: JointParams, path):
    """Write a .ccnn.json joint model file."""
    body = {
        "net": net3d.network_to_dict(joint.net),
        "apertures": aperture_to_dict(joint.blocks),
        "config": joint.config,
        "loss_trace": list(joint.loss_trace),
    }
    if joint.initial_blocks is not None:
        body["initial_apertures"] = aperture_to_dict(joint.initial_blocks)
    Path(path).write_text(json.dumps(body), encoding="utf-8")
    logger.info("wrote joint model (K=%d, B=%d) to %s", joint.k, joint.blocks.b, path)


def load_joint(path) -> JointParams:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError("json", str(exc))
    try:
        net = net3d.network_from_dict(data["net"])
        blocks = aperture_from_dict(data["apertures"])
        initial = data.get("initial_apertures")
        joint = JointParams(
            net=net, blocks=blocks,
            loss_trace=[float(v) for v in data.get("loss_trace", [])],
            config=data.get("config", {}),
            initial_blocks=aperture_from_dict(initial) if initial is not None else None,
        )
    except KeyError as exc:
        raise FormatError(str(exc.args[0]), "missing field")
    if not blocks.is_periodic or blocks.k != net.depth:
        raise FormatError("apertures", f"expected {net.depth} periodic blocks to match the network depth")
    return joint
