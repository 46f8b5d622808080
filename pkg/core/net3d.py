"""
Minimal deterministic 3D-CNN engine: convolution, activation, fully-connected
layer, softmax loss, plain SGD and finite-difference gradient checking.

Batches are laid out (batch, snapshot, row, col, channel).
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from core.errors import FormatError, InvalidArgumentError, InvalidStateError, NonFiniteError
from models.network_models import Activation, ConvLayer, NetworkGrads, NetworkParams, Padding

logger = logging.getLogger(__name__)

# Probabilities are floored here before taking the log.
LOSS_FLOOR = 1e-300
# Largest parameter count grad_check walks exhaustively.
GRAD_CHECK_LIMIT = 10_000
# Denominator floor of the relative error used by grad_check.
REL_ERROR_FLOOR = 1e-4

_floor_hits = 0


@dataclass
class ForwardCache:
    """Intermediate values of one forward pass, tied to a parameter version."""
    params_id: int
    version: int
    single: bool
    padded_inputs: List[np.ndarray]
    activations: List[np.ndarray]
    input_shape: Tuple[int, ...]


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference gradient comparison."""
    max_rel_error: float
    group: Optional[str]
    index: Optional[Tuple[int, ...]]
    checked: int
    tol: float
    eps: float
    failures: List[Tuple[str, Tuple[int, ...], float]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


# Construction

def _pad_widths(kernel: Tuple[int, int, int], padding: Padding) -> List[Tuple[int, int]]:
    if padding == Padding.VALID:
        return [(0, 0)] * 3
    return [((k - 1) // 2, k - 1 - (k - 1) // 2) for k in kernel]


def output_shape(depth: int, p: int, padding: Padding) -> Tuple[int, int, int]:
    """Spatial shape (snapshot, row, col) after the six convolutions."""
    dims = [depth, p, p]
    if padding == Padding.VALID:
        for kernel in NetworkParams.KERNELS:
            dims = [d - k + 1 for d, k in zip(dims, kernel)]
    return tuple(dims)


def build_network(depth: int, p: int, classes: int, seed: int,
                  activation: Activation = Activation.RELU,
                  padding: Padding = Padding.SAME) -> NetworkParams:
    """
    Build the seven-layer network with seeded uniform fan-in initialisation.

    Args:
        depth: Input depth (K snapshots, or L bands for raw-cube input)
        p: Odd patch size (>= 3)
        classes: Class count (>= 2)
        seed: Random seed
        activation: Nonlinearity after every convolution
        padding: Convolution border rule

    Returns:
        NetworkParams with zero biases
    """
    activation, padding = Activation(activation), Padding(padding)
    if depth < 2:
        raise InvalidArgumentError(f"input depth must be >= 2, got {depth}")
    if p < 3 or p % 2 == 0:
        raise InvalidArgumentError(f"patch size must be odd and >= 3, got {p}")
    if classes < 2:
        raise InvalidArgumentError(f"classes must be >= 2, got {classes}")
    dims = output_shape(depth, p, padding)
    if min(dims) < 1:
        raise InvalidArgumentError(f"valid padding collapses a {depth} x {p} x {p} input to {dims}")

    rng = np.random.default_rng(seed)
    conv = []
    channels = 1
    for filters, kernel in zip(NetworkParams.FILTERS, NetworkParams.KERNELS):
        fan_in = int(np.prod(kernel)) * channels
        limit = np.sqrt(6.0 / fan_in)
        kernels = rng.uniform(-limit, limit, size=(filters, *kernel, channels))
        conv.append(ConvLayer(kernels, np.zeros(filters)))
        channels = filters
    flat = int(np.prod(dims)) * channels
    limit = np.sqrt(6.0 / flat)
    fc_weights = rng.uniform(-limit, limit, size=(classes, flat))
    return NetworkParams(depth=depth, p=p, classes=classes, conv=conv,
                         fc_weights=fc_weights, fc_biases=np.zeros(classes),
                         activation=activation, padding=padding)


def count_parameters(params: NetworkParams) -> int:
    return sum(int(arr.size) for _, arr in params.groups())


# Layers

def conv3d_forward(x: np.ndarray, kernels: np.ndarray, biases: np.ndarray,
                   padding: Padding) -> Tuple[np.ndarray, np.ndarray]:
    """
    Stride-1 3D convolution (cross-correlation) over a batch.

    Returns:
        (output (batch, d, r, c, filters), zero-padded input kept for backward)
    """
    _, k1, k2, k3, _ = kernels.shape
    pads = _pad_widths((k1, k2, k3), padding)
    xp = np.pad(x, [(0, 0)] + pads + [(0, 0)])
    d = xp.shape[1] - k1 + 1
    r = xp.shape[2] - k2 + 1
    c = xp.shape[3] - k3 + 1
    out = np.zeros((x.shape[0], d, r, c, kernels.shape[0]))
    for a in range(k1):
        for i in range(k2):
            for j in range(k3):
                out += xp[:, a:a + d, i:i + r, j:j + c, :] @ kernels[:, a, i, j, :].T
    return out + biases, xp


def conv3d_backward(xp: np.ndarray, kernels: np.ndarray, dout: np.ndarray,
                    padding: Padding) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (d_input, d_kernels, d_biases) of conv3d_forward."""
    _, k1, k2, k3, _ = kernels.shape
    _, d, r, c, _ = dout.shape
    dkernels = np.zeros_like(kernels)
    dxp = np.zeros_like(xp)
    for a in range(k1):
        for i in range(k2):
            for j in range(k3):
                window = xp[:, a:a + d, i:i + r, j:j + c, :]
                dkernels[:, a, i, j, :] = np.tensordot(dout, window, axes=([0, 1, 2, 3], [0, 1, 2, 3]))
                dxp[:, a:a + d, i:i + r, j:j + c, :] += dout @ kernels[:, a, i, j, :]
    dbiases = dout.sum(axis=(0, 1, 2, 3))
    pads = _pad_widths((k1, k2, k3), padding)
    crop = tuple(slice(before, dxp.shape[axis + 1] - after) for axis, (before, after) in enumerate(pads))
    return dxp[(slice(None),) + crop], dkernels, dbiases


def _activate(z: np.ndarray, activation: Activation) -> np.ndarray:
    if activation == Activation.TANH:
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _activation_grad(a: np.ndarray, activation: Activation) -> np.ndarray:
    """Derivative from the activation output; ReLU uses subgradient 0 at 0."""
    if activation == Activation.TANH:
        return 1.0 - a * a
    return (a > 0.0).astype(np.float64)


# Forward / backward

def forward(params: NetworkParams, inputs: np.ndarray) -> Tuple[np.ndarray, ForwardCache]:
    """
    Logits for one input (K, P, P, 1) or a batch (B, K, P, P, 1).

    Returns:
        (logits of shape (classes,) or (B, classes), cache for backward)
    """
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 4
    if single:
        x = x[None]
    expected = (params.depth, params.p, params.p, 1)
    if x.ndim != 5 or x.shape[1:] != expected:
        raise InvalidArgumentError(f"input must be {expected} (optionally batched), got {np.shape(inputs)}")

    padded, activations = [], []
    for layer in params.conv:
        z, xp = conv3d_forward(x, layer.kernels, layer.biases, params.padding)
        x = _activate(z, params.activation)
        padded.append(xp)
        activations.append(x)
    logits = x.reshape(x.shape[0], -1) @ params.fc_weights.T + params.fc_biases
    cache = ForwardCache(params_id=id(params), version=params.version, single=single,
                         padded_inputs=padded, activations=activations,
                         input_shape=np.shape(inputs))
    return (logits[0] if single else logits), cache


def backward(params: NetworkParams, cache: ForwardCache, dlogits: np.ndarray) -> NetworkGrads:
    """Reverse-mode gradients of every parameter and of the input."""
    if cache.params_id != id(params) or cache.version != params.version:
        raise InvalidStateError("forward cache does not belong to the current parameters")
    dlogits = np.asarray(dlogits, dtype=np.float64)
    if cache.single:
        dlogits = dlogits[None]
    last = cache.activations[-1]
    flat = last.reshape(last.shape[0], -1)
    fc_weights = dlogits.T @ flat
    fc_biases = dlogits.sum(axis=0)

    da = (dlogits @ params.fc_weights).reshape(last.shape)
    conv_grads: List[ConvLayer] = []
    for layer, xp, a in zip(reversed(params.conv), reversed(cache.padded_inputs), reversed(cache.activations)):
        dz = da * _activation_grad(a, params.activation)
        da, dkernels, dbiases = conv3d_backward(xp, layer.kernels, dz, params.padding)
        conv_grads.append(ConvLayer(dkernels, dbiases))
    conv_grads.reverse()
    d_input = da.reshape(cache.input_shape)
    return NetworkGrads(conv=conv_grads, fc_weights=fc_weights, fc_biases=fc_biases, d_input=d_input)


# Softmax loss

def softmax(x: np.ndarray) -> np.ndarray:
    """Softmax over the last axis, shifted by the maximum."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def loss(p: np.ndarray, label: int) -> float:
    """Cross-entropy -log p[label] for a zero-based class index."""
    global _floor_hits
    p = np.asarray(p, dtype=np.float64)
    if not 0 <= label < p.shape[-1]:
        raise InvalidArgumentError(f"class index {label} outside 0..{p.shape[-1] - 1}")
    value = float(p[label])
    if value < LOSS_FLOOR:
        _floor_hits += 1
        logger.warning("probability %.3g floored to %g (%d floor hits)", value, LOSS_FLOOR, _floor_hits)
        value = LOSS_FLOOR
    return float(-np.log(value))


def loss_grad(p: np.ndarray, label: int) -> np.ndarray:
    """Gradient of loss w.r.t. the logits: p - onehot(label)."""
    grad = np.array(p, dtype=np.float64)
    grad[label] -= 1.0
    return grad


def batch_loss(probs: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean loss over a batch and its gradient w.r.t. the batch logits."""
    labels = np.asarray(labels)
    total = sum(loss(p, int(y)) for p, y in zip(probs, labels))
    dlogits = np.array(probs, dtype=np.float64)
    dlogits[np.arange(len(labels)), labels] -= 1.0
    return total / len(labels), dlogits / len(labels)


def floor_hits() -> int:
    return _floor_hits


def reset_floor_hits():
    global _floor_hits
    _floor_hits = 0


# Updates

def check_finite(grads: NetworkGrads):
    for name, g in grads.groups():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient", group=name)


def sgd_step(params: NetworkParams, grads: NetworkGrads, eta: float) -> NetworkParams:
    """theta <- theta - eta * grad on every parameter group, in place."""
    check_finite(grads)
    for (_, theta), (_, g) in zip(params.groups(), grads.groups()):
        if theta.shape != g.shape:
            raise InvalidArgumentError(f"gradient shape {g.shape} does not match {theta.shape}")
        theta -= eta * g
    params.version += 1
    return params


def clip_gradients(grads: NetworkGrads, max_norm: float, extra: Iterable[np.ndarray] = ()) -> float:
    """
    Rescale gradients in place so their joint L2 norm is at most max_norm.

    Arrays in extra (e.g. aperture gradients) share the norm and the scale.

    Returns:
        The norm before clipping
    """
    extra = list(extra)
    norm = float(np.sqrt(grads.global_norm() ** 2 + sum(float(np.sum(e * e)) for e in extra)))
    if norm > max_norm:
        scale = max_norm / norm
        for _, g in grads.groups():
            g *= scale
        for e in extra:
            e *= scale
        logger.debug("clipped gradient norm %.4g to %.4g", norm, max_norm)
    return norm


# Gradient checking

def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), REL_ERROR_FLOOR)


def compare_gradients(loss_fn: Callable[[], float], groups: List[Tuple[str, np.ndarray]],
                      analytic: Dict[str, np.ndarray], eps: float = 1e-6, tol: float = 1e-4,
                      sample: Optional[int] = None, seed: int = 0) -> GradCheckReport:
    """
    Central-difference check of analytic gradients.

    Perturbs each selected entry of the arrays in groups in place (restoring
    it afterwards) and re-evaluates loss_fn.

    Args:
        loss_fn: Loss of the current array contents
        groups: (name, array) pairs to perturb
        analytic: Analytic gradient per group name
        sample: Check at most this many random entries per group (all when None)
    """
    total = sum(arr.size for _, arr in groups)
    if sample is None and total > GRAD_CHECK_LIMIT:
        raise InvalidArgumentError(
            f"{total} parameters exceed the exhaustive check limit {GRAD_CHECK_LIMIT}; pass sample")
    rng = np.random.default_rng(seed)
    worst, worst_group, worst_index, checked = 0.0, None, None, 0
    failures = []
    for name, arr in groups:
        if sample is None or arr.size <= sample:
            flat_indices = np.arange(arr.size)
        else:
            flat_indices = np.sort(rng.choice(arr.size, size=sample, replace=False))
        for flat in flat_indices:
            index = np.unravel_index(flat, arr.shape)
            original = arr[index]
            arr[index] = original + eps
            plus = loss_fn()
            arr[index] = original - eps
            minus = loss_fn()
            arr[index] = original
            numeric = (plus - minus) / (2.0 * eps)
            err = relative_error(float(analytic[name][index]), numeric)
            checked += 1
            if err > tol:
                failures.append((name, tuple(int(i) for i in index), err))
            if err > worst:
                worst, worst_group, worst_index = err, name, tuple(int(i) for i in index)
    report = GradCheckReport(max_rel_error=worst, group=worst_group, index=worst_index,
                             checked=checked, tol=tol, eps=eps, failures=failures)
    logger.info("gradient check: %d entries, max relative error %.3g at %s%s",
                checked, worst, worst_group, list(worst_index) if worst_index else "")
    return report


def grad_check(params: NetworkParams, inputs: np.ndarray, label: int, eps: float = 1e-6,
               tol: float = 1e-4, analytic: Optional[NetworkGrads] = None,
               sample: Optional[int] = None, seed: int = 0) -> GradCheckReport:
    """
    Compare backward() against central differences of loss(softmax(forward())).

    Args:
        params: Network (left unchanged)
        inputs: One (K, P, P, 1) input
        label: Zero-based class index
        analytic: Gradients to check instead of backward()'s (fault injection)
        sample: Entries checked per parameter group; None walks every parameter
    """
    if analytic is None:
        logits, cache = forward(params, inputs)
        analytic = backward(params, cache, loss_grad(softmax(logits), label))

    def loss_fn() -> float:
        logits, _ = forward(params, inputs)
        return loss(softmax(logits), label)

    return compare_gradients(loss_fn, list(params.groups()), dict(analytic.groups()),
                             eps=eps, tol=tol, sample=sample, seed=seed)


# Persistence

def network_to_dict(params: NetworkParams) -> Dict:
    return {
        "topology": params.topology(),
        "layers": [{"kernels": layer.kernels.tolist(), "biases": layer.biases.tolist()}
                   for layer in params.conv],
        "fc": {"weights": params.fc_weights.tolist(), "biases": params.fc_biases.tolist()},
    }


def network_from_dict(data: Dict) -> NetworkParams:
    try:
        topo = data["topology"]
        template = build_network(topo["k"], topo["p"], topo["classes"], seed=0,
                                 activation=topo.get("activation", "relu"),
                                 padding=topo.get("padding", "same"))
        layers = data["layers"]
        if len(layers) != len(template.conv):
            raise FormatError("layers", f"expected {len(template.conv)} layers, found {len(layers)}")
        conv = []
        for i, (layer, ref) in enumerate(zip(layers, template.conv)):
            kernels = np.array(layer["kernels"], dtype=np.float64)
            biases = np.array(layer["biases"], dtype=np.float64)
            if kernels.shape != ref.kernels.shape or biases.shape != ref.biases.shape:
                raise FormatError(f"layers[{i}]", f"shape {kernels.shape} does not match topology")
            conv.append(ConvLayer(kernels, biases))
        fc_weights = np.array(data["fc"]["weights"], dtype=np.float64)
        fc_biases = np.array(data["fc"]["biases"], dtype=np.float64)
        if fc_weights.shape != template.fc_weights.shape or fc_biases.shape != template.fc_biases.shape:
            raise FormatError("fc", f"shape {fc_weights.shape} does not match topology")
    except KeyError as exc:
        raise FormatError(str(exc.args[0]), "missing field")
    except FormatError:
        raise
    except (ValueError, TypeError) as exc:
        raise FormatError("topology", str(exc))
    template.conv = conv
    template.fc_weights = fc_weights
    template.fc_biases = fc_biases
    return template


def save_network(params: NetworkParams, path):
    """Write a .net.json model file."""
    Path(path).write_text(json.dumps(network_to_dict(params)), encoding="utf-8")
    logger.info("wrote network (%d parameters) to %s", count_parameters(params), path)


def load_network(path) -> NetworkParams:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError("json", str(exc))
    return network_from_dict(data)
