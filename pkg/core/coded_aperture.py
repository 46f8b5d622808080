"""
Periodic greyscale coded apertures: tiling, random and blue-noise generation, clamping.
"""
import json
import logging
from pathlib import Path
from typing import Dict, List, Set, Tuple

import numpy as np

from core.errors import FormatError, InvalidArgumentError
from models.aperture_models import ApertureMode, BasicBlock, CodedApertureSet

logger = logging.getLogger(__name__)

# Void-and-cluster energy kernel width in pixels.
BLUENOISE_SIGMA = 1.5


def _spawn_seeds(seed: int, count: int) -> List[int]:
    """Independent per-snapshot seeds derived from one seed."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(count)]


def _check_open_ratio(name: str, value: float):
    if not 0.0 < value < 1.0:
        raise InvalidArgumentError(f"{name} must lie in the open interval (0, 1), got {value}")


# Indexing and tiling

def aperture_entry(apertures: CodedApertureSet, k: int, m: int, c: int) -> float:
    """
    Transmittance of snapshot k at row m, column c.

    Periodic sets use the non-negative remainder of (m, c) by B, so negative
    offsets index the block the same way positive ones do.
    """
    if not 0 <= k < apertures.k:
        raise InvalidArgumentError(f"snapshot index {k} outside 0..{apertures.k - 1}")
    if apertures.is_periodic:
        b = apertures.b
        return float(apertures.blocks[k].values[m % b, c % b])
    _, n, cols = apertures.pattern.shape
    if not (0 <= m < n and 0 <= c < cols):
        raise InvalidArgumentError(f"({m}, {c}) outside the {n} x {cols} aperture")
    return float(apertures.pattern[k, m, c])


def tile(block: BasicBlock, n: int, cols: int) -> np.ndarray:
    """Fill an n x cols pattern cyclically with a basic block."""
    if n < 1 or cols < 1:
        raise InvalidArgumentError(f"tile size must be positive, got {n} x {cols}")
    b = block.b
    return block.values[np.arange(n)[:, None] % b, np.arange(cols)[None, :] % b].copy()


def full_pattern(apertures: CodedApertureSet, k: int, n: int, cols: int) -> np.ndarray:
    """The n x cols aperture of snapshot k, derived on demand for periodic sets."""
    if apertures.is_periodic:
        return tile(apertures.blocks[k], n, cols)
    pattern = apertures.pattern[k]
    if pattern.shape != (n, cols):
        raise InvalidArgumentError(f"stored aperture is {pattern.shape}, expected {(n, cols)}")
    return pattern


def tile_set(apertures: CodedApertureSet, n: int, cols: int) -> CodedApertureSet:
    """Materialize every snapshot as a full-mode set."""
    pattern = np.stack([full_pattern(apertures, k, n, cols) for k in range(apertures.k)])
    return CodedApertureSet(mode=ApertureMode.FULL, pattern=pattern)


# Generators

def random_block(b: int, transmittance: float, seed: int) -> BasicBlock:
    """B x B block of i.i.d. Bernoulli(transmittance) entries."""
    _check_open_ratio("transmittance", transmittance)
    if b < 1:
        raise InvalidArgumentError(f"block size must be >= 1, got {b}")
    rng = np.random.default_rng(seed)
    return BasicBlock((rng.random((b, b)) < transmittance).astype(np.float64))


def random_full(n: int, cols: int, transmittance: float, seed: int) -> np.ndarray:
    """n x cols pattern of i.i.d. Bernoulli(transmittance) entries."""
    _check_open_ratio("transmittance", transmittance)
    if n < 1 or cols < 1:
        raise InvalidArgumentError(f"pattern size must be positive, got {n} x {cols}")
    rng = np.random.default_rng(seed)
    return (rng.random((n, cols)) < transmittance).astype(np.float64)


def random_aperture_set(k: int, b: int, transmittance: float, seed: int) -> CodedApertureSet:
    """K binary random basic blocks."""
    return CodedApertureSet(blocks=[random_block(b, transmittance, s) for s in _spawn_seeds(seed, k)])


def uniform_aperture_set(k: int, b: int, seed: int) -> CodedApertureSet:
    """K greyscale blocks drawn uniformly from [0, 1]."""
    rng = np.random.default_rng(seed)
    return CodedApertureSet.from_stack(rng.random((k, b, b)))


def random_full_set(k: int, n: int, cols: int, transmittance: float, seed: int) -> CodedApertureSet:
    """K independent full random apertures."""
    pattern = np.stack([random_full(n, cols, transmittance, s) for s in _spawn_seeds(seed, k)])
    return CodedApertureSet(mode=ApertureMode.FULL, pattern=pattern)


def _torus_kernel(n: int, cols: int, sigma: float) -> np.ndarray:
    """Gaussian of toroidal distance to the origin."""
    dx = np.minimum(np.arange(n), n - np.arange(n))
    dy = np.minimum(np.arange(cols), cols - np.arange(cols))
    return np.exp(-(dx[:, None] ** 2 + dy[None, :] ** 2) / (2.0 * sigma ** 2))


def _void_and_cluster(minority: np.ndarray, kernel: np.ndarray, max_iter: int) -> np.ndarray:
    """Swap tightest-cluster minority pixels into the largest voids until stable."""
    pattern = minority.copy()
    kernel_f = np.fft.fft2(kernel)
    energy = np.real(np.fft.ifft2(np.fft.fft2(pattern) * kernel_f))
    for _ in range(max_iter):
        cluster = np.unravel_index(np.argmax(np.where(pattern, energy, -np.inf)), pattern.shape)
        pattern[cluster] = False
        energy -= np.roll(kernel, cluster, axis=(0, 1))
        void = np.unravel_index(np.argmin(np.where(pattern, np.inf, energy)), pattern.shape)
        pattern[void] = True
        energy += np.roll(kernel, void, axis=(0, 1))
        if void == cluster:
            return pattern
    logger.warning("void-and-cluster stopped after %d swaps without converging", max_iter)
    return pattern


def bluenoise_full(n: int, cols: int, density: float, seed: int, sigma: float = BLUENOISE_SIGMA) -> np.ndarray:
    """
    Binary blue-noise pattern with exactly round(density * n * cols) ones.

    Args:
        n: Rows
        cols: Columns
        density: Share of open pixels, in (0, 1)
        seed: Seed of the initial random placement
        sigma: Width of the toroidal Gaussian energy kernel

    Returns:
        n x cols float array of zeros and ones
    """
    _check_open_ratio("density", density)
    if n < 1 or cols < 1:
        raise InvalidArgumentError(f"pattern size must be positive, got {n} x {cols}")
    total = n * cols
    ones = int(np.floor(density * total + 0.5))
    invert = ones > total - ones
    count = total - ones if invert else ones

    rng = np.random.default_rng(seed)
    minority = np.zeros(total, dtype=bool)
    minority[rng.choice(total, size=count, replace=False)] = True
    minority = minority.reshape(n, cols)
    if 0 < count < total:
        minority = _void_and_cluster(minority, _torus_kernel(n, cols, sigma), max_iter=10 * total)
    pattern = ~minority if invert else minority
    return pattern.astype(np.float64)


def bluenoise_set(k: int, n: int, cols: int, density: float, seed: int) -> CodedApertureSet:
    """K independent blue-noise apertures."""
    pattern = np.stack([bluenoise_full(n, cols, density, s) for s in _spawn_seeds(seed, k)])
    return CodedApertureSet(mode=ApertureMode.FULL, pattern=pattern)


# Analysis

def clamp_blocks(apertures: CodedApertureSet) -> CodedApertureSet:
    """Limit every transmittance to [0, 1]."""
    if apertures.is_periodic:
        return CodedApertureSet.from_stack(np.clip(apertures.stack(), 0.0, 1.0))
    return CodedApertureSet(mode=ApertureMode.FULL, pattern=np.clip(apertures.pattern, 0.0, 1.0))


def aperture_difference(initial: CodedApertureSet, optimized: CodedApertureSet) -> np.ndarray:
    """Per-snapshot block change, optimized minus initial, as a (K, B, B) array."""
    before, after = initial.stack(), optimized.stack()
    if before.shape != after.shape:
        raise InvalidArgumentError(f"block stacks differ in shape: {before.shape} vs {after.shape}")
    return after - before


def mean_transmittance(apertures: CodedApertureSet) -> float:
    values = apertures.stack() if apertures.is_periodic else apertures.pattern
    return float(values.mean())


def low_frequency_energy(pattern: np.ndarray, fraction: float = 0.1) -> float:
    """Mean periodogram energy over the lowest `fraction` of nonzero radial frequencies."""
    pattern = np.asarray(pattern, dtype=np.float64)
    spectrum = np.abs(np.fft.fft2(pattern - pattern.mean())) ** 2 / pattern.size
    fx = np.fft.fftfreq(pattern.shape[0])
    fy = np.fft.fftfreq(pattern.shape[1])
    radius = np.sqrt(fx[:, None] ** 2 + fy[None, :] ** 2)
    nonzero = radius > 0
    cutoff = np.quantile(radius[nonzero], fraction)
    band = nonzero & (radius <= cutoff)
    return float(spectrum[band].mean())


def gather_block_indices(x0: int, y0: int, p: int, l: int, b: int, k: int) -> Set[Tuple[int, int, int]]:
    """
    Block entries touched by the measurement patch centred at (x0, y0).

    Returns:
        Set of (snapshot, row-in-block, col-in-block)
    """
    if p < 1 or p % 2 == 0:
        raise InvalidArgumentError(f"patch size must be odd and positive, got {p}")
    if l < 1 or b < 1 or k < 1 or x0 < 0 or y0 < 0:
        raise InvalidArgumentError("l, b, k must be positive and the centre non-negative")
    q = p // 2
    rows = {(x0 + a) % b for a in range(-q, q + 1)}
    cols = {(y0 + a + band) % b for a in range(-q, q + 1) for band in range(l)}
    return {(snap, r, c) for snap in range(k) for r in rows for c in cols}


def underdetermined_warning(k: int, b: int, n_train: int) -> bool:
    """Warn when the trainable aperture entries reach the training-sample count."""
    if k * b * b >= n_train:
        logger.warning("K*B^2 = %d aperture entries >= %d training samples; "
                       "aperture training is underdetermined", k * b * b, n_train)
        return True
    return False


# File I/O

def aperture_to_dict(apertures: CodedApertureSet) -> Dict:
    if apertures.is_periodic:
        return {
            "k": apertures.k,
            "b": apertures.b,
            "mode": ApertureMode.PERIODIC.value,
            "blocks": apertures.stack().tolist(),
        }
    _, n, cols = apertures.pattern.shape
    return {
        "k": apertures.k,
        "mode": ApertureMode.FULL.value,
        "n": n,
        "cols": cols,
        "pattern": apertures.pattern.tolist(),
    }


def aperture_from_dict(data: Dict) -> CodedApertureSet:
    try:
        mode = ApertureMode(data["mode"])
        if mode == ApertureMode.PERIODIC:
            blocks = np.array(data["blocks"], dtype=np.float64)
            if blocks.ndim != 3 or blocks.shape != (data["k"], data["b"], data["b"]):
                raise FormatError("blocks", f"shape {blocks.shape} does not match k={data['k']}, b={data['b']}")
            return CodedApertureSet.from_stack(blocks)
        pattern = np.array(data["pattern"], dtype=np.float64)
        if pattern.ndim != 3 or pattern.shape != (data["k"], data["n"], data["cols"]):
            raise FormatError("pattern", f"shape {pattern.shape} does not match k, n, cols")
        return CodedApertureSet(mode=mode, pattern=pattern)
    except KeyError as exc:
        raise FormatError(str(exc.args[0]), "missing field")
    except ValueError as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError("aperture", str(exc))


def save_apertures(apertures: CodedApertureSet, path):
    """Write an .apt.json file; floats keep their exact round-trip representation."""
    Path(path).write_text(json.dumps(aperture_to_dict(apertures)), encoding="utf-8")
    logger.info("wrote %s aperture set (K=%d) to %s", apertures.mode.value, apertures.k, path)


def load_apertures(path) -> CodedApertureSet:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError("json", str(exc))
    return aperture_from_dict(data)
