"""
Discrete DD-CASSI measurement simulation, patch-level forward model,
system matrix assembly and representation bases.

vec(F) is band-major, then row-major within a band:
    vec(F)[l * N * M + i * M + j] = F[i, j, l]
and H rows are grouped by snapshot, then row-major pixel order.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence, Tuple

import numpy as np
import scipy.fft
import scipy.sparse

from core.coded_aperture import full_pattern
from core.datacube import DTYPE, read_volume, write_volume
from core.errors import InvalidArgumentError
from models.aperture_models import CodedApertureSet
from models.cube_models import HyperCube
from models.measurement_models import MeasurementCube, NoiseConfig, NoiseKind, SystemMatrix

logger = logging.getLogger(__name__)

MEASUREMENT_MAGIC = b"MSC1\n"
# Largest NML accepted by build_basis (the basis is a dense NML x NML matrix).
BASIS_LIMIT = 4096

# Symmlet-8 decomposition low-pass filter (standard tables).
SYM8_LOWPASS = np.array([
    -0.0033824159510061256, -0.0005421323317911481, 0.03169508781149298,
    0.007607487324917605, -0.1432942383508097, -0.061273359067658524,
    0.4813596512583722, 0.7771857517005235, 0.3644418948353314,
    -0.05194583810770904, -0.027219029917056003, 0.049137179673607506,
    0.003808752013890615, -0.01495225833704823, -0.0003029205147213668,
    0.0018899503327594609,
])
HAAR_LOWPASS = np.array([1.0, 1.0]) / np.sqrt(2.0)
WAVELETS = {"haar": HAAR_LOWPASS, "symmlet8": SYM8_LOWPASS}


# Full-image simulation

def simulate_snapshot(cube: HyperCube, apertures: CodedApertureSet, k: int) -> np.ndarray:
    """
    Noiseless measurement plane of snapshot k.

    Y[i, j] = sum_l F[i, j, l] * T[i, j + l], accumulated in ascending l.
    """
    if not 0 <= k < apertures.k:
        raise InvalidArgumentError(f"snapshot index {k} outside 0..{apertures.k - 1}")
    n, m, l = cube.values.shape
    aperture = full_pattern(apertures, k, n, m + l - 1)
    plane = cube.values[:, :, 0] * aperture[:, 0:m]
    for band in range(1, l):
        plane = plane + cube.values[:, :, band] * aperture[:, band:band + m]
    return plane


def simulate_all(cube: HyperCube, apertures: CodedApertureSet, noise: NoiseConfig = None,
                 threads: int = 1) -> MeasurementCube:
    """
    Stack all K snapshots, optionally adding seeded Gaussian detector noise.

    Args:
        cube: Scene
        apertures: Periodic or full aperture set
        noise: Noise settings (noiseless when None)
        threads: Snapshots simulated concurrently; results do not depend on it
    """
    noise = noise or NoiseConfig()
    if threads > 1 and apertures.k > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            planes = list(pool.map(lambda k: simulate_snapshot(cube, apertures, k), range(apertures.k)))
    else:
        planes = [simulate_snapshot(cube, apertures, k) for k in range(apertures.k)]
    values = np.stack(planes, axis=2)
    if noise.kind == NoiseKind.GAUSSIAN:
        rms = float(np.sqrt(np.mean(values ** 2)))
        rng = np.random.default_rng(noise.seed)
        values = values + rng.normal(0.0, rms * noise.sigma_factor, size=values.shape)
        logger.debug("added gaussian noise at %.1f dB (sigma %.3g)", noise.snr_db, rms * noise.sigma_factor)
    return MeasurementCube(values)


def measured_snr_db(clean: np.ndarray, noisy: np.ndarray) -> float:
    """Empirical signal-RMS to noise-RMS ratio in dB."""
    signal = np.sqrt(np.mean(np.asarray(clean) ** 2))
    residual = np.sqrt(np.mean((np.asarray(noisy) - np.asarray(clean)) ** 2))
    return float(20.0 * np.log10(signal / residual))


# Matrix form

def build_system_matrix(apertures: CodedApertureSet, n: int, m: int, l: int) -> SystemMatrix:
    """
    Sparse H with H @ vec(F) equal to the noiseless stacked measurements.

    Every row holds exactly L structural entries, zeros of the aperture included.
    """
    if min(n, m, l) < 1:
        raise InvalidArgumentError(f"cube dims must be positive, got {(n, m, l)}")
    k_count = apertures.k
    pixels = n * m
    i, j = np.divmod(np.arange(pixels), m)
    rows, cols, data = [], [], []
    for k in range(k_count):
        aperture = full_pattern(apertures, k, n, m + l - 1)
        row = k * pixels + np.arange(pixels)
        for band in range(l):
            rows.append(row)
            cols.append(band * pixels + np.arange(pixels))
            data.append(aperture[i, j + band])
    row_idx = np.stack(rows, axis=1).ravel()
    col_idx = np.stack(cols, axis=1).ravel()
    values = np.stack(data, axis=1).ravel()
    return SystemMatrix(rows=k_count * pixels, cols=pixels * l,
                        row_idx=row_idx, col_idx=col_idx, data=values)


def vectorize_cube(cube: HyperCube) -> np.ndarray:
    """vec(F), band-major."""
    return cube.values.transpose(2, 0, 1).ravel()


def vectorize_measurement(meas: MeasurementCube) -> np.ndarray:
    """Stacked y = [y^1; ...; y^K], snapshot-major."""
    return meas.values.transpose(2, 0, 1).ravel()


def save_triplets(matrix: SystemMatrix, path):
    """Write 'row col value' lines, 0-based, sorted by (row, col)."""
    order = np.lexsort((matrix.col_idx, matrix.row_idx))
    with open(path, "w", encoding="ascii") as f:
        for r, c, v in zip(matrix.row_idx[order], matrix.col_idx[order], matrix.data[order]):
            f.write(f"{int(r)} {int(c)} {float(v)!r}\n")
    logger.info("wrote %d x %d system matrix (%d entries) to %s", matrix.rows, matrix.cols, matrix.nnz, path)


# Representation basis

def _is_power_of_two(value: int) -> bool:
    return value >= 1 and value & (value - 1) == 0


def wavelet_matrix(size: int, lowpass: np.ndarray) -> np.ndarray:
    """
    Orthonormal periodized multilevel DWT analysis matrix (coefficients = W @ x).

    Decomposes down to a single approximation coefficient.
    """
    highpass = lowpass[::-1] * (-1.0) ** np.arange(len(lowpass))
    transform = np.eye(size)
    length = size
    while length >= 2:
        half = length // 2
        step = np.zeros((length, length))
        for row in range(half):
            for tap, (lo, hi) in enumerate(zip(lowpass, highpass)):
                col = (2 * row + tap) % length
                step[row, col] += lo
                step[half + row, col] += hi
        level = np.eye(size)
        level[:length, :length] = step
        transform = level @ transform
        length = half
    return transform


def dct_matrix(size: int) -> np.ndarray:
    """Orthonormal DCT-II analysis matrix (coefficients = D @ x)."""
    return scipy.fft.dct(np.eye(size), type=2, norm="ortho", axis=0)


def basis_factors(n: int, m: int, l: int, spatial: str = "haar", spectral: str = "dct") -> Tuple[np.ndarray, np.ndarray]:
    """
    Spatial (2D separable wavelet, NM x NM) and spectral (DCT-II, L x L) synthesis bases.

    Columns are basis atoms; both factors are orthonormal.
    """
    if spatial not in WAVELETS:
        raise InvalidArgumentError(f"unknown spatial basis {spatial!r}")
    if spectral != "dct":
        raise InvalidArgumentError(f"unknown spectral basis {spectral!r}")
    if not (_is_power_of_two(n) and _is_power_of_two(m)):
        raise InvalidArgumentError(f"wavelet bases need power-of-two sizes, got {n} x {m}")
    lowpass = WAVELETS[spatial]
    psi1 = np.kron(wavelet_matrix(n, lowpass), wavelet_matrix(m, lowpass)).T
    psi2 = dct_matrix(l).T
    return psi1, psi2


def build_basis(n: int, m: int, l: int, spatial: str = "haar", spectral: str = "dct") -> np.ndarray:
    """
    3D representation basis Psi with f = Psi @ theta.

    Psi is Psi1 (x) Psi2 for a pixel-major vectorization; laid out for the
    band-major vec(F) used by the system matrix this is kron(Psi2, Psi1).
    """
    if n * m * l > BASIS_LIMIT:
        raise InvalidArgumentError(f"dense basis of size {n * m * l} exceeds {BASIS_LIMIT}")
    psi1, psi2 = basis_factors(n, m, l, spatial, spectral)
    return np.kron(psi2, psi1)


# Patches

def _window(volume: np.ndarray, x0: int, y0: int, p: int) -> np.ndarray:
    """Zero-padded p x p x depth window centred on (x0, y0)."""
    if p < 1 or p % 2 == 0:
        raise InvalidArgumentError(f"patch size must be odd and positive, got {p}")
    n, m, depth = volume.shape
    if not (0 <= x0 < n and 0 <= y0 < m):
        raise InvalidArgumentError(f"centre ({x0}, {y0}) outside the {n} x {m} image")
    q = p // 2
    patch = np.zeros((p, p, depth))
    r0, r1 = max(x0 - q, 0), min(x0 + q + 1, n)
    c0, c1 = max(y0 - q, 0), min(y0 + q + 1, m)
    patch[r0 - (x0 - q):r1 - (x0 - q), c0 - (y0 - q):c1 - (y0 - q)] = volume[r0:r1, c0:c1]
    return patch


def extract_patch(meas: MeasurementCube, x0: int, y0: int, p: int) -> np.ndarray:
    """P x P x K measurement patch."""
    return _window(meas.values, x0, y0, p)


def extract_scene_patch(cube: HyperCube, x0: int, y0: int, p: int) -> np.ndarray:
    """P x P x L scene patch."""
    return _window(cube.values, x0, y0, p)


def padded_volume(volume: np.ndarray, p: int) -> np.ndarray:
    """Volume zero-padded by p // 2 on both spatial sides, for fast window slicing."""
    q = p // 2
    return np.pad(volume, ((q, q), (q, q), (0, 0)))


def extract_patches(volume: np.ndarray, coords: Sequence[Tuple[int, int]], p: int) -> np.ndarray:
    """Stack of zero-padded windows (S, P, P, depth), one per (x, y) centre."""
    if p < 1 or p % 2 == 0:
        raise InvalidArgumentError(f"patch size must be odd and positive, got {p}")
    padded = padded_volume(volume, p)
    if not coords:
        return np.zeros((0, p, p, volume.shape[2]))
    return np.stack([padded[x:x + p, y:y + p] for x, y in coords])


def patch_codes(apertures: CodedApertureSet, x0: int, y0: int, p: int, l: int) -> np.ndarray:
    """
    Aperture entries seen by a patch: codes[k, a, c, band] multiplies F[a, c, band].

    Periodic sets index blocks with (x0 + a - q) mod B and (y0 + c - q + band) mod B.
    """
    q = p // 2
    rows = x0 - q + np.arange(p)
    cols = y0 - q + np.arange(p)[:, None] + np.arange(l)[None, :]
    if apertures.is_periodic:
        b = apertures.b
        blocks = apertures.stack()
        return blocks[:, (rows % b)[:, None, None], (cols % b)[None, :, :]]
    _, n, width = apertures.pattern.shape
    inside = ((rows >= 0) & (rows < n))[:, None, None] & ((cols >= 0) & (cols < width))[None, :, :]
    codes = apertures.pattern[:, np.clip(rows, 0, n - 1)[:, None, None], np.clip(cols, 0, width - 1)[None, :, :]]
    return np.where(inside[None], codes, 0.0)


def patch_forward(scene_patch: np.ndarray, apertures: CodedApertureSet, x0: int, y0: int) -> np.ndarray:
    """
    P x P x K measurement patch from a P x P x L scene patch.

    Sums bands in ascending order, so interior windows match simulate_all exactly.
    """
    scene_patch = np.asarray(scene_patch, dtype=np.float64)
    if scene_patch.ndim != 3 or scene_patch.shape[0] != scene_patch.shape[1]:
        raise InvalidArgumentError(f"scene patch must be P x P x L, got {scene_patch.shape}")
    p, _, l = scene_patch.shape
    if p % 2 == 0:
        raise InvalidArgumentError(f"patch size must be odd, got {p}")
    codes = patch_codes(apertures, x0, y0, p, l)
    out = scene_patch[None, :, :, 0] * codes[..., 0]
    for band in range(1, l):
        out = out + scene_patch[None, :, :, band] * codes[..., band]
    return out.transpose(1, 2, 0)


# File I/O

def save_measurement(meas: MeasurementCube, path):
    """Write a .msc file, snapshot-sequential."""
    header = {"n": meas.n, "m": meas.m, "k": meas.k, "dtype": DTYPE}
    write_volume(path, MEASUREMENT_MAGIC, header, meas.values.transpose(2, 0, 1))
    logger.info("wrote %dx%dx%d measurement to %s", meas.n, meas.m, meas.k, path)


def load_measurement(path) -> MeasurementCube:
    header, flat = read_volume(Path(path), MEASUREMENT_MAGIC, ("n", "m", "k"))
    n, m, k = header["n"], header["m"], header["k"]
    return MeasurementCube(flat.reshape(k, n, m).transpose(1, 2, 0).copy())
