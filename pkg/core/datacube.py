"""
Hyperspectral cubes, label maps, synthetic scenes, train/test splits and file I/O.
"""
import json
import logging
import math
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from core.errors import EmptySplitError, FormatError, InvalidArgumentError
from models.cube_models import HyperCube, LabelMap, SceneStats, SplitIndex

logger = logging.getLogger(__name__)

CUBE_MAGIC = b"HSC1\n"
CUBE_ORDER = "bsq-rowmajor"
DTYPE = "f64le"

# Minimum share of pixels left unlabeled along region borders.
BORDER_SHARE = 0.01
# Minimum spectral angle (radians) between two class signatures.
MIN_SIGNATURE_ANGLE = 0.02


# Synthetic scenes

def generate_synthetic_scene(n: int, m: int, l: int, classes: int, seed: int) -> Tuple[HyperCube, LabelMap]:
    """
    Generate a stand-in scene: Voronoi class regions with smooth class spectra.

    Args:
        n: Rows (>= 8)
        m: Columns (>= 8)
        l: Bands (>= 2)
        classes: Class count in 2..16
        seed: Random seed

    Returns:
        (cube normalised to a maximum of 1, label map with unlabeled region borders)
    """
    if n < 8 or m < 8:
        raise InvalidArgumentError(f"scene must be at least 8 x 8, got {n} x {m}")
    if l < 2:
        raise InvalidArgumentError(f"scene needs at least 2 bands, got {l}")
    if not 2 <= classes <= 16:
        raise InvalidArgumentError(f"classes must lie in 2..16, got {classes}")

    rng = np.random.default_rng(seed)
    sites = rng.choice(n * m, size=classes, replace=False)
    site_x, site_y = np.divmod(sites, m)
    rows, cols = np.mgrid[0:n, 0:m]
    dist = (rows[None] - site_x[:, None, None]) ** 2 + (cols[None] - site_y[:, None, None]) ** 2
    region = np.argmin(dist, axis=0) + 1

    signatures = _class_signatures(rng, classes, l)
    jitter = rng.uniform(0.9, 1.1, size=(n, m))
    values = signatures[region - 1] * jitter[..., None]
    values /= values.max()

    unlabeled = _border_unlabeled(region, site_x, site_y)
    labels = np.where(unlabeled, 0, region)
    logger.debug("synthetic scene %dx%dx%d: %d classes, %d unlabeled pixels",
                 n, m, l, classes, int(unlabeled.sum()))
    return HyperCube(values), LabelMap(labels, classes)


def _class_signatures(rng: np.random.Generator, classes: int, l: int, attempts: int = 1000) -> np.ndarray:
    """Draw one smooth spectrum per class as a mixture of 2-3 Gaussian bumps."""
    bands = np.arange(l, dtype=np.float64)
    signatures: List[np.ndarray] = []
    for _ in range(attempts * classes):
        bumps = int(rng.integers(2, 4))
        centers = rng.uniform(0.0, l - 1, bumps)
        widths = rng.uniform(0.15, 0.5, bumps) * l
        amps = rng.uniform(0.3, 1.0, bumps)
        spectrum = np.zeros(l)
        for c, w, a in zip(centers, widths, amps):
            spectrum += a * np.exp(-0.5 * ((bands - c) / w) ** 2)
        spectrum = np.clip(spectrum / spectrum.max(), 0.05, 1.0)
        if all(spectral_angle(spectrum, other) >= MIN_SIGNATURE_ANGLE for other in signatures):
            signatures.append(spectrum)
            if len(signatures) == classes:
                return np.stack(signatures)
    raise InvalidArgumentError(f"could not draw {classes} distinct signatures over {l} bands")


def _border_unlabeled(region: np.ndarray, site_x: np.ndarray, site_y: np.ndarray) -> np.ndarray:
    """Mask of border pixels to unlabel; every class keeps at least its site pixel."""
    cross = ndimage.generate_binary_structure(2, 1)
    border = (ndimage.grey_dilation(region, footprint=cross, mode="nearest")
              != ndimage.grey_erosion(region, footprint=cross, mode="nearest"))
    need = math.ceil(BORDER_SHARE * region.size)
    while True:
        unlabeled = border.copy()
        for c, (x, y) in enumerate(zip(site_x, site_y), start=1):
            if not np.any(~unlabeled & (region == c)):
                unlabeled[x, y] = False
        if unlabeled.sum() >= need or border.all():
            return unlabeled
        border = ndimage.binary_dilation(border, structure=cross)


def spectral_angle(a: np.ndarray, b: np.ndarray) -> float:
    """Angle in radians between two spectra."""
    denom = float(np.linalg.norm(a) * np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.arccos(np.clip(np.dot(a, b) / denom, -1.0, 1.0)))


def class_signature_angles(cube: HyperCube, labels: LabelMap) -> SceneStats:
    """Mean angle between class mean spectra versus mean angle of pixels to their class mean."""
    means: Dict[int, np.ndarray] = {}
    within: List[float] = []
    counts: Dict[int, int] = {}
    for c in range(1, labels.classes + 1):
        pixels = cube.values[labels.labels == c]
        if len(pixels) == 0:
            continue
        means[c] = pixels.mean(axis=0)
        counts[c] = len(pixels)
        within.extend(spectral_angle(px, means[c]) for px in pixels)
    keys = sorted(means)
    between = [spectral_angle(means[a], means[b]) for i, a in enumerate(keys) for b in keys[i + 1:]]
    return SceneStats(
        between=float(np.mean(between)) if between else 0.0,
        within=float(np.mean(within)) if within else 0.0,
        per_class=counts,
    )


def normalize_cube(cube: HyperCube) -> HyperCube:
    """Scale radiance to [0, 1] by the cube maximum."""
    peak = float(cube.values.max())
    if peak <= 0.0:
        return HyperCube(cube.values.copy())
    return HyperCube(cube.values / peak)


# Train/test split

def split_train_test(labels: LabelMap, fraction: float, seed: int, stratified: bool = False) -> SplitIndex:
    """
    Randomly split labeled pixels into train and test sets.

    Args:
        labels: Ground-truth map
        fraction: Share of labeled pixels used for training, in (0, 1)
        seed: Random seed
        stratified: Draw the fraction within every class instead of globally

    Returns:
        SplitIndex with both lists ordered by (y, x)
    """
    if not 0.0 < fraction < 1.0:
        raise InvalidArgumentError(f"fraction must lie in (0, 1), got {fraction}")
    coords = labels.labeled_coords()
    if not coords:
        raise EmptySplitError("label map has no labeled pixels")

    rng = np.random.default_rng(seed)
    chosen = np.zeros(len(coords), dtype=bool)
    if stratified:
        classes = np.array([labels.labels[x, y] for x, y in coords])
        for c in np.unique(classes):
            members = np.flatnonzero(classes == c)
            take = _round_half_up(fraction * len(members))
            chosen[members[rng.permutation(len(members))[:take]]] = True
    else:
        take = _round_half_up(fraction * len(coords))
        chosen[rng.permutation(len(coords))[:take]] = True

    train = [c for c, keep in zip(coords, chosen) if keep]
    test = [c for c, keep in zip(coords, chosen) if not keep]
    logger.debug("split %d labeled pixels: %d train, %d test", len(coords), len(train), len(test))
    return SplitIndex(train=train, test=test, seed=seed, fraction=fraction, stratified=stratified)


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


# File I/O

def write_volume(path, magic: bytes, header: Dict, planes: np.ndarray):
    """Write magic, a one-line JSON header and the little-endian float64 payload."""
    header_line = json.dumps(header, separators=(",", ":")).encode("ascii")
    payload = np.ascontiguousarray(planes, dtype="<f8").tobytes()
    with open(path, "wb") as f:
        f.write(magic)
        f.write(header_line + b"\n")
        f.write(payload)


def read_volume(path, magic: bytes, dims: Tuple[str, ...]) -> Tuple[Dict, np.ndarray]:
    """
    Read a file written by write_volume.

    Returns:
        (header dict, flat float64 payload)
    """
    raw = Path(path).read_bytes()
    if not raw.startswith(magic):
        raise FormatError("magic", f"expected {magic!r} at the start of {path}")
    end = raw.find(b"\n", len(magic))
    if end < 0:
        raise FormatError("header", "missing header line terminator")
    try:
        header = json.loads(raw[len(magic):end].decode("ascii"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("header", f"not valid JSON: {exc}")
    if not isinstance(header, dict):
        raise FormatError("header", "must be a JSON object")
    for key in dims:
        value = header.get(key)
        if not isinstance(value, int) or isinstance(value, bool):
            raise FormatError(key, f"must be an integer, got {value!r}")
        if value < 1:
            raise InvalidArgumentError(f"header field {key} must be >= 1, got {value}")
    if header.get("dtype") != DTYPE:
        raise FormatError("dtype", f"expected {DTYPE!r}, got {header.get('dtype')!r}")

    payload = raw[end + 1:]
    expected = 8 * int(np.prod([header[key] for key in dims]))
    if len(payload) != expected:
        raise FormatError("payload", f"expected {expected} bytes, found {len(payload)}")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    if not np.all(np.isfinite(flat)):
        raise FormatError("values", "payload contains non-finite values")
    return header, flat


def save_cube(cube: HyperCube, path):
    """Write a cube as .hsc (band-sequential, row-major within a band)."""
    header = {"n": cube.n, "m": cube.m, "l": cube.l, "dtype": DTYPE, "order": CUBE_ORDER}
    write_volume(path, CUBE_MAGIC, header, cube.values.transpose(2, 0, 1))
    logger.info("wrote cube %dx%dx%d to %s", cube.n, cube.m, cube.l, path)


def load_cube(path) -> HyperCube:
    """Read a .hsc cube exactly as stored (see normalize_cube for scaling)."""
    header, flat = read_volume(path, CUBE_MAGIC, ("n", "m", "l"))
    if header.get("order") != CUBE_ORDER:
        raise FormatError("order", f"expected {CUBE_ORDER!r}, got {header.get('order')!r}")
    n, m, l = header["n"], header["m"], header["l"]
    return HyperCube(flat.reshape(l, n, m).transpose(1, 2, 0).copy())


def save_labels(labels: LabelMap, path):
    """Write labels as an 8-bit binary PGM."""
    if labels.labels.max() > 255:
        raise InvalidArgumentError("PGM label files hold at most 255 classes")
    Image.fromarray(labels.labels.astype(np.uint8)).save(path, format="PPM")
    logger.info("wrote %dx%d label map to %s", labels.n, labels.m, path)


def load_labels(path, classes: int = None) -> LabelMap:
    """Read an 8-bit binary PGM label map; classes defaults to the largest label."""
    try:
        with Image.open(path) as im:
            if im.format != "PPM" or im.mode != "L":
                raise FormatError("magic", f"{path} is not an 8-bit binary PGM")
            arr = np.asarray(im, dtype=np.int64).copy()
    except UnidentifiedImageError:
        raise FormatError("magic", f"{path} is not an 8-bit binary PGM")
    top = int(arr.max())
    if classes is None:
        classes = top
    elif top > classes:
        raise FormatError("labels", f"label {top} exceeds class count {classes}")
    return LabelMap(arr, classes)
