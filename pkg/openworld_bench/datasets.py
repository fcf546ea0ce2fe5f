"""
Dataset containers, MNIST-format (IDX) and PGM parsers, and OOD generators.

Images are held as float64 arrays of shape (N, C, H, W) with every pixel in [0, 1].
In-distribution data carries labels; OOD data never does.
"""

import gzip
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .utils import BenchError, derive_seed

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
# Largest payload an IDX header may declare
IDX_MAX_BYTES = 1 << 31
IDX_CHUNK_BYTES = 1 << 20

MNIST_FILES = {
    'train': ('train-images-idx3-ubyte', 'train-labels-idx1-ubyte'),
    'test': ('t10k-images-idx3-ubyte', 't10k-labels-idx1-ubyte'),
}

SHAPE_FAMILY = ('bars', 'crosses', 'rings', 'boxes', 'diagonals', 'dots')

ROLE_IN = 'in-distribution'
ROLE_OUT = 'out-of-distribution'


class DatasetError(BenchError):
    """Raised for invalid dataset contents or requests."""
    pass


class IdxFormatError(DatasetError):
    pass


class PgmFormatError(DatasetError):
    pass


class ShapeSetOverlapError(DatasetError):
    """Raised when paired in/out shape sets share a class."""
    pass


def _check_pixels(images: np.ndarray, what: str) -> None:
    if images.size and (not np.all(np.isfinite(images)) or images.min() < 0.0 or images.max() > 1.0):
        raise DatasetError(f"{what}: pixels must lie in [0, 1]")


def _as_nchw(images: np.ndarray) -> np.ndarray:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        return images[:, None, :, :]
    if images.ndim != 4:
        raise DatasetError(f"Expected images of shape (N, H, W) or (N, C, H, W), got {images.shape}")
    return images


@dataclass
class LabeledDataset:
    """In-distribution images with integer labels."""
    images: np.ndarray
    labels: np.ndarray
    label_names: List[str]
    name: str = 'in'
    role: str = field(default=ROLE_IN, init=False)

    def __post_init__(self):
        self.images = _as_nchw(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.label_names = list(self.label_names)
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{self.name}: {len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.label_names)):
            raise DatasetError(f"{self.name}: labels must lie in [0, {len(self.label_names)})")
        _check_pixels(self.images, self.name)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, indices: Sequence[int]) -> 'LabeledDataset':
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.images[idx], self.labels[idx], self.label_names, self.name)

    def take(self, n: int, seed: int = 0) -> 'LabeledDataset':
        """First ``n`` items under a seeded shuffle."""
        order = np.random.default_rng(seed).permutation(len(self))
        return self.subset(order[:n])

    def split(self, fraction: float, seed: int = 0) -> Tuple['LabeledDataset', 'LabeledDataset']:
        """Seeded split into (fraction, 1 - fraction) parts."""
        order = np.random.default_rng(seed).permutation(len(self))
        cut = int(round(fraction * len(self)))
        return self.subset(order[:cut]), self.subset(order[cut:])

    def as_unlabeled(self, source_name: Optional[str] = None) -> 'UnlabeledDataset':
        return UnlabeledDataset(self.images, source_name or self.name)


@dataclass
class UnlabeledDataset:
    """Out-of-distribution images; labels are never carried."""
    images: np.ndarray
    source_name: str
    role: str = field(default=ROLE_OUT, init=False)

    def __post_init__(self):
        self.images = _as_nchw(self.images)
        _check_pixels(self.images, self.source_name)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return tuple(self.images.shape[1:])

    def subset(self, indices: Sequence[int]) -> 'UnlabeledDataset':
        return UnlabeledDataset(self.images[np.asarray(indices, dtype=np.int64)], self.source_name)

    def take(self, n: int, seed: int = 0) -> 'UnlabeledDataset':
        order = np.random.default_rng(seed).permutation(len(self))
        return self.subset(order[:n])

    def split(self, fraction: float, seed: int = 0) -> Tuple['UnlabeledDataset', 'UnlabeledDataset']:
        order = np.random.default_rng(seed).permutation(len(self))
        cut = int(round(fraction * len(self)))
        return self.subset(order[:cut]), self.subset(order[cut:])


Dataset = Union[LabeledDataset, UnlabeledDataset]


# --- IDX ---

def _open_binary(path: Path) -> BinaryIO:
    with open(path, 'rb') as fh:
        gzipped = fh.read(2) == b'\x1f\x8b'
    return gzip.open(path, 'rb') if gzipped else open(path, 'rb')


def _read_payload(fh: BinaryIO, expected: int) -> bytes:
    chunks = []
    remaining = expected
    while remaining > 0:
        chunk = fh.read(min(IDX_CHUNK_BYTES, remaining))
        if not chunk:
            break
        chunks.append(chunk)
        remaining -= len(chunk)
    return b''.join(chunks)


def _read_idx(path: PathLike, expected_magic: int) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"File not found: {path}")
    with _open_binary(path) as fh:
        magic = fh.read(4)
        if len(magic) < 4 or struct.unpack('>I', magic)[0] != expected_magic:
            raise IdxFormatError(f"{path}: bad magic bytes {magic.hex(' ') or '<empty>'}, "
                                 f"expected {expected_magic:08x}")
        ndim = magic[3]
        dims_raw = fh.read(4 * ndim)
        if len(dims_raw) < 4 * ndim:
            raise IdxFormatError(f"{path}: truncated header, expected {4 * ndim} dimension bytes, "
                                 f"got {len(dims_raw)}")
        dims = struct.unpack('>' + 'I' * ndim, dims_raw)
        expected = math.prod(dims)
        if expected > IDX_MAX_BYTES:
            raise IdxFormatError(f"{path}: header declares {expected} payload bytes (dims {dims}), "
                                 f"above the {IDX_MAX_BYTES} byte limit")
        if not isinstance(fh, gzip.GzipFile):
            available = os.path.getsize(path) - 4 - 4 * ndim
            if available < expected:
                raise IdxFormatError(f"{path}: truncated payload, expected {expected} bytes, got {available}")
        payload = _read_payload(fh, expected)
    if len(payload) < expected:
        raise IdxFormatError(f"{path}: truncated payload, expected {expected} bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def write_idx(path: PathLike, array: np.ndarray) -> Path:
    """Write an unsigned-byte IDX file (1-D labels or 3-D images)."""
    path = Path(path)
    data = np.asarray(array, dtype=np.uint8)
    header = struct.pack('>BBBB', 0, 0, 0x08, data.ndim) + struct.pack('>' + 'I' * data.ndim, *data.shape)
    path.parent.mkdir(parents=True, exist_ok=True)
    opener = gzip.open if path.suffix == '.gz' else open
    with opener(path, 'wb') as fh:
        fh.write(header + data.tobytes())
    return path


def load_idx(images_path: PathLike, labels_path: Optional[PathLike] = None,
             label_names: Optional[Sequence[str]] = None, name: Optional[str] = None) -> Dataset:
    """
    Load MNIST-format files; bytes are scaled to [0, 1] by division by 255.

    Args:
        images_path: IDX3 image file (plain or gzip)
        labels_path: Optional IDX1 label file; without it an UnlabeledDataset is returned
        label_names: Class names; defaults to the label values as strings
        name: Dataset name; defaults to the image file stem

    Raises:
        IdxFormatError: Bad magic (observed bytes reported) or truncated payload
    """
    name = name or Path(images_path).name.split('.')[0]
    raw = _read_idx(images_path, IDX_IMAGES_MAGIC)
    images = raw.astype(np.float64) / 255.0
    if labels_path is None:
        return UnlabeledDataset(images, name)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
    if label_names is None:
        width = int(labels.max()) + 1 if len(labels) else 0
        label_names = [str(i) for i in range(width)]
    return LabeledDataset(images, labels, list(label_names), name)


def _find_file(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise DatasetError(f"Neither {stem} nor {stem}.gz found in {directory}")


def load_mnist(directory: PathLike, split: str = 'test') -> LabeledDataset:
    """Load the MNIST train or test split from a directory of IDX files."""
    if split not in MNIST_FILES:
        raise DatasetError(f"Unknown MNIST split '{split}'")
    directory = Path(directory)
    images_stem, labels_stem = MNIST_FILES[split]
    return load_idx(_find_file(directory, images_stem), _find_file(directory, labels_stem),
                    name=f"mnist-{split}")


# --- PGM ---

def _pgm_header(raw: bytes, path: PathLike) -> Tuple[int, int, int, int]:
    if raw[:2] != b'P5':
        raise PgmFormatError(f"{path}: not a binary PGM, magic is {raw[:2]!r}")
    pos = 2
    fields: List[int] = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b'#':
            while pos < len(raw) and raw[pos:pos + 1] not in (b'\n', b'\r'):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise PgmFormatError(f"{path}: malformed header")
        fields.append(int(raw[start:pos]))
    # exactly one whitespace byte separates the header from the raster
    pos += 1
    width, height, maxval = fields
    return width, height, maxval, pos


def load_pgm(path: PathLike) -> np.ndarray:
    """
    Read a binary (P5) grayscale PGM into an (H, W) array in [0, 1].

    Raises:
        PgmFormatError: Non-P5 magic, maxval above 255, or short payload
    """
    path = Path(path)
    raw = path.read_bytes()
    width, height, maxval, offset = _pgm_header(raw, path)
    if maxval > 255 or maxval < 1:
        raise PgmFormatError(f"{path}: maxval {maxval} not supported (must be 1..255)")
    expected = width * height
    payload = raw[offset:offset + expected]
    if len(payload) < expected:
        raise PgmFormatError(f"{path}: short payload, expected {expected} bytes, got {len(payload)}")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(height, width).astype(np.float64)
    return np.clip(pixels / maxval, 0.0, 1.0)


def write_pgm(path: PathLike, image: np.ndarray) -> Path:
    """Write an (H, W) image in [0, 1] as an 8-bit P5 PGM."""
    path = Path(path)
    data = np.asarray(image, dtype=np.float64)
    if data.ndim == 3 and data.shape[0] == 1:
        data = data[0]
    if data.ndim != 2:
        raise DatasetError(f"write_pgm expects a single grayscale image, got shape {data.shape}")
    pixels = np.floor(np.clip(data, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode('ascii')
    path.write_bytes(header + pixels.tobytes())
    return path


def resize_nearest(image: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of an (H, W) image."""
    height, width = image.shape
    rows = np.minimum((np.arange(size[0]) + 0.5) * height / size[0], height - 1).astype(np.int64)
    cols = np.minimum((np.arange(size[1]) + 0.5) * width / size[1], width - 1).astype(np.int64)
    return image[np.ix_(rows, cols)]


def _stack(images: List[np.ndarray], shape: Optional[Tuple[int, ...]], what: str) -> np.ndarray:
    if not images:
        raise DatasetError(f"{what}: no images found")
    if shape is not None:
        images = [img if img.shape == tuple(shape[-2:]) else resize_nearest(img, tuple(shape[-2:]))
                  for img in images]
    first = images[0].shape
    for img in images:
        if img.shape != first:
            raise DatasetError(f"{what}: mixed image sizes {first} and {img.shape}; pass a target shape")
    return np.stack(images)[:, None, :, :]


def load_pgm_folder(folder: PathLike, shape: Optional[Tuple[int, ...]] = None,
                    source_name: Optional[str] = None) -> UnlabeledDataset:
    """Load every ``*.pgm`` under ``folder`` (sorted by name) as an OOD source."""
    folder = Path(folder)
    if not folder.is_dir():
        raise DatasetError(f"Not a directory: {folder}")
    files = sorted(folder.glob('*.pgm'))
    images = _stack([load_pgm(f) for f in files], shape, str(folder))
    return UnlabeledDataset(images, source_name or folder.name)


def load_manifest(path: PathLike, shape: Optional[Tuple[int, ...]] = None) -> Dataset:
    """
    Load a dataset manifest.

    The file is plain text: ``role: in`` or ``role: out`` (required), an optional
    ``name: <name>``, then one ``<pgm path> [label]`` per line. Relative paths are
    resolved against the manifest directory; ``#`` starts a comment.
    """
    path = Path(path)
    role, name = None, path.stem
    entries: List[Tuple[Path, Optional[str]]] = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition(':')
        if sep and key.strip() in ('role', 'name'):
            if key.strip() == 'role':
                role = value.strip()
            else:
                name = value.strip()
            continue
        parts = line.split()
        if len(parts) > 2:
            raise DatasetError(f"{path}:{lineno}: expected '<path> [label]'")
        file_path = Path(parts[0])
        if not file_path.is_absolute():
            file_path = path.parent / file_path
        entries.append((file_path, parts[1] if len(parts) == 2 else None))

    if role not in ('in', 'out'):
        raise DatasetError(f"{path}: missing or invalid role line (expected 'role: in' or 'role: out')")
    images = _stack([load_pgm(p) for p, _ in entries], shape, str(path))
    if role == 'out':
        return UnlabeledDataset(images, name)
    if any(label is None for _, label in entries):
        raise DatasetError(f"{path}: every in-distribution entry needs a label")
    label_names = sorted({label for _, label in entries})
    index = {label: i for i, label in enumerate(label_names)}
    return LabeledDataset(images, [index[label] for _, label in entries], label_names, name)


def save_pgm_folder(folder: PathLike, dataset: Dataset, prefix: str = 'img') -> List[Path]:
    """Write each image of ``dataset`` as ``<prefix>_<index>.pgm``."""
    folder = Path(folder)
    width = len(str(max(len(dataset) - 1, 0)))
    return [write_pgm(folder / f"{prefix}_{i:0{width}d}.pgm", img[0]) for i, img in enumerate(dataset.images)]


# --- generators ---

def _normalize_shape(shape: Sequence[int]) -> Tuple[int, int, int]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 2:
        return (1,) + shape
    if len(shape) != 3 or min(shape) < 1:
        raise DatasetError(f"Image shape must be (H, W) or (C, H, W), got {shape}")
    return shape


def gen_gaussian_noise_ood(count: int = 10000, shape: Sequence[int] = (1, 28, 28), mean: float = 127.0,
                           stddev: float = 50.0, seed: int = 0, source_name: str = 'gaussian') -> UnlabeledDataset:
    """
    Per-pixel N(mean, stddev^2) samples on the [0, 255] scale, clipped, then divided by 255.

    Normals come from Box-Muller over a seeded PCG64 generator.
    """
    if count < 1:
        raise DatasetError(f"count must be >= 1, got {count}")
    if stddev <= 0:
        raise DatasetError(f"stddev must be positive, got {stddev}")
    shape = _normalize_shape(shape)
    n = count * int(np.prod(shape))
    pairs = (n + 1) // 2
    rng = np.random.default_rng(seed)
    u1 = 1.0 - rng.random(pairs)
    u2 = rng.random(pairs)
    radius = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([radius * np.cos(2 * np.pi * u2), radius * np.sin(2 * np.pi * u2)])[:n]
    pixels = np.clip(mean + stddev * z, 0.0, 255.0) / 255.0
    logger.info("Generated %d Gaussian-noise images (mean=%s, stddev=%s, seed=%d)", count, mean, stddev, seed)
    return UnlabeledDataset(pixels.reshape((count,) + shape), source_name)


def _draw_shape(kind: str, height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    canvas = np.zeros((height, width))
    scale = min(height, width)
    margin = scale / 4.0
    cy = rng.uniform(margin, height - margin)
    cx = rng.uniform(margin, width - margin)
    half = rng.uniform(0.15, 0.25) * scale
    thick = rng.uniform(0.8, 1.4)

    if kind == 'bars':
        if rng.random() < 0.5:
            mask = (np.abs(yy - cy) < thick) & (np.abs(xx - cx) < half)
        else:
            mask = (np.abs(xx - cx) < thick) & (np.abs(yy - cy) < half)
    elif kind == 'crosses':
        mask = (((np.abs(yy - cy) < thick) & (np.abs(xx - cx) < half))
                | ((np.abs(xx - cx) < thick) & (np.abs(yy - cy) < half)))
    elif kind == 'rings':
        dist = np.hypot(yy - cy, xx - cx)
        mask = np.abs(dist - half) < thick
    elif kind == 'boxes':
        inside = (np.abs(yy - cy) <= half) & (np.abs(xx - cx) <= half)
        core = (np.abs(yy - cy) <= half - 2 * thick) & (np.abs(xx - cx) <= half - 2 * thick)
        mask = inside & ~core
    elif kind == 'diagonals':
        slope = 1.0 if rng.random() < 0.5 else -1.0
        mask = ((np.abs((xx - cx) - slope * (yy - cy)) < 1.5 * thick)
                & (np.abs(yy - cy) < half) & (np.abs(xx - cx) < half))
    elif kind == 'dots':
        mask = np.zeros((height, width), dtype=bool)
        for _ in range(int(rng.integers(2, 5))):
            dy = rng.uniform(2.0, height - 2.0)
            dx = rng.uniform(2.0, width - 2.0)
            mask |= np.hypot(yy - dy, xx - dx) < rng.uniform(1.2, 2.2)
    else:
        raise DatasetError(f"Unknown shape class '{kind}'. Available: {SHAPE_FAMILY}")

    canvas[mask] = rng.uniform(0.7, 1.0)
    return canvas


def gen_synthetic_shapes(count: int, shape: Sequence[int] = (1, 28, 28),
                         class_set: Sequence[str] = ('bars', 'crosses'), seed: int = 0,
                         name: Optional[str] = None) -> LabeledDataset:
    """
    Procedural shapes at random positions, balanced over ``class_set``.

    Args:
        count: Number of images, >= 1
        shape: (H, W) or (C, H, W); channels repeat the same drawing
        class_set: Distinct members of SHAPE_FAMILY; label i is class_set[i]
        seed: Generator seed
    """
    if count < 1:
        raise DatasetError(f"count must be >= 1, got {count}")
    class_set = list(class_set)
    if not class_set or len(set(class_set)) != len(class_set):
        raise DatasetError(f"class_set must be non-empty and distinct, got {class_set}")
    unknown = [c for c in class_set if c not in SHAPE_FAMILY]
    if unknown:
        raise DatasetError(f"Unknown shape classes {unknown}. Available: {SHAPE_FAMILY}")
    channels, height, width = _normalize_shape(shape)
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(count) % len(class_set))
    images = np.empty((count, channels, height, width))
    for i, label in enumerate(labels):
        images[i] = _draw_shape(class_set[label], height, width, rng)[None]
    return LabeledDataset(images, labels, class_set, name or '+'.join(class_set))


def gen_paired_shapes(count_in: int, count_out: int, in_classes: Sequence[str], out_classes: Sequence[str],
                      shape: Sequence[int] = (1, 28, 28), seed: int = 0) -> Tuple[LabeledDataset, UnlabeledDataset]:
    """
    Generate an in-distribution shape set and a disjoint OOD shape set.

    Raises:
        ShapeSetOverlapError: If the two class sets share a member
    """
    overlap = sorted(set(in_classes) & set(out_classes))
    if overlap:
        raise ShapeSetOverlapError(f"In and out shape classes overlap: {overlap}")
    in_data = gen_synthetic_shapes(count_in, shape, in_classes, derive_seed(seed, 'shapes-in'))
    out_data = gen_synthetic_shapes(count_out, shape, out_classes, derive_seed(seed, 'shapes-out'))
    return in_data, out_data.as_unlabeled('shapes:' + '+'.join(out_classes))
