# app/services/data_ingest.py
"""Digit corpora: IDX parsing, 16×16 normalisation, canonical archives and seeded subsets."""
import gzip
import hashlib
import logging
import os
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

IDX_LABEL_MAGIC = 0x00000801
IDX_IMAGE_MAGIC = 0x00000803
ARCHIVE_MAGIC = b"FADA"
ARCHIVE_VERSION = 1
ARCHIVE_SUFFIX = ".fada"
IMAGE_SIZE = 16
NUM_CLASSES = 10
GRAY_WEIGHTS = (0.299, 0.587, 0.114)

# task -> (source domain, target domain)
TASKS: Dict[str, Tuple[str, str]] = {
    "M->U": ("mnist", "usps"),
    "U->M": ("usps", "mnist"),
    "S->M": ("svhn", "mnist"),
    "M->S": ("mnist", "svhn"),
    "S->U": ("svhn", "usps"),
    "U->S": ("usps", "svhn"),
}
# tasks that subsample both domains from their training splits
SUBSAMPLED_TASKS = ("M->U", "U->M")
SUBSAMPLE_COUNTS = {"mnist": 2000, "usps": 1800}

# RNG stream ids; default_rng([seed, stream]) keeps purposes independent
STREAM_SOURCE = 11
STREAM_TARGET_POOL = 12
STREAM_FEW_SHOT = 13


class DataFormatError(ValueError):
    """Raised for malformed IDX files, archives or checkpoints."""

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


def normalize_task(task: str) -> str:
    name = task.strip().upper().replace("→", "->").replace("2", "->")
    if name not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {sorted(TASKS)}")
    return name


# ---------- Datasets ----------
@dataclass
class ImageDataset:
    images: np.ndarray  # N×1×16×16, float32 in [0, 1]
    labels: np.ndarray  # N, int64 in [0, 10)
    domain_tag: str
    provenance: str = ""
    origin: Optional[np.ndarray] = None  # row indices into the dataset this one was cut from

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.images.ndim != 4 or self.images.shape[1:] != (1, IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(f"{self.domain_tag}: images must be N×1×{IMAGE_SIZE}×{IMAGE_SIZE}, got {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.domain_tag}: {self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            raise ValueError(f"{self.domain_tag}: labels must lie in [0, {NUM_CLASSES})")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise ValueError(f"{self.domain_tag}: pixel values must lie in [0, 1]")
        if self.origin is None:
            self.origin = np.arange(self.labels.shape[0], dtype=np.int64)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def inputs(self) -> np.ndarray:
        return self.images

    @property
    def num_classes(self) -> int:
        return NUM_CLASSES

    def classes(self) -> List[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices, provenance: Optional[str] = None) -> "ImageDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return ImageDataset(
            images=self.images[idx],
            labels=self.labels[idx],
            domain_tag=self.domain_tag,
            provenance=provenance or self.provenance,
            origin=self.origin[idx],
        )


@dataclass
class VectorDataset:
    features: np.ndarray  # N×d
    labels: np.ndarray
    domain_tag: str
    provenance: str = ""
    origin: Optional[np.ndarray] = None
    n_classes: Optional[int] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.features.ndim != 2:
            raise ValueError(f"{self.domain_tag}: features must be N×d, got {self.features.shape}")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(f"{self.domain_tag}: {self.features.shape[0]} vectors but {self.labels.shape[0]} labels")
        if self.labels.size and self.labels.min() < 0:
            raise ValueError(f"{self.domain_tag}: labels must be non-negative")
        if self.n_classes is None:
            self.n_classes = int(self.labels.max()) + 1 if self.labels.size else 0
        if self.origin is None:
            self.origin = np.arange(self.labels.shape[0], dtype=np.int64)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def inputs(self) -> np.ndarray:
        return self.features

    @property
    def num_classes(self) -> int:
        return int(self.n_classes)

    def classes(self) -> List[int]:
        return sorted(int(c) for c in np.unique(self.labels))

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.num_classes)

    def subset(self, indices, provenance: Optional[str] = None) -> "VectorDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return VectorDataset(
            features=self.features[idx],
            labels=self.labels[idx],
            domain_tag=self.domain_tag,
            provenance=provenance or self.provenance,
            origin=self.origin[idx],
            n_classes=self.n_classes,
        )


Dataset = Union[ImageDataset, VectorDataset]


# ---------- IDX ----------
def parse_idx(data: bytes) -> np.ndarray:
    """Decode an IDX label (0x801) or image (0x803) container into a uint8 array."""
    if len(data) < 4:
        raise DataFormatError("IDX header missing or truncated", offset=len(data))
    (magic,) = struct.unpack_from(">I", data, 0)
    if magic not in (IDX_LABEL_MAGIC, IDX_IMAGE_MAGIC):
        raise DataFormatError(f"bad IDX magic 0x{magic:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DataFormatError(f"IDX dimension fields truncated: need {header} header bytes", offset=len(data))
    dims = struct.unpack_from(f">{ndim}I", data, 4)
    expected = int(np.prod(dims, dtype=np.int64))
    available = len(data) - header
    if available < expected:
        raise DataFormatError(
            f"IDX payload truncated: dims {list(dims)} need {expected} bytes, found {available}",
            offset=len(data),
        )
    return np.frombuffer(data, dtype=np.uint8, count=expected, offset=header).reshape(dims).copy()


def read_idx(path: str) -> np.ndarray:
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as f:
        return parse_idx(f.read())


# ---------- Normalisation ----------
def _axis_coords(n_in: int, n_out: int):
    if n_out == 1:
        pos = np.zeros(1)
    else:
        pos = np.arange(n_out, dtype=np.float64) * (n_in - 1) / (n_out - 1)
    lo = np.minimum(np.floor(pos).astype(np.int64), n_in - 1)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, pos - lo


def resize_bilinear(img: np.ndarray, size: int = IMAGE_SIZE) -> np.ndarray:
    """Corner-aligned bilinear resize of the last two axes to size×size."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim < 2:
        raise ValueError(f"resize_bilinear needs at least 2 dims, got shape {img.shape}")
    height, width = img.shape[-2:]
    if height < 2 or width < 2:
        raise ValueError(f"resize_bilinear: degenerate input {height}×{width}")
    if size < 1:
        raise ValueError(f"resize_bilinear: bad output size {size}")
    y0, y1, wy = _axis_coords(height, size)
    x0, x1, wx = _axis_coords(width, size)
    rows = img[..., y0, :] * (1.0 - wy)[:, None] + img[..., y1, :] * wy[:, None]
    return rows[..., x0] * (1.0 - wx) + rows[..., x1] * wx


def rgb_to_gray(img: np.ndarray) -> np.ndarray:
    """Luminance 0.299R + 0.587G + 0.114B over the channel axis (…×3×H×W → …×1×H×W)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim < 3 or img.shape[-3] != 3:
        raise ValueError(f"rgb_to_gray expects 3 channels on axis -3, got shape {img.shape}")
    gray = np.tensordot(np.asarray(GRAY_WEIGHTS), img, axes=([0], [img.ndim - 3]))
    return np.expand_dims(gray, axis=-3)


def normalize_images(raw: np.ndarray, channels_last: bool = False) -> np.ndarray:
    """uint8 N×H×W, N×3×H×W (or N×H×W×3 with ``channels_last``) → float32 N×1×16×16 in [0, 1]."""
    x = np.asarray(raw, dtype=np.float64) / 255.0
    if channels_last:
        x = np.moveaxis(x, -1, -3)
    if x.ndim == 3:
        x = x[:, None]
    if x.ndim != 4:
        raise ValueError(f"cannot normalise images of shape {raw.shape}")
    if x.shape[1] == 3:
        x = rgb_to_gray(x)
    elif x.shape[1] != 1:
        raise ValueError(f"unsupported channel count {x.shape[1]}")
    if x.shape[-2:] != (IMAGE_SIZE, IMAGE_SIZE):
        x = resize_bilinear(x, IMAGE_SIZE)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def load_idx_dataset(images_path: str, labels_path: str, domain_tag: str) -> ImageDataset:
    raw_images = read_idx(images_path)
    raw_labels = read_idx(labels_path)
    if raw_images.ndim != 3 or raw_labels.ndim != 1:
        raise DataFormatError(f"expected an image and a label IDX file, got dims {raw_images.ndim} and {raw_labels.ndim}")
    logger.info(f"Parsed {raw_images.shape[0]} {domain_tag} images of {raw_images.shape[1]}x{raw_images.shape[2]}")
    return ImageDataset(
        images=normalize_images(raw_images),
        labels=raw_labels,
        domain_tag=domain_tag,
        provenance=f"idx:{os.path.basename(images_path)}",
    )


def load_image_folder(root: str, domain_tag: str) -> ImageDataset:
    """One sub-directory per label (``0`` … ``9``); any format Pillow reads."""
    images, labels = [], []
    for label in range(NUM_CLASSES):
        class_dir = os.path.join(root, str(label))
        if not os.path.isdir(class_dir):
            continue
        for name in sorted(os.listdir(class_dir)):
            path = os.path.join(class_dir, name)
            try:
                with Image.open(path) as im:
                    arr = np.asarray(im.convert("L" if im.mode in ("1", "L", "I;16") else "RGB"))
            except OSError as e:
                logger.warning(f"Skip unreadable image {path}: {e}")
                continue
            images.append(normalize_images(arr[None], channels_last=arr.ndim == 3)[0])
            labels.append(label)
    if not images:
        raise DataFormatError(f"no readable images under {root}")
    logger.info(f"Loaded {len(images)} {domain_tag} images from {root}")
    return ImageDataset(np.stack(images), np.asarray(labels), domain_tag, provenance=f"folder:{root}")


# ---------- Canonical archive ----------
def encode_archive(ds: Dataset) -> bytes:
    x = ds.inputs
    if x.ndim == 2:
        x = x[:, None, None, :]
    n, c, h, w = x.shape
    if ds.labels.size and ds.labels.max() > 255:
        raise ValueError("archive labels are stored as single bytes")
    header = ARCHIVE_MAGIC + bytes([ARCHIVE_VERSION]) + struct.pack("<IIII", n, c, h, w)
    return header + x.astype("<f4").tobytes() + ds.labels.astype(np.uint8).tobytes()


def decode_archive(data: bytes, domain_tag: str, provenance: str = "") -> Dataset:
    if len(data) < 5 or data[:4] != ARCHIVE_MAGIC:
        raise DataFormatError("not a FADA archive (bad magic)", offset=0)
    if data[4] != ARCHIVE_VERSION:
        raise DataFormatError(f"unsupported archive version {data[4]}", offset=4)
    if len(data) < 21:
        raise DataFormatError("archive header truncated", offset=len(data))
    n, c, h, w = struct.unpack_from("<IIII", data, 5)
    count = n * c * h * w
    expected = 21 + 4 * count + n
    if len(data) != expected:
        raise DataFormatError(f"archive size {len(data)} does not match header (expected {expected})", offset=len(data))
    x = np.frombuffer(data, dtype="<f4", count=count, offset=21).reshape(n, c, h, w).astype(np.float32)
    labels = np.frombuffer(data, dtype=np.uint8, count=n, offset=21 + 4 * count).astype(np.int64)
    if (c, h, w) == (1, IMAGE_SIZE, IMAGE_SIZE):
        return ImageDataset(x, labels, domain_tag, provenance=provenance)
    return VectorDataset(x.reshape(n, -1), labels, domain_tag, provenance=provenance)


def write_archive(ds: Dataset, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as f:
        f.write(encode_archive(ds))
    logger.info(f"Wrote {ds.domain_tag} archive with {len(ds)} samples to {path}")


def read_archive(path: str, domain_tag: Optional[str] = None) -> Dataset:
    tag = domain_tag or os.path.basename(path).split("_")[0].split(".")[0]
    with open(path, "rb") as f:
        return decode_archive(f.read(), tag, provenance=f"archive:{os.path.basename(path)}")


def load_vector_file(path: str, domain_tag: str) -> VectorDataset:
    """``.npz`` with ``features`` (N×d) and ``labels`` (N) arrays."""
    with np.load(path) as npz:
        if "features" not in npz or "labels" not in npz:
            raise DataFormatError(f"{path}: expected arrays 'features' and 'labels'")
        return VectorDataset(npz["features"], npz["labels"], domain_tag, provenance=f"npz:{os.path.basename(path)}")


def archive_path(data_dir: str, domain: str, split: str) -> str:
    return os.path.join(data_dir, f"{domain}_{split}{ARCHIVE_SUFFIX}")


def task_archives(task: str, data_dir: str) -> List[str]:
    """Archive paths prepare_task reads for a task, source first."""
    task = normalize_task(task)
    src_domain, tgt_domain = TASKS[task]
    tgt_split = "train" if task in SUBSAMPLED_TASKS else "test"
    return [archive_path(data_dir, src_domain, "train"), archive_path(data_dir, tgt_domain, tgt_split)]


@lru_cache(maxsize=32)
def _archive_sha256(path: str, size: int, mtime_ns: int) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def data_fingerprint(task: str, data_dir: str) -> str:
    """
    Content hash of the archives behind a task.

    Only archive names and bytes enter the hash, so copies of the same corpus
    in different directories share a fingerprint. Missing archives hash as
    "missing".
    """
    h = hashlib.sha256()
    for path in task_archives(task, data_dir):
        h.update(os.path.basename(path).encode("utf-8"))
        if os.path.exists(path):
            st = os.stat(path)
            h.update(_archive_sha256(os.path.abspath(path), st.st_size, st.st_mtime_ns).encode("ascii"))
        else:
            h.update(b"missing")
    return h.hexdigest()


# ---------- Seeded subsets ----------
def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), stream])


def sample_source_subset(ds: Dataset, count: int, seed: int) -> Dataset:
    """Uniform sample of ``count`` rows without replacement."""
    if count < 1 or count > len(ds):
        raise ValueError(f"cannot sample {count} of {len(ds)} {ds.domain_tag} samples")
    idx = _rng(seed, STREAM_SOURCE).permutation(len(ds))[:count]
    return ds.subset(idx, provenance=f"{ds.provenance}|sample:{count}@{seed}")


def sample_few_shot_target(ds: Dataset, n_per_class: int, seed: int) -> Tuple[Dataset, Dataset]:
    """Pick up to ``n_per_class`` labelled samples per class; the rest is held out.

    Classes with fewer than ``n_per_class`` samples contribute all they have.
    """
    if n_per_class < 1:
        raise ValueError(f"n_per_class must be >= 1, got {n_per_class}")
    rng = _rng(seed, STREAM_FEW_SHOT)
    picks = []
    for c in ds.classes():
        members = np.flatnonzero(ds.labels == c)
        picks.append(members[rng.permutation(members.size)[:n_per_class]])
    train_idx = np.sort(np.concatenate(picks)) if picks else np.zeros(0, dtype=np.int64)
    mask = np.ones(len(ds), dtype=bool)
    mask[train_idx] = False
    heldout_idx = np.flatnonzero(mask)

    train = ds.subset(train_idx, provenance=f"{ds.provenance}|{n_per_class}-shot@{seed}")
    heldout = ds.subset(heldout_idx, provenance=f"{ds.provenance}|heldout@{seed}")
    absent = sorted(set(range(ds.num_classes)) - set(train.classes()))
    if absent:
        logger.warning(f"Few-shot {ds.domain_tag} set has no samples for classes {absent}")
    return train, heldout


def assert_disjoint(train: Dataset, test: Dataset) -> None:
    """Train and test must not share rows of their common parent dataset."""
    overlap = np.intersect1d(train.origin, test.origin)
    if overlap.size:
        raise ValueError(f"{overlap.size} evaluation samples were also training picks")


@dataclass
class TaskData:
    task: str
    source: Dataset
    target_pool: Dataset
    target_train: Dataset
    target_test: Dataset
    capped: bool = False
    notes: Dict[str, str] = field(default_factory=dict)
    fingerprint: str = ""


def prepare_task(task: str, data_dir: str, n_shot: int, seed: int,
                 source_cap: Optional[int] = None) -> TaskData:
    """Build the source set, few-shot target picks and target test set of a digit task.

    M->U / U->M draw 2000 MNIST and 1800 USPS training images and test on the
    held-out part of the sampled target pool. The SVHN tasks train on the full
    source training split and test on the target test split minus the picks.
    """
    task = normalize_task(task)
    src_domain, tgt_domain = TASKS[task]
    source_full = read_archive(archive_path(data_dir, src_domain, "train"), src_domain)

    if task in SUBSAMPLED_TASKS:
        source = sample_source_subset(source_full, SUBSAMPLE_COUNTS[src_domain], seed)
        target_full = read_archive(archive_path(data_dir, tgt_domain, "train"), tgt_domain)
        count = SUBSAMPLE_COUNTS[tgt_domain]
        idx = _rng(seed, STREAM_TARGET_POOL).permutation(len(target_full))[:count]
        target_pool = target_full.subset(idx, provenance=f"{target_full.provenance}|pool:{count}@{seed}")
    else:
        source = source_full
        target_pool = read_archive(archive_path(data_dir, tgt_domain, "test"), tgt_domain)

    capped = False
    if source_cap is not None and len(source) > source_cap:
        source = sample_source_subset(source, source_cap, seed)
        capped = True
        logger.warning(f"Source set of {task} capped to {source_cap} samples; run excluded from reference comparisons")

    target_train, target_test = sample_few_shot_target(target_pool, n_shot, seed)
    assert_disjoint(target_train, target_test)
    logger.info(
        f"Task {task}: {len(source)} source, {len(target_train)} target picks, "
        f"{len(target_test)} target test samples"
    )
    return TaskData(task, source, target_pool, target_train, target_test, capped=capped,
                    fingerprint=data_fingerprint(task, data_dir))
