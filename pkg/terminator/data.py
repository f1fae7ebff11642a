import gzip
import logging
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterator, Optional, Sequence, Tuple, Union

import numpy as np
import requests
from requests.adapters import HTTPAdapter
from urllib3.util.retry import Retry

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
MNIST_BASE_URL = "https://ossci-datasets.s3.amazonaws.com/mnist/"
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
SYNTHETIC_KINDS = ("stripes", "blobs")
DEFAULT_PMNIST_SEED = 42


class DataFormatError(Exception):
    """Raised for malformed, truncated or unavailable dataset files."""


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    @classmethod
    def of(cls, images: np.ndarray) -> "NormStats":
        std = float(images.std())
        return cls(mean=float(images.mean()), std=std if std > 0 else 1.0)

    def apply(self, images: np.ndarray) -> np.ndarray:
        return (images - self.mean) / self.std


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 10
    meta: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataFormatError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def sample_shape(self) -> Tuple[int, ...]:
        return tuple(self.images.shape[1:])

    @property
    def norm_stats(self) -> NormStats:
        return NormStats(mean=self.meta["mean"], std=self.meta["std"])


def _open(path: Path) -> bytes:
    try:
        if path.suffix == ".gz":
            with gzip.open(path, "rb") as f:
                return f.read()
        return path.read_bytes()
    except (OSError, EOFError) as e:
        logging.error("Error reading %s: %s", path, e)
        raise DataFormatError(f"cannot read {path}: {e}") from e


def read_idx(path: Union[str, Path], expected_magic: Optional[int] = None) -> np.ndarray:
    """Parse an IDX container of unsigned bytes (big-endian header)."""
    path = Path(path)
    data = _open(path)
    if len(data) < 4:
        raise DataFormatError(f"{path}: file too short for an IDX header")
    (magic,) = struct.unpack(">I", data[:4])
    if expected_magic is not None and magic != expected_magic:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 8 != 0x08:
        raise DataFormatError(f"{path}: unsupported IDX element type in magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(data) < header:
        raise DataFormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) - header < count:
        raise DataFormatError(f"{path}: truncated payload ({len(data) - header} of {count} bytes)")
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(
    images_path: Union[str, Path],
    labels_path: Union[str, Path],
    split: str = "train",
    stats: Optional[NormStats] = None,
    limit: Optional[int] = None,
) -> Dataset:
    """Images as [N, 1, 28, 28], scaled to [0, 1] then standardized with `stats` (own stats if None)."""
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    scaled = images.astype(np.float64)[:, None] / 255.0
    stats = stats or NormStats.of(scaled)
    return Dataset(
        images=stats.apply(scaled),
        labels=labels.astype(np.int64),
        split=split,
        num_classes=10,
        meta={"mean": stats.mean, "std": stats.std},
    )


def data_root(root: Union[str, Path, None] = None) -> Path:
    return Path(root or os.environ.get("TERMINATOR_DATA_DIR", "./data"))


def _resolve(root: Path, stem: str) -> Optional[Path]:
    for folder in (root, root / "mnist"):
        for name in (stem + ".gz", stem):
            candidate = folder / name
            if candidate.exists():
                return candidate
    return None


def make_session(total_retries: int = 3) -> requests.Session:
    session = requests.Session()
    retry = Retry(
        total=total_retries,
        backoff_factor=0.7,
        status_forcelist=(429, 500, 502, 503, 504),
        allowed_methods=("GET",),
        raise_on_status=False,
    )
    adapter = HTTPAdapter(max_retries=retry)
    session.mount("https://", adapter)
    session.mount("http://", adapter)
    return session


def download_mnist(
    root: Union[str, Path, None] = None,
    session: Optional[requests.Session] = None,
    base_url: str = MNIST_BASE_URL,
    timeout: int = 60,
) -> Path:
    """Fetch the four gzip IDX files into `root`, skipping files already present."""
    target = data_root(root)
    target.mkdir(parents=True, exist_ok=True)
    session = session or make_session()
    for stems in MNIST_FILES.values():
        for stem in stems:
            if _resolve(target, stem) is not None:
                continue
            url = base_url + stem + ".gz"
            try:
                response = session.get(url, timeout=timeout)
                response.raise_for_status()
            except requests.RequestException as e:
                logging.error("Error downloading %s: %s", url, e)
                raise DataFormatError(f"download of {url} failed: {e}") from e
            (target / (stem + ".gz")).write_bytes(response.content)
            logging.info("Downloaded %s", url)
    return target


def load_mnist(
    root: Union[str, Path, None] = None,
    split: str = "train",
    limit: Optional[int] = None,
    stats: Optional[NormStats] = None,
) -> Dataset:
    """Load an MNIST split from `root` (gz or raw IDX); the test split uses train statistics."""
    if split not in MNIST_FILES:
        raise ValueError(f"unknown split {split!r}")
    base = data_root(root)
    paths = [_resolve(base, stem) for stem in MNIST_FILES[split]]
    if any(p is None for p in paths):
        raise DataFormatError(f"MNIST {split} files not found under {base}; run `terminator download` first")
    if stats is None and split == "test":
        stats = load_mnist(base, "train", limit=None).norm_stats
    return load_idx(paths[0], paths[1], split=split, stats=stats, limit=limit)


def to_sequential(ds: Dataset, permutation_seed: Optional[int] = None) -> Dataset:
    """Flatten [N, C, H, W] row-major to [N, C, H*W], optionally under a fixed pixel permutation."""
    if ds.images.ndim != 4:
        raise DataFormatError(f"expected 2D images [N,C,H,W], got {ds.images.shape}")
    n, c, h, w = ds.images.shape
    flat = ds.images.reshape(n, c, h * w)
    sequential = replace(ds, images=np.ascontiguousarray(flat), meta=dict(ds.meta))
    if permutation_seed is None:
        return sequential
    perm = np.random.default_rng(permutation_seed).permutation(h * w)
    permuted = apply_permutation(sequential, perm)
    permuted.meta["permutation_seed"] = permutation_seed
    return permuted


def apply_permutation(ds: Dataset, perm: Sequence[int]) -> Dataset:
    perm = np.asarray(perm, dtype=np.int64)
    return replace(ds, images=np.ascontiguousarray(ds.images[..., perm]), meta={**ds.meta, "permutation": perm.tolist()})


def inverse_permutation(perm: Sequence[int]) -> np.ndarray:
    return np.argsort(np.asarray(perm, dtype=np.int64))


def _stripes(rng: np.random.Generator, label: int, size: int) -> np.ndarray:
    half = int(rng.integers(1, 3))
    phase = int(rng.integers(0, 2 * half))
    band = ((np.arange(size) + phase) // half) % 2
    pattern = np.tile(band[:, None], (1, size)) if label == 0 else np.tile(band[None, :], (size, 1))
    return pattern.astype(np.float64) + rng.normal(0.0, 0.05, size=(size, size))


def _blob(rng: np.random.Generator, label: int, size: int) -> np.ndarray:
    quarter = size / 4.0
    cy = quarter * (1 + 2 * (label // 2)) + rng.uniform(-0.5, 0.5)
    cx = quarter * (1 + 2 * (label % 2)) + rng.uniform(-0.5, 0.5)
    yy, xx = np.mgrid[0:size, 0:size]
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (size / 8.0) ** 2))
    return blob + rng.normal(0.0, 0.05, size=(size, size))


def synthetic(
    kind: str,
    n: int,
    seed: int = 0,
    size: int = 8,
    split: str = "train",
    stats: Optional[NormStats] = None,
) -> Dataset:
    """Seeded separable images: `stripes` (horizontal=0 / vertical=1) or `blobs` (quadrant 0..3)."""
    if kind not in SYNTHETIC_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}, expected one of {SYNTHETIC_KINDS}")
    num_classes = 2 if kind == "stripes" else 4
    if n < num_classes:
        raise ValueError(f"need at least {num_classes} samples, got {n}")
    make = _stripes if kind == "stripes" else _blob
    rng = np.random.default_rng(seed)
    labels = np.arange(n, dtype=np.int64) % num_classes
    images = np.stack([make(rng, int(label), size) for label in labels])[:, None]
    stats = stats or NormStats.of(images)
    return Dataset(
        images=stats.apply(images),
        labels=labels,
        split=split,
        num_classes=num_classes,
        meta={"mean": stats.mean, "std": stats.std, "kind": kind, "seed": seed},
    )


def subset(ds: Dataset, n: Optional[int]) -> Dataset:
    if n is None or n >= len(ds):
        return ds
    return replace(ds, images=ds.images[:n], labels=ds.labels[:n])


def batches(
    ds: Dataset,
    batch_size: int,
    shuffle_seed: Optional[int] = None,
) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Yield (images, labels); the order is a seeded permutation, the last batch may be short."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(ds)) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(len(ds))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield ds.images[idx], ds.labels[idx]
