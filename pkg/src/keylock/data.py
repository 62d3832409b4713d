"""Dataset ingestion: CIFAR-10 binary batches, subsetting, augmentation.

The binary record layout is 1 label byte followed by 3072 pixel bytes in
R-plane, G-plane, B-plane order, each plane row-major; a batch file holds
10,000 records (30,730,000 bytes). Loaded images are float32 in [0,1];
per-channel normalization constants are computed from the train split and
stored on both splits so train and eval share identical preprocessing.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

RECORD_BYTES = 3073
BATCH_RECORDS = 10_000
BATCH_BYTES = RECORD_BYTES * BATCH_RECORDS
TRAIN_BATCH_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_BATCH_FILE = "test_batch.bin"
DATA_DIR_ENV = "KEYLOCK_DATA_DIR"

AUG_PAD = 4  # random-crop padding, in pixels


class DataFormatError(ValueError):
    """Source bytes do not match the documented record layout."""


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, h, w) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str
    channel_mean: np.ndarray  # (3,)
    channel_std: np.ndarray  # (3,)

    def __len__(self) -> int:
        return len(self.labels)


def _parse_batch(raw: bytes, path: str, num_classes: int = 10) -> tuple[np.ndarray, np.ndarray]:
    if len(raw) % RECORD_BYTES != 0:
        raise DataFormatError(
            f"{path}: size {len(raw)} is not a multiple of the {RECORD_BYTES}-byte record"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max(initial=0) >= num_classes:
        raise DataFormatError(f"{path}: label byte {labels.max()} outside [0, {num_classes})")
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def _read_batch_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = path.read_bytes()
    if len(raw) != BATCH_BYTES:
        raise DataFormatError(f"{path}: expected {BATCH_BYTES} bytes, got {len(raw)}")
    return _parse_batch(raw, str(path))


def resolve_data_dir(path: str | Path | None) -> Path:
    """CLI/config path wins; otherwise the KEYLOCK_DATA_DIR environment variable."""
    if path is not None:
        return Path(path)
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    raise FileNotFoundError(f"no dataset path given and {DATA_DIR_ENV} is not set")


def load_cifar10(path: str | Path) -> tuple[Dataset, Dataset]:
    """Load the standard binary batches found under `path` (read-only)."""
    root = Path(path)
    if (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    train_parts = [_read_batch_file(root / f) for f in TRAIN_BATCH_FILES]
    test_images, test_labels = _read_batch_file(root / TEST_BATCH_FILE)
    train_images = np.concatenate([p[0] for p in train_parts])
    train_labels = np.concatenate([p[1] for p in train_parts])
    mean = train_images.mean(axis=(0, 2, 3))
    std = train_images.std(axis=(0, 2, 3))
    train = Dataset(train_images, train_labels, "train", mean, std)
    test = Dataset(test_images, test_labels, "test", mean, std)
    return train, test


def write_cifar_batches(images: np.ndarray, labels: np.ndarray, out_dir: str | Path,
                        records_per_file: int = BATCH_RECORDS) -> list[Path]:
    """Serialize (N,3,32,32) [0,1] images into standard-format train/test batch files.

    Lets any tooling that speaks the binary layout (including load_cifar10)
    consume procedurally generated data.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    pixels = np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8).reshape(len(labels), 3072)
    records = np.concatenate([labels.astype(np.uint8)[:, None], pixels], axis=1)
    paths = []
    for i in range(0, len(records), records_per_file):
        idx = i // records_per_file
        name = TRAIN_BATCH_FILES[idx] if idx < len(TRAIN_BATCH_FILES) else TEST_BATCH_FILE
        p = out_dir / name
        p.write_bytes(records[i : i + records_per_file].tobytes())
        paths.append(p)
    return paths


def sample_subset(dataset: Dataset, size: int, seed: int, stratified: bool = True) -> Dataset:
    """Deterministic subset, original index order preserved; stratified balances classes."""
    n = len(dataset)
    if size > n:
        raise ValueError(f"requested subset of {size} from dataset of {n}")
    rng = np.random.default_rng(seed)
    if stratified:
        classes = np.unique(dataset.labels)
        base, extra = divmod(size, len(classes))
        chosen = []
        for rank, cls in enumerate(sorted(classes)):
            want = base + (1 if rank < extra else 0)
            members = np.flatnonzero(dataset.labels == cls)
            if want > len(members):
                raise ValueError(f"class {cls} has {len(members)} samples, need {want}")
            chosen.append(rng.choice(members, size=want, replace=False))
        idx = np.sort(np.concatenate(chosen))
    else:
        idx = np.sort(rng.choice(n, size=size, replace=False))
    return replace(dataset, images=dataset.images[idx], labels=dataset.labels[idx])


def normalize_images(dataset: Dataset) -> np.ndarray:
    """Apply the stored per-channel constants; returns a new float32 array."""
    mean = dataset.channel_mean.astype(np.float32)[:, None, None]
    std = dataset.channel_std.astype(np.float32)[:, None, None]
    return (dataset.images - mean) / std


def augment_batch(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random crop (zero pad AUG_PAD) plus random horizontal flip, per sample."""
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (AUG_PAD, AUG_PAD), (AUG_PAD, AUG_PAD)))
    dy = rng.integers(0, 2 * AUG_PAD + 1, size=n)
    dx = rng.integers(0, 2 * AUG_PAD + 1, size=n)
    flip = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        out[i] = padded[i, :, dy[i] : dy[i] + h, dx[i] : dx[i] + w]
    out[flip] = out[flip][..., ::-1]
    return out


def synthetic_cifar(n_train: int, n_test: int, seed: int, num_classes: int = 10,
                    side: int = 32) -> tuple[Dataset, Dataset]:
    """Procedural CIFAR-shaped classification data for environments without the real batches.

    Class identity is carried only by the radial frequency of a concentric
    ring pattern; a per-sample frequency warp plus pixel noise gives the task
    genuine sample complexity (small training subsets underfit it). The cue
    survives small crops and horizontal flips, so the augmentation recipe
    stays valid.
    """
    rng = np.random.default_rng(seed)
    total = n_train + n_test
    labels = np.concatenate([
        np.arange(n_train, dtype=np.int64) % num_classes,  # balanced within each split
        np.arange(n_test, dtype=np.int64) % num_classes,
    ])
    rng.shuffle(labels[:n_train])
    rng.shuffle(labels[n_train:])

    yy, xx = np.mgrid[0:side, 0:side].astype(np.float32)
    freqs = 1.0 + 0.35 * np.arange(num_classes, dtype=np.float32)
    base_tint = np.array([1.0, 0.85, 0.7], dtype=np.float32)  # shared: color carries no label

    centers = rng.uniform(side / 2 - 3, side / 2 + 3, size=(total, 2)).astype(np.float32)
    phases = rng.uniform(0, 2 * np.pi, size=total).astype(np.float32)
    # adjacent classes overlap for unlucky warp draws, bounding small-data accuracy
    warps = np.exp(rng.normal(0.0, 0.10, size=total)).astype(np.float32)
    tint_jitter = (1.0 + rng.normal(0.0, 0.08, size=(total, 3))).astype(np.float32)
    images = np.empty((total, 3, side, side), dtype=np.float32)
    for start in range(0, total, 4096):
        sl = slice(start, min(start + 4096, total))
        r = np.hypot(yy - centers[sl, 0, None, None], xx - centers[sl, 1, None, None])
        f_eff = freqs[labels[sl]] * warps[sl]
        pattern = 0.5 + 0.4 * np.cos(
            (2 * np.pi / (side / 2)) * f_eff[:, None, None] * r + phases[sl, None, None]
        )
        tints = base_tint * tint_jitter[sl]
        images[sl] = tints[:, :, None, None] * pattern[:, None, :, :]
        images[sl] += rng.normal(0, 0.15, images[sl].shape).astype(np.float32)
    np.clip(images, 0.0, 1.0, out=images)

    mean = images[:n_train].mean(axis=(0, 2, 3))
    std = images[:n_train].std(axis=(0, 2, 3))
    train = Dataset(images[:n_train], labels[:n_train], "train", mean, std)
    test = Dataset(images[n_train:], labels[n_train:], "test", mean, std)
    return train, test
