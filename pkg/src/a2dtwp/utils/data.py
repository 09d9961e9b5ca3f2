import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np
import pandas as pd

from ..configs import DataConfig


logger = logging.getLogger(__name__)

# magic, num_features
_BIN_HEADER = struct.Struct("<4sI")
_BIN_MAGIC = b"ROWS"


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ValueError(
                f"features must be (n, f) with n labels, got {self.features.shape} and {self.labels.shape}"
            )

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.features[indices], self.labels[indices])


def make_blobs(
    num_samples: int, num_features: int, num_classes: int, std: float = 1.0, spread: float = 0.5, seed: int = 0
) -> Dataset:
    """Balanced isotropic Gaussian blobs around normally distributed centers."""
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, spread, size=(num_classes, num_features))
    labels = rng.permutation(np.arange(num_samples) % num_classes)
    features = centers[labels] + rng.normal(0.0, std, size=(num_samples, num_features))
    return Dataset(features, labels)


def save_dataset(dataset: Dataset, path) -> None:
    """Writes `features..., label` rows as CSV (`.csv`) or as flat little-endian binary rows."""
    path = Path(path)
    if path.suffix == ".csv":
        frame = pd.DataFrame(dataset.features, columns=[f"x{i}" for i in range(dataset.num_features)])
        frame["label"] = dataset.labels
        frame.to_csv(path, index=False)
        return
    rows = np.empty(len(dataset), dtype=[("x", "<f4", (dataset.num_features,)), ("y", "<i4")])
    rows["x"] = dataset.features
    rows["y"] = dataset.labels
    with open(path, "wb") as f:
        f.write(_BIN_HEADER.pack(_BIN_MAGIC, dataset.num_features))
        f.write(rows.tobytes())


def load_dataset(path) -> Dataset:
    path = Path(path)
    if path.suffix == ".csv":
        frame = pd.read_csv(path)
        if "label" not in frame.columns:
            raise ValueError(f"{path}: CSV datasets need a 'label' column")
        return Dataset(frame.drop(columns=["label"]).to_numpy(), frame["label"].to_numpy())

    data = path.read_bytes()
    if len(data) < _BIN_HEADER.size:
        raise ValueError(f"{path}: file too short for a dataset header")
    magic, num_features = _BIN_HEADER.unpack_from(data)
    if magic != _BIN_MAGIC:
        raise ValueError(f"{path}: bad dataset magic {magic!r}")
    row_dtype = np.dtype([("x", "<f4", (num_features,)), ("y", "<i4")])
    body = data[_BIN_HEADER.size :]
    if len(body) % row_dtype.itemsize:
        raise ValueError(f"{path}: {len(body)} payload bytes is not a whole number of {row_dtype.itemsize}-byte rows")
    rows = np.frombuffer(body, dtype=row_dtype)
    return Dataset(rows["x"], rows["y"])


def get_dataset(args: DataConfig, seed: int) -> tuple[Dataset, Dataset]:
    """Load the configured dataset (or generate blobs) and split it into train and validation sets.

    Args:
        args (DataConfig): Data section of the run configuration.
        seed (int): Seed for blob generation and the split.

    Returns:
        tuple[Dataset, Dataset]: Train and validation sets.
    """
    if args.dataset_path:
        logger.info(f"Loading dataset: {args.dataset_path}")
        dataset = load_dataset(args.dataset_path)
    else:
        logger.info(
            f"Generating {args.num_samples} blob samples with {args.num_features} features "
            f"and {args.num_classes} classes"
        )
        dataset = make_blobs(
            args.num_samples, args.num_features, args.num_classes, args.blob_std, args.blob_spread, seed=seed
        )

    order = np.random.default_rng(seed).permutation(len(dataset))
    num_val = max(1, int(round(len(dataset) * args.val_fraction)))
    if num_val >= len(dataset):
        raise ValueError(f"dataset of {len(dataset)} samples is too small for val_fraction={args.val_fraction}")
    train, val = dataset.subset(order[num_val:]), dataset.subset(order[:num_val])
    logger.info(f"Split dataset into {len(train)} train and {len(val)} validation samples")
    return train, val


def iterate_batches(dataset: Dataset, batch_size: int, rng: np.random.Generator) -> Iterator[Dataset]:
    """One shuffled pass over `dataset`; the last batch may be smaller."""
    order = rng.permutation(len(dataset))
    for start in range(0, len(dataset), batch_size):
        yield dataset.subset(order[start : start + batch_size])
