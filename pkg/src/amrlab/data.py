"""Synthetic multimodal classification data plus file ingestion.

The generator draws one fixed unit-norm prototype per class and modality and
emits ``x = scale * prototype[label] + gaussian noise``, so each modality's
usable signal-to-noise ratio is ``scale / std`` and modality dominance can be
dialed in directly.  Feature files use the AMRDATA binary layout (float32
payload) with an optional CSV fallback for interoperability.
"""

from __future__ import annotations

import csv
import re
import struct
from dataclasses import dataclass
from typing import Iterator, NamedTuple

import numpy as np

from .errors import ConfigError, DataError, FormatError
from .tensor import Tensor

DATA_MAGIC = b"AMRDATA1"


@dataclass(frozen=True)
class SyntheticConfig:
    num_classes: int
    train_samples: int
    val_samples: int
    modality_dims: tuple[int, ...]
    signal_scales: tuple[float, ...]
    noise_stds: tuple[float, ...]
    label_noise: float = 0.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "modality_dims", tuple(int(d) for d in self.modality_dims))
        object.__setattr__(self, "signal_scales", tuple(float(s) for s in self.signal_scales))
        object.__setattr__(self, "noise_stds", tuple(float(s) for s in self.noise_stds))
        m = len(self.modality_dims)
        if m < 1:
            raise ConfigError("data: at least one modality required")
        if len(self.signal_scales) != m or len(self.noise_stds) != m:
            raise ConfigError("data: signal_scales and noise_stds must match modality_dims")
        if self.num_classes < 2:
            raise ConfigError("data: num_classes must be >= 2")
        if self.train_samples < 1 or self.val_samples < 1:
            raise ConfigError("data: sample counts must be >= 1")
        if any(d < 1 for d in self.modality_dims):
            raise ConfigError("data: modality dims must be >= 1")
        if any(s < 0 for s in self.signal_scales):
            raise ConfigError("data: signal scales must be >= 0")
        if any(s <= 0 for s in self.noise_stds):
            raise ConfigError("data: noise stds must be > 0")
        if not 0.0 <= self.label_noise < 0.5:
            raise ConfigError("data: label_noise must be in [0, 0.5)")


@dataclass
class Dataset:
    features: list[np.ndarray]  # per modality, N x dim
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.features = [np.asarray(f, dtype=np.float64) for f in self.features]
        n = len(self.labels)
        for m, f in enumerate(self.features):
            if f.ndim != 2 or f.shape[0] != n:
                raise DataError(f"modality {m}: expected {n} rows, got shape {f.shape}")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_modalities(self) -> int:
        return len(self.features)

    @property
    def modality_dims(self) -> tuple[int, ...]:
        return tuple(f.shape[1] for f in self.features)

    def select_modality(self, m: int) -> "Dataset":
        if not 0 <= m < self.num_modalities:
            raise IndexError(f"modality index {m} out of range")
        return Dataset([self.features[m]], self.labels, self.num_classes, self.split)


@dataclass
class MultimodalBatch:
    inputs: list[Tensor]
    labels: np.ndarray

    def __post_init__(self):
        sizes = {x.shape[0] for x in self.inputs} | {len(self.labels)}
        if len(sizes) != 1:
            raise DataError(f"inconsistent batch sizes {sorted(sizes)}")

    def __len__(self) -> int:
        return len(self.labels)


class DataSplits(NamedTuple):
    train: Dataset
    val: Dataset


def generate_synthetic(config: SyntheticConfig) -> DataSplits:
    """Seeded draw: prototypes first, then labels/features/noise per split."""
    rng = np.random.default_rng(config.seed)
    prototypes = []
    for dim in config.modality_dims:
        protos = rng.normal(size=(config.num_classes, dim))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
        prototypes.append(protos)

    def draw_split(n: int, split: str) -> Dataset:
        labels = rng.integers(0, config.num_classes, size=n)
        features = []
        for m, dim in enumerate(config.modality_dims):
            noise = rng.normal(0.0, config.noise_stds[m], size=(n, dim))
            features.append(config.signal_scales[m] * prototypes[m][labels] + noise)
        n_noisy = int(round(config.label_noise * n))
        if n_noisy:
            idx = rng.choice(n, size=n_noisy, replace=False)
            labels = labels.copy()
            labels[idx] = rng.integers(0, config.num_classes, size=n_noisy)
        return Dataset(features, labels, config.num_classes, split)

    return DataSplits(
        train=draw_split(config.train_samples, "train"),
        val=draw_split(config.val_samples, "val"),
    )


# AMRDATA binary format --------------------------------------------------------


def save_dataset(dataset: Dataset, path) -> None:
    m = dataset.num_modalities
    n = len(dataset)
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC)
        fh.write(struct.pack("<IIQ", m, dataset.num_classes, n))
        fh.write(struct.pack(f"<{m}I", *dataset.modality_dims))
        for f in dataset.features:
            fh.write(np.ascontiguousarray(f, dtype="<f4").tobytes())
        fh.write(np.ascontiguousarray(dataset.labels, dtype="<u4").tobytes())


def load_dataset(path, split: str = "train") -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(DATA_MAGIC):
        raise FormatError(f"{path}: not an AMRDATA file (bad magic)")
    offset = len(DATA_MAGIC)

    def take(fmt: str):
        nonlocal offset
        size = struct.calcsize(fmt)
        if len(blob) < offset + size:
            raise FormatError(f"{path}: truncated header")
        values = struct.unpack_from(fmt, blob, offset)
        offset += size
        return values

    m, num_classes, n = take("<IIQ")
    if m < 1:
        raise FormatError(f"{path}: modality count must be >= 1")
    dims = take(f"<{m}I")
    features = []
    for dim in dims:
        count = n * dim
        nbytes = count * 4
        if len(blob) < offset + nbytes:
            raise FormatError(f"{path}: truncated feature block")
        block = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        features.append(block.reshape(n, dim).astype(np.float64))
        offset += nbytes
    nbytes = n * 4
    if len(blob) < offset + nbytes:
        raise FormatError(f"{path}: truncated label block")
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=offset).astype(np.int64)
    offset += nbytes
    if offset != len(blob):
        raise FormatError(f"{path}: trailing bytes after label block")
    if n and labels.max() >= num_classes:
        raise DataError(f"{path}: label outside [0, {num_classes})")
    return Dataset(features, labels, int(num_classes), split)


_CSV_COLUMN = re.compile(r"^m(\d+)_(\d+)$")


def load_csv(path, split: str = "train") -> Dataset:
    """Sidecar loader for ``label,m0_0,...,m1_0,...`` delimited files."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file") from None
        if not header or header[0] != "label":
            raise FormatError(f"{path}: first column must be 'label'")
        columns: dict[int, dict[int, int]] = {}
        for pos, name in enumerate(header[1:], start=1):
            match = _CSV_COLUMN.match(name)
            if not match:
                raise FormatError(f"{path}: unrecognized column {name!r}")
            columns.setdefault(int(match.group(1)), {})[int(match.group(2))] = pos
        if not columns:
            raise FormatError(f"{path}: no feature columns")
        modalities = sorted(columns)
        if modalities != list(range(len(modalities))):
            raise FormatError(f"{path}: modality indices must be contiguous from 0")
        order = []
        for m in modalities:
            feats = columns[m]
            if sorted(feats) != list(range(len(feats))):
                raise FormatError(f"{path}: modality {m} feature indices not contiguous")
            order.append([feats[k] for k in range(len(feats))])
        labels, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise FormatError(f"{path}:{lineno}: expected {len(header)} fields")
            try:
                labels.append(int(row[0]))
                rows.append([float(v) for v in row[1:]])
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
    if not labels:
        raise FormatError(f"{path}: no data rows")
    table = np.asarray(rows)
    features = [table[:, [p - 1 for p in positions]] for positions in order]
    labels_arr = np.asarray(labels)
    if labels_arr.min() < 0:
        raise DataError(f"{path}: negative label")
    return Dataset(features, labels_arr, int(labels_arr.max()) + 1, split)


def batches(
    dataset: Dataset,
    batch_size: int,
    shuffle_seed: int | np.random.Generator | None = None,
) -> Iterator[MultimodalBatch]:
    """Seeded shuffle, final short batch included, modalities kept row-aligned."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    if shuffle_seed is None:
        order = np.arange(n)
    elif isinstance(shuffle_seed, np.random.Generator):
        order = shuffle_seed.permutation(n)
    else:
        order = np.random.default_rng(shuffle_seed).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield MultimodalBatch(
            inputs=[Tensor(f[idx]) for f in dataset.features],
            labels=dataset.labels[idx],
        )
