"""Hyperspectral cubes, ground truth, unit-max normalization and per-class splits."""

from dataclasses import dataclass, field
import logging
import os
from typing import Dict, Optional, Sequence

import numpy as np
import pandas as pd

from src.models.types import RasterHeader
from src.utils.errors import ConfigError, DataError
from src.utils import raster_io

logger = logging.getLogger('esmlr.hsi_data')


def _frozen(array: np.ndarray) -> np.ndarray:
    array.setflags(write=False)
    return array


@dataclass(frozen=True)
class HsiCube:
    """A height x width x bands raster stored band-sequentially as (bands, height, width)."""
    values: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        if self.values.ndim != 3:
            raise DataError(f"Cube values must be (bands, height, width), got shape {self.values.shape}")
        _frozen(self.values)

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def pixel_matrix(self) -> np.ndarray:
        """d x (height*width) matrix, columns in raster-scan (row-major) order."""
        return self.values.reshape(self.bands, -1)


@dataclass(frozen=True)
class GroundTruth:
    labels: np.ndarray          # (height, width) ints, 0 = unlabeled
    class_count: int

    def __post_init__(self):
        _frozen(self.labels)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def class_sizes(self) -> Dict[int, int]:
        values, counts = np.unique(self.labels[self.labels > 0], return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray        # d x n
    labels: np.ndarray          # n, values in 1..M
    pixel_index: np.ndarray     # n x 2, (row, col)
    class_count: int

    def __post_init__(self):
        for array in (self.features, self.labels, self.pixel_index):
            _frozen(array)

    @property
    def n(self) -> int:
        return self.labels.shape[0]


@dataclass(frozen=True)
class SplitSpec:
    """Either q (same count for every class) or explicit counts, keyed by class label."""
    q: Optional[int] = None
    counts: Optional[Dict[int, int]] = None
    seed: int = 0
    cap_rule: bool = True

    def __post_init__(self):
        if (self.q is None) == (self.counts is None):
            raise ConfigError("SplitSpec needs exactly one of q or counts")
        if self.q is not None and self.q < 1:
            raise ConfigError(f"Per-class training count must be >= 1, got {self.q}")
        if self.counts is not None and any(c < 1 for c in self.counts.values()):
            raise ConfigError("Every explicit per-class training count must be >= 1")


@dataclass(frozen=True)
class Split:
    train_idx: np.ndarray
    test_idx: np.ndarray
    train_counts: Dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        _frozen(self.train_idx)
        _frozen(self.test_idx)


def load_cube(path: str) -> HsiCube:
    """Read `<name>.bsq` (float32 LE, band-sequential) using its `<name>.json` header."""
    header = raster_io.read_header(path)
    if header['interleave'] != 'bsq':
        raise DataError(f"{path}: only band-sequential cubes are supported, header says {header['interleave']!r}")
    if header['dtype'] != 'f32le':
        raise DataError(f"{path}: cube dtype must be f32le, header says {header['dtype']!r}")

    flat = raster_io.read_raw(path, header)
    values = flat.astype(np.float64).reshape(header['bands'], header['height'], header['width'])
    if not np.all(np.isfinite(values)):
        raise DataError(f"{path}: cube contains non-finite values")

    logger.info(f"Loaded cube {path}: {header['height']}x{header['width']} pixels, {header['bands']} bands")
    return HsiCube(values=values, normalized=False)


def save_cube(path: str, cube: HsiCube, extra_header: Optional[Dict] = None) -> None:
    raster_io.write_raw(path, cube.values, 'f32le')
    raster_io.write_header(path, RasterHeader(
        height=cube.height, width=cube.width, bands=cube.bands, interleave='bsq', dtype='f32le'
    ), extra_header)


def _validate_labels(labels: np.ndarray, source: str) -> GroundTruth:
    if np.any(labels < 0):
        raise DataError(f"{source}: negative labels are not allowed")
    class_count = int(labels.max()) if labels.size else 0
    if class_count == 0:
        raise DataError(f"{source}: ground truth has no labeled pixels")

    present = set(np.unique(labels[labels > 0]).tolist())
    missing = [m for m in range(1, class_count + 1) if m not in present]
    if missing:
        raise DataError(f"{source}: classes {missing} have no labeled pixels")

    gt = GroundTruth(labels=labels.astype(np.int64), class_count=class_count)
    logger.info(f"Loaded ground truth {source}: {int((labels > 0).sum())} labeled pixels in {class_count} classes")
    return gt


def load_ground_truth(path: str, shape: Optional[Sequence[int]] = None) -> GroundTruth:
    """Read `<name>.labels` (uint16 LE, row-major) or a `row,col,label` CSV.

    CSV dimensions come from the sidecar header when present, else from
    `shape`, else from the largest row/col index.
    """
    if path.lower().endswith('.csv'):
        return _load_ground_truth_csv(path, shape)

    header = raster_io.read_header(path)
    if header['bands'] != 1 or header['dtype'] != 'u16le':
        raise DataError(f"{path}: label raster header must have bands=1 and dtype u16le")
    flat = raster_io.read_raw(path, header)
    labels = flat.astype(np.int64).reshape(header['height'], header['width'])
    return _validate_labels(labels, path)


def _load_ground_truth_csv(path: str, shape: Optional[Sequence[int]]) -> GroundTruth:
    if not os.path.exists(path):
        raise DataError(f"File not found: {path}")

    try:
        table = pd.read_csv(path, header=None, names=['row', 'col', 'label'], comment='#')
        # tolerate a header line
        if not np.issubdtype(table['row'].dtype, np.number):
            table = table.iloc[1:].astype(np.int64)
        table = table.astype(np.int64)
    except (ValueError, pd.errors.ParserError) as e:
        raise DataError(f"{path}: cannot parse row,col,label CSV: {e}") from e

    if os.path.exists(raster_io.sidecar_path(path)):
        header = raster_io.read_header(path)
        height, width = header['height'], header['width']
    elif shape is not None:
        height, width = int(shape[0]), int(shape[1])
    else:
        height, width = int(table['row'].max()) + 1, int(table['col'].max()) + 1

    rows, cols, values = table['row'].to_numpy(), table['col'].to_numpy(), table['label'].to_numpy()
    if rows.size and (rows.min() < 0 or cols.min() < 0 or rows.max() >= height or cols.max() >= width):
        raise DataError(f"{path}: pixel coordinates outside declared {height}x{width} raster")

    labels = np.zeros((height, width), dtype=np.int64)
    labels[rows, cols] = values
    if np.any(values < 0):
        raise DataError(f"{path}: negative labels are not allowed")
    return _validate_labels(labels, path)


def normalize_unit_max(cube: HsiCube) -> HsiCube:
    """Divide every value by the global maximum of the whole cube (all bands jointly)."""
    if cube.normalized:
        return cube

    if np.any(cube.values < 0):
        raise DataError("Cube has negative values; radiance/reflectance inputs must be non-negative")
    peak = float(cube.values.max())
    if peak <= 0:
        raise DataError(f"Cannot unit-max normalize: global maximum is {peak}")

    logger.debug(f"Unit-max normalization with global maximum {peak}")
    return HsiCube(values=cube.values / peak, normalized=True)


def flatten_labeled(cube: HsiCube, gt: GroundTruth) -> LabeledDataset:
    """One column per labeled pixel, in raster-scan order."""
    if (cube.height, cube.width) != (gt.height, gt.width):
        raise DataError(f"Cube is {cube.height}x{cube.width} but ground truth is {gt.height}x{gt.width}")
    if not cube.normalized:
        raise DataError("Cube must be normalized before flattening")

    flat_labels = gt.labels.reshape(-1)
    columns = np.flatnonzero(flat_labels)
    rows, cols = np.divmod(columns, cube.width)

    dataset = LabeledDataset(
        features=np.ascontiguousarray(cube.pixel_matrix()[:, columns]),
        labels=flat_labels[columns].copy(),
        pixel_index=np.stack([rows, cols], axis=1),
        class_count=gt.class_count,
    )
    logger.info(f"Flattened {dataset.n} labeled samples with {cube.bands} features")
    return dataset


def split_per_class(ds: LabeledDataset, spec: SplitSpec,
                    rng: Optional[np.random.Generator] = None) -> Split:
    """Uniform per-class sampling without replacement into train; the rest is test.

    With cap_rule, a class never gives more than floor(50%) of its samples
    to training.
    """
    if rng is None:
        rng = np.random.default_rng(spec.seed)

    train_parts = []
    train_counts: Dict[int, int] = {}
    for label in range(1, ds.class_count + 1):
        members = np.flatnonzero(ds.labels == label)
        size = members.size
        if size < 2:
            raise DataError(f"Class {label} has {size} samples; at least 2 are needed to split")

        if spec.counts is not None:
            if label not in spec.counts:
                raise ConfigError(f"No training count given for class {label}")
            requested = int(spec.counts[label])
            if requested > size:
                raise DataError(f"Class {label} has {size} samples but {requested} were requested for training")
        else:
            requested = int(spec.q)
            if not spec.cap_rule and requested > size:
                raise DataError(f"Class {label} has {size} samples but {requested} were requested for training")

        count = min(requested, size // 2) if spec.cap_rule else requested
        count = max(count, 1)
        chosen = rng.choice(members, size=count, replace=False)
        train_parts.append(np.sort(chosen))
        train_counts[label] = count

    train_idx = np.sort(np.concatenate(train_parts)) if train_parts else np.empty(0, dtype=np.int64)
    mask = np.ones(ds.n, dtype=bool)
    mask[train_idx] = False
    test_idx = np.flatnonzero(mask)

    logger.debug(f"Split: {train_idx.size} train / {test_idx.size} test samples")
    return Split(train_idx=train_idx, test_idx=test_idx, train_counts=train_counts)
