"""Feature representations h(.) fed to the multinomial regressor.

Random projections use a_i ~ U[-1, 1]^d and b_i ~ U[0, 1]. The five
activation families are evaluated exactly as their closed forms read:

    linear        a.x + b
    sigmoid       1 / (1 + exp(-(a.x + b)))
    gaussian      exp(-b * (a.x)^2)
    hardlimit     1 if a.x >= 0 else 0
    multiquadric  (||x - a||^2 + b^2)^2
"""

from dataclasses import dataclass
from enum import Enum
import logging

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import expit

from src.models.types import MapDescriptor, RasterHeader
from src.utils.errors import ConfigError, DataError, NumericalError
from src.utils import raster_io

logger = logging.getLogger('esmlr.feature_maps')


class ActivationKind(str, Enum):
    LINEAR = 'linear'
    SIGMOID = 'sigmoid'
    GAUSSIAN = 'gaussian'
    HARDLIMIT = 'hardlimit'
    MULTIQUADRIC = 'multiquadric'


class BlockTag(str, Enum):
    SPECTRAL = 'spectral'
    SPATIAL = 'spatial'
    KERNEL = 'kernel'
    MFL = 'mfl'


@dataclass(frozen=True)
class RandomFeatureMap:
    A: np.ndarray            # L x d
    b: np.ndarray            # L
    activation: ActivationKind
    seed: int
    add_bias_row: bool = True

    @property
    def L(self) -> int:
        return self.A.shape[0]

    @property
    def d(self) -> int:
        return self.A.shape[1]

    def describe(self) -> MapDescriptor:
        return MapDescriptor(L=self.L, input_dim=self.d, activation=self.activation.value,
                             seed=self.seed, add_bias_row=self.add_bias_row)


@dataclass(frozen=True)
class KernelConfig:
    sigma: float
    anchors: np.ndarray      # d x n_a

    def __post_init__(self):
        if not self.sigma > 0:
            raise ConfigError(f"RBF width sigma must be > 0, got {self.sigma}")
        if self.anchors.ndim != 2 or self.anchors.shape[1] == 0:
            raise DataError("Kernel anchors must be a non-empty d x n_a matrix")


@dataclass(frozen=True)
class FeatureBlock:
    H: np.ndarray            # L' x n
    block_tag: BlockTag
    bias_row_present: bool = False

    @property
    def rows(self) -> int:
        return self.H.shape[0]

    @property
    def n(self) -> int:
        return self.H.shape[1]

    def core(self) -> np.ndarray:
        """Rows without the leading bias row."""
        return self.H[1:] if self.bias_row_present else self.H


def _with_bias_row(H: np.ndarray) -> np.ndarray:
    return np.vstack([np.ones((1, H.shape[1])), H])


def column_stable_product(A: np.ndarray, X: np.ndarray) -> np.ndarray:
    """A @ X with every entry summed over the inner index in ascending order.

    Each output column depends only on its own input column, bit for bit,
    whatever the batch size or memory layout.
    """
    A = np.asarray(A, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if A.shape[1] != X.shape[0]:
        raise DataError(f"Cannot multiply {A.shape} by {X.shape}")
    out = np.zeros((A.shape[0], X.shape[1]))
    term = np.empty_like(out)
    for k in range(A.shape[1]):
        np.multiply(A[:, k, None], X[None, k, :], out=term)
        out += term
    return out


def squared_distances(P: np.ndarray, X: np.ndarray) -> np.ndarray:
    """||p_i - x_j||^2 for the columns of P (d x m) and X (d x n), one pair at a time."""
    return cdist(np.asarray(P, dtype=np.float64).T, np.asarray(X, dtype=np.float64).T, 'sqeuclidean')


def raw_block(X: np.ndarray, tag: BlockTag) -> FeatureBlock:
    """Wrap an input matrix (d x n) as a block without a bias row."""
    return FeatureBlock(np.asarray(X, dtype=np.float64), BlockTag(tag), False)


def identity_features(X: np.ndarray, tag: BlockTag = BlockTag.SPECTRAL) -> FeatureBlock:
    """Linear h(x) = x with the constant row prepended."""
    return FeatureBlock(_with_bias_row(np.asarray(X, dtype=np.float64)), BlockTag(tag), True)


def generate_map(L: int, d: int, activation: ActivationKind = ActivationKind.SIGMOID,
                 seed: int = 0, add_bias_row: bool = True) -> RandomFeatureMap:
    if L < 1 or d < 1:
        raise ConfigError(f"Random map needs L >= 1 and d >= 1, got L={L}, d={d}")

    rng = np.random.default_rng(seed)
    A = rng.uniform(-1.0, 1.0, size=(L, d))
    b = rng.uniform(0.0, 1.0, size=L)
    A.setflags(write=False)
    b.setflags(write=False)
    return RandomFeatureMap(A=A, b=b, activation=ActivationKind(activation), seed=seed,
                            add_bias_row=add_bias_row)


def apply_map(feature_map: RandomFeatureMap, X: np.ndarray,
              tag: BlockTag = BlockTag.SPECTRAL) -> FeatureBlock:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != feature_map.d:
        raise DataError(f"Random map expects {feature_map.d} input rows, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise DataError("Input to random map contains non-finite values")

    A, b = feature_map.A, feature_map.b
    kind = feature_map.activation
    projection = column_stable_product(A, X)

    with np.errstate(over='ignore', invalid='ignore'):
        if kind is ActivationKind.LINEAR:
            H = projection + b[:, None]
        elif kind is ActivationKind.SIGMOID:
            H = expit(projection + b[:, None])
        elif kind is ActivationKind.GAUSSIAN:
            H = np.exp(-b[:, None] * projection ** 2)
        elif kind is ActivationKind.HARDLIMIT:
            H = (projection >= 0).astype(np.float64)
        elif kind is ActivationKind.MULTIQUADRIC:
            squared = squared_distances(A.T, X)
            H = (squared + (b ** 2)[:, None]) ** 2
        else:
            raise ConfigError(f"Unknown activation {kind}")

    if not np.all(np.isfinite(H)):
        raise NumericalError(f"{kind.value} activation produced non-finite features")

    if feature_map.add_bias_row:
        H = _with_bias_row(H)
    return FeatureBlock(H, BlockTag(tag), feature_map.add_bias_row)


def rbf_features(cfg: KernelConfig, X: np.ndarray) -> FeatureBlock:
    """h(x) = [1, k(x, anchor_1), ..., k(x, anchor_na)] with k = exp(-||x - a||^2 / (2 sigma^2))."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != cfg.anchors.shape[0]:
        raise DataError(f"Kernel anchors have {cfg.anchors.shape[0]} rows, input has shape {X.shape}")

    gamma = 1.0 / (2.0 * cfg.sigma ** 2)
    K = np.exp(-gamma * squared_distances(cfg.anchors, X))
    return FeatureBlock(_with_bias_row(K), BlockTag.KERNEL, True)


def concat_mfl(spe: FeatureBlock, spa: FeatureBlock) -> FeatureBlock:
    """Stack spectral over spatial rows, keeping at most one bias row (as row 0)."""
    if spe.n != spa.n:
        raise DataError(f"Cannot stack blocks with {spe.n} and {spa.n} columns")

    parts = [spe.core(), spa.core()]
    bias = spe.bias_row_present or spa.bias_row_present
    H = np.vstack(parts)
    if bias:
        H = _with_bias_row(H)
    return FeatureBlock(H, BlockTag.MFL, bias)


def dump_block(block: FeatureBlock, path: str) -> None:
    """Debug dump: `<name>.f32` column-major float32 plus a `<name>.json` header."""
    raster_io.write_raw(path, block.H.T, 'f32le')
    raster_io.write_header(
        path,
        RasterHeader(height=block.rows, width=block.n, bands=1, interleave='column-major', dtype='f32le'),
        {'block_tag': block.block_tag.value, 'bias_row_present': block.bias_row_present},
    )
    logger.debug(f"Dumped {block.rows}x{block.n} {block.block_tag.value} block to {path}")


def load_block(path: str) -> FeatureBlock:
    header = raster_io.read_header(path)
    extra = raster_io.read_header_extras(path)
    flat = raster_io.read_raw(path, header)
    H = flat.astype(np.float64).reshape(header['width'], header['height']).T
    return FeatureBlock(np.ascontiguousarray(H), BlockTag(extra.get('block_tag', 'spectral')),
                        bool(extra.get('bias_row_present', False)))
