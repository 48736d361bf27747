"""Extended multi-attribute profiles (area attribute) on the leading principal components.

Pipeline: PCA of the normalized cube -> each retained PC raster quantized to
8 bits -> area thickenings (descending thresholds), the PC itself, area
thinnings (ascending thresholds) -> stacked. Features handed to classifiers
are the stacked gray levels divided by 255.
"""

from dataclasses import dataclass
import logging
from typing import List, Tuple

import numpy as np
from skimage.morphology import area_opening
from skimage.util import invert
from sklearn.decomposition import PCA

from src.esmlr.hsi_data import HsiCube, LabeledDataset, save_cube
from src.esmlr.feature_maps import BlockTag, FeatureBlock
from src.models.types import EmapsDescriptor, LayoutEntry
from src.utils.errors import ConfigError, DataError

logger = logging.getLogger('esmlr.emaps')

DEFAULT_THRESHOLDS = (100, 200, 500, 1000)
DEFAULT_SHARE = 0.99


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray             # d
    components: np.ndarray       # d x c, orthonormal columns
    eigenvalues: np.ndarray      # d, non-increasing
    c: int


@dataclass(frozen=True)
class ApSpec:
    thresholds: Tuple[int, ...] = DEFAULT_THRESHOLDS
    connectivity: int = 4

    def __post_init__(self):
        if not self.thresholds:
            raise ConfigError("Attribute profile needs at least one area threshold")
        if any(int(t) < 1 for t in self.thresholds):
            raise ConfigError(f"Area thresholds must be positive integers, got {self.thresholds}")
        if any(b <= a for a, b in zip(self.thresholds, self.thresholds[1:])):
            raise ConfigError(f"Area thresholds must be strictly ascending, got {self.thresholds}")
        if self.connectivity not in (4, 8):
            raise ConfigError(f"Connectivity must be 4 or 8, got {self.connectivity}")

    @property
    def p(self) -> int:
        return len(self.thresholds)

    @property
    def profile_length(self) -> int:
        return 2 * self.p + 1


@dataclass(frozen=True)
class EmapStack:
    images: np.ndarray           # k x height x width, uint8
    layout: List[LayoutEntry]

    @property
    def count(self) -> int:
        return self.images.shape[0]

    def pixel_features(self) -> np.ndarray:
        """k x (height*width) features in [0, 1], raster-scan column order."""
        return self.images.reshape(self.count, -1).astype(np.float64) / 255.0

    def to_cube(self) -> HsiCube:
        """The stack as a normalized cube, so it flattens like spectral data."""
        return HsiCube(values=self.images.astype(np.float64) / 255.0, normalized=True)


def pca_fit(X: np.ndarray, share: float = DEFAULT_SHARE) -> PcaModel:
    """PCA of the columns of X (d x n), keeping the fewest PCs whose eigenvalue share exceeds `share`."""
    X = np.asarray(X, dtype=np.float64)
    d, n = X.shape
    if n < 2:
        raise DataError(f"PCA needs more than one sample, got {n}")
    if np.all(X == X[:, :1]):
        raise DataError("PCA input has rank 0 (all samples identical)")

    pca = PCA(svd_solver='full')
    pca.fit(X.T)

    eigenvalues = np.zeros(d)
    k = pca.explained_variance_.shape[0]
    eigenvalues[:k] = np.clip(pca.explained_variance_, 0.0, None)
    total = eigenvalues.sum()
    if total <= 0:
        raise DataError("PCA input has no measurable variance")

    cumulative = np.cumsum(eigenvalues[:k]) / total
    c = int(np.searchsorted(cumulative, share, side='right')) + 1
    c = min(c, k)

    logger.info(f"PCA kept {c} of {d} components ({cumulative[c - 1]:.4%} of total variance)")
    return PcaModel(mean=pca.mean_.copy(), components=pca.components_[:c].T.copy(),
                    eigenvalues=eigenvalues, c=c)


def pca_project_to_images(model: PcaModel, cube: HsiCube) -> List[np.ndarray]:
    if cube.bands != model.mean.shape[0]:
        raise DataError(f"PCA was fit on {model.mean.shape[0]} bands, cube has {cube.bands}")

    scores = model.components.T @ (cube.pixel_matrix() - model.mean[:, None])
    return [scores[i].reshape(cube.height, cube.width) for i in range(model.c)]


def quantize(raster: np.ndarray) -> np.ndarray:
    """Affine rescale of [min, max] onto 0..255, rounding half up; constant rasters map to 0."""
    raster = np.asarray(raster, dtype=np.float64)
    low, high = float(raster.min()), float(raster.max())
    if high <= low:
        return np.zeros(raster.shape, dtype=np.uint8)
    scaled = (raster - low) * (255.0 / (high - low))
    return np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)


def _skimage_connectivity(connectivity: int) -> int:
    return 1 if connectivity == 4 else 2


def area_thinning(img: np.ndarray, area: int, connectivity: int = 4) -> np.ndarray:
    """Area opening: bright components (upper level sets) smaller than `area` pixels are merged down."""
    if area < 1:
        raise ConfigError(f"Area threshold must be >= 1, got {area}")
    img = np.asarray(img, dtype=np.uint8)
    opened = area_opening(img, area_threshold=int(area), connectivity=_skimage_connectivity(connectivity))
    # the whole-image component is never removed: nothing drops below the image minimum
    return np.maximum(opened, img.min()).astype(np.uint8)


def area_thickening(img: np.ndarray, area: int, connectivity: int = 4) -> np.ndarray:
    """Dual of area_thinning: 255 - thinning(255 - f)."""
    return invert(area_thinning(invert(np.asarray(img, dtype=np.uint8)), area, connectivity))


def build_ap(img: np.ndarray, spec: ApSpec) -> List[np.ndarray]:
    """[thick(l_p), ..., thick(l_1), f, thin(l_1), ..., thin(l_p)]."""
    thickenings = [area_thickening(img, t, spec.connectivity) for t in reversed(spec.thresholds)]
    thinnings = [area_thinning(img, t, spec.connectivity) for t in spec.thresholds]
    return thickenings + [np.asarray(img, dtype=np.uint8)] + thinnings


def _profile_layout(component: int, spec: ApSpec) -> List[LayoutEntry]:
    layout: List[LayoutEntry] = []
    for position, threshold in enumerate(reversed(spec.thresholds)):
        layout.append(LayoutEntry(component=component, position=position,
                                  operator='thickening', threshold=int(threshold)))
    layout.append(LayoutEntry(component=component, position=spec.p, operator='original', threshold=None))
    for offset, threshold in enumerate(spec.thresholds):
        layout.append(LayoutEntry(component=component, position=spec.p + 1 + offset,
                                  operator='thinning', threshold=int(threshold)))
    return layout


def build_emaps(cube: HsiCube, spec: ApSpec = ApSpec(), share: float = DEFAULT_SHARE) -> EmapStack:
    if not cube.normalized:
        raise DataError("EMAPs are built from the normalized cube")

    pixels = cube.pixel_matrix()
    if np.all(pixels == pixels[:, :1]):
        # No variance anywhere: a single flat component
        logger.warning("Cube has no spectral variance; using one flat principal component")
        rasters = [np.zeros((cube.height, cube.width))]
    else:
        rasters = pca_project_to_images(pca_fit(pixels, share), cube)

    images: List[np.ndarray] = []
    layout: List[LayoutEntry] = []
    for component, raster in enumerate(rasters):
        images.extend(build_ap(quantize(raster), spec))
        layout.extend(_profile_layout(component, spec))

    stack = EmapStack(images=np.stack(images), layout=layout)
    logger.info(f"Built EMAPs: {len(rasters)} components x {spec.profile_length} profiles = {stack.count} features")
    return stack


def emap_block(stack: EmapStack, ds: LabeledDataset) -> FeatureBlock:
    """Spatial features for the dataset's labeled pixels, column-aligned with pixel_index."""
    height, width = stack.images.shape[1:]
    flat_idx = ds.pixel_index[:, 0] * width + ds.pixel_index[:, 1]
    if flat_idx.size and flat_idx.max() >= height * width:
        raise DataError("Dataset pixel_index falls outside the EMAP raster")
    return FeatureBlock(np.ascontiguousarray(stack.pixel_features()[:, flat_idx]), BlockTag.SPATIAL, False)


def describe_emaps(stack: EmapStack, spec: ApSpec, share: float) -> EmapsDescriptor:
    """What it takes to rebuild the stack from a cube: profile settings and its size."""
    return EmapsDescriptor(thresholds=[int(t) for t in spec.thresholds], connectivity=int(spec.connectivity),
                           share=float(share), components=stack.count // spec.profile_length,
                           features=stack.count)


def save_emaps(path: str, stack: EmapStack, spec: ApSpec, share: float) -> None:
    """Write the [0, 1] feature stack as a float32 cube whose header also lists the layout."""
    save_cube(path, stack.to_cube(), {**describe_emaps(stack, spec, share), 'layout': stack.layout})
    logger.info(f"Wrote {stack.count} EMAP features to {path}")
