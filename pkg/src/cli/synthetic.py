"""Synthetic hyperspectral scenes with spatially contiguous class regions.

    python -m src.cli.synthetic --out data/synthetic [--height 40 --width 40 --bands 20 --classes 3]
"""

import argparse
import logging
import os
from typing import Tuple

import numpy as np

from src.esmlr.hsi_data import GroundTruth, HsiCube, save_cube
from src.models.types import RasterHeader
from src.utils.custom_logger import LoggerSetup
from src.utils import raster_io

logger = logging.getLogger('esmlr.synthetic')

CUBE_NAME = 'scene_cube.bsq'
LABELS_NAME = 'scene_gt.labels'


def generate_scene(height: int = 40, width: int = 40, bands: int = 20, classes: int = 3,
                   noise: float = 0.03, seed: int = 0) -> Tuple[HsiCube, GroundTruth]:
    """Each class owns the region nearest its blob centre; spectra are a class
    signature scaled by the blob's Gaussian falloff plus white noise."""
    rng = np.random.default_rng(seed)
    rows, cols = np.mgrid[0:height, 0:width]

    # centres on a ring around the middle
    angles = 2 * np.pi * (np.arange(classes) + rng.uniform(-0.15, 0.15, classes)) / classes
    radius = 0.3 * min(height, width)
    centres = np.column_stack([height / 2 + radius * np.sin(angles), width / 2 + radius * np.cos(angles)])
    dist2 = np.stack([(rows - r) ** 2 + (cols - c) ** 2 for r, c in centres])
    labels = np.argmin(dist2, axis=0) + 1

    wavelengths = np.linspace(0.0, 1.0, bands)
    peaks = np.linspace(0.2, 0.8, classes)
    signatures = 0.3 + 0.5 * np.exp(-(wavelengths[None, :] - peaks[:, None]) ** 2 / (2 * 0.12 ** 2))

    spread = max(height, width) / 2.0
    nearest = np.take_along_axis(dist2, (labels - 1)[None], axis=0)[0]
    falloff = 0.85 + 0.15 * np.exp(-nearest / (2 * spread ** 2))

    values = signatures[labels - 1].transpose(2, 0, 1) * falloff[None]
    values = values + rng.normal(0.0, noise, size=values.shape)
    values = np.clip(values, 0.0, None)

    cube = HsiCube(values=values, normalized=False)
    gt = GroundTruth(labels=labels.astype(np.int64), class_count=classes)
    logger.info(f"Generated {height}x{width}x{bands} scene with {classes} classes, sizes {gt.class_sizes()}")
    return cube, gt


def write_scene(out_dir: str, cube: HsiCube, gt: GroundTruth) -> Tuple[str, str]:
    """Write `scene_cube.bsq` (+ .json) and `scene_gt.labels` (+ .json); returns both paths."""
    os.makedirs(out_dir, exist_ok=True)
    cube_path = os.path.join(out_dir, CUBE_NAME)
    labels_path = os.path.join(out_dir, LABELS_NAME)

    save_cube(cube_path, cube, {'source': 'synthetic'})
    raster_io.write_raw(labels_path, gt.labels, 'u16le')
    raster_io.write_header(labels_path, RasterHeader(
        height=gt.height, width=gt.width, bands=1, interleave='bsq', dtype='u16le'
    ))
    return cube_path, labels_path


def main() -> None:
    parser = argparse.ArgumentParser(description='Write a synthetic hyperspectral scene')
    parser.add_argument('--out', required=True)
    parser.add_argument('--height', type=int, default=40)
    parser.add_argument('--width', type=int, default=40)
    parser.add_argument('--bands', type=int, default=20)
    parser.add_argument('--classes', type=int, default=3)
    parser.add_argument('--noise', type=float, default=0.03)
    parser.add_argument('--seed', type=int, default=0)
    args = parser.parse_args()

    log = LoggerSetup.setup_logger('esmlr')
    cube, gt = generate_scene(args.height, args.width, args.bands, args.classes, args.noise, args.seed)
    cube_path, labels_path = write_scene(args.out, cube, gt)
    log.info(f"Wrote {cube_path} and {labels_path}")


if __name__ == "__main__":
    main()
