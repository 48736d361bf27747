"""Raw little-endian rasters with JSON sidecar headers, plus 8-bit graymaps."""

import json
import logging
import os
from typing import Dict, Optional

import numpy as np
from PIL import Image

from src.models.types import RasterHeader
from src.utils.errors import DataError

logger = logging.getLogger('esmlr.raster_io')

DTYPES: Dict[str, str] = {
    'f32le': '<f4',
    'f64le': '<f8',
    'u16le': '<u2',
    'u8': 'u1',
}


def sidecar_path(path: str) -> str:
    """`scene.bsq` -> `scene.json`."""
    return os.path.splitext(path)[0] + '.json'


def read_header(path: str) -> RasterHeader:
    """Read and validate the JSON sidecar for a raw raster file."""
    header_file = sidecar_path(path)
    if not os.path.exists(header_file):
        raise DataError(f"Missing header {header_file} for {path}")

    try:
        with open(header_file, 'r') as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"Unreadable header {header_file}: {e}") from e

    for key in ('height', 'width', 'bands'):
        value = raw.get(key)
        if not isinstance(value, int) or isinstance(value, bool) or value < 1:
            raise DataError(f"Header {header_file}: '{key}' must be a positive integer, got {value!r}")

    dtype = raw.get('dtype', 'f32le')
    if dtype not in DTYPES:
        raise DataError(f"Header {header_file}: unsupported dtype {dtype!r}")

    return RasterHeader(
        height=raw['height'],
        width=raw['width'],
        bands=raw['bands'],
        interleave=raw.get('interleave', 'bsq'),
        dtype=dtype,
    )


def read_header_extras(path: str) -> Dict:
    """Sidecar keys beyond the raster schema (block tags, manifests)."""
    with open(sidecar_path(path), 'r') as fh:
        raw = json.load(fh)
    return {k: v for k, v in raw.items() if k not in RasterHeader.__annotations__}


def write_header(path: str, header: RasterHeader, extra: Optional[Dict] = None) -> str:
    """Write `<name>.json` next to `path`; extra keys are appended after the schema fields."""
    payload = dict(header)
    if extra:
        payload.update(extra)
    header_file = sidecar_path(path)
    with open(header_file, 'w') as fh:
        json.dump(payload, fh, indent=2)
    return header_file


def read_raw(path: str, header: RasterHeader) -> np.ndarray:
    """Read a raw file as a flat array, checking its size against the header."""
    if not os.path.exists(path):
        raise DataError(f"File not found: {path}")

    dtype = np.dtype(DTYPES[header['dtype']])
    expected = header['height'] * header['width'] * header['bands'] * dtype.itemsize
    actual = os.path.getsize(path)
    if actual != expected:
        raise DataError(
            f"{path}: size {actual} bytes does not match header "
            f"{header['height']}x{header['width']}x{header['bands']}x{dtype.itemsize} = {expected}"
        )

    return np.fromfile(path, dtype=dtype)


def write_raw(path: str, values: np.ndarray, dtype: str) -> None:
    """Write `values` (already in file order) as raw little-endian data."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    np.ascontiguousarray(values, dtype=np.dtype(DTYPES[dtype])).tofile(path)


def write_pgm(path: str, image: np.ndarray) -> None:
    """Write a 2-D label image as a binary (P5) 8-bit portable graymap."""
    if image.ndim != 2:
        raise DataError(f"Graymap must be 2-D, got shape {image.shape}")
    if image.size and (image.min() < 0 or image.max() > 255):
        raise DataError("Graymap values must fit in 0..255")

    Image.fromarray(image.astype(np.uint8)).save(path, format='PPM')
    logger.debug(f"Wrote graymap {path} ({image.shape[0]}x{image.shape[1]})")


def read_pgm(path: str) -> np.ndarray:
    with Image.open(path) as img:
        return np.array(img, dtype=np.uint8)
