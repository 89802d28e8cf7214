"""
Raster File Formats and Wire Codecs

- Binary masks: single-band 8-bit PNG, foreground=255, background=0
- RGB images: 8-bit PNG
- Confidence maps: flat little-endian float32 file + JSON sidecar
- Geotransforms: JSON sidecar {origin_lon, origin_lat, px_w_deg, px_h_deg}
- Wire helpers: base64 PNG, base64 f32le, mask run-length encoding
"""

import base64
import io
import json
from pathlib import Path
from typing import Any, Dict, List, Sequence, Union

import numpy as np
from PIL import Image

try:
    from .raster_core import (
        BinaryMask, ConfidenceMap, GeoTransform, RasterError, RgbImage,
    )
except ImportError:
    from raster_core import (
        BinaryMask, ConfidenceMap, GeoTransform, RasterError, RgbImage,
    )

PathLike = Union[str, Path]


class RasterFormatError(RasterError):
    """A raster file, sidecar or wire payload is malformed."""


# =============================================================================
# Sidecar naming
# =============================================================================

def geo_sidecar_path(path: PathLike) -> Path:
    """`scene.png` -> `scene.geo.json`"""
    path = Path(path)
    return path.with_name(f"{path.stem}.geo.json")


def meta_sidecar_path(path: PathLike) -> Path:
    """`scene.png` -> `scene.meta.json`"""
    path = Path(path)
    return path.with_name(f"{path.stem}.meta.json")


def confidence_sidecar_path(path: PathLike) -> Path:
    """`patch.conf.f32` -> `patch.conf.json`"""
    return Path(path).with_suffix('.json')


# =============================================================================
# PNG
# =============================================================================

def binary_mask_from_png_bytes(data: bytes) -> BinaryMask:
    with Image.open(io.BytesIO(data)) as img:
        array = np.asarray(img.convert('L') if img.mode != 'L' else img)
    if not np.isin(array, (0, 255)).all():
        raise RasterFormatError("Mask PNG must contain only 0 and 255")
    return BinaryMask((array == 255).astype(np.uint8))


def binary_mask_to_png_bytes(mask: BinaryMask) -> bytes:
    buffer = io.BytesIO()
    Image.fromarray((mask.values * 255).astype(np.uint8)).save(buffer, format='PNG')
    return buffer.getvalue()


def read_binary_mask(path: PathLike) -> BinaryMask:
    try:
        return binary_mask_from_png_bytes(Path(path).read_bytes())
    except OSError as e:
        raise RasterFormatError(f"Cannot read mask {path}: {e}")


def write_binary_mask(mask: BinaryMask, path: PathLike) -> None:
    Path(path).write_bytes(binary_mask_to_png_bytes(mask))


def rgb_from_png_bytes(data: bytes) -> RgbImage:
    with Image.open(io.BytesIO(data)) as img:
        return RgbImage(np.asarray(img.convert('RGB')))


def rgb_to_png_bytes(image: RgbImage) -> bytes:
    buffer = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(image.values)).save(buffer, format='PNG')
    return buffer.getvalue()


def read_rgb(path: PathLike) -> RgbImage:
    try:
        return rgb_from_png_bytes(Path(path).read_bytes())
    except OSError as e:
        raise RasterFormatError(f"Cannot read image {path}: {e}")


def write_rgb(image: RgbImage, path: PathLike) -> None:
    Path(path).write_bytes(rgb_to_png_bytes(image))


def read_image_size(path: PathLike) -> tuple:
    """(width, height) without decoding pixels."""
    try:
        with Image.open(path) as img:
            return img.size
    except OSError as e:
        raise RasterFormatError(f"Cannot read image {path}: {e}")


# =============================================================================
# Confidence maps
# =============================================================================

def read_confidence(path: PathLike) -> ConfidenceMap:
    path = Path(path)
    sidecar = confidence_sidecar_path(path)
    try:
        meta = json.loads(sidecar.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise RasterFormatError(f"Cannot read confidence sidecar {sidecar}: {e}")
    if meta.get('dtype') != 'f32le':
        raise RasterFormatError(f"Unsupported confidence dtype: {meta.get('dtype')!r}")
    width, height = int(meta['width']), int(meta['height'])
    values = np.fromfile(path, dtype='<f4')
    if values.size != width * height:
        raise RasterFormatError(
            f"Confidence file has {values.size} values, sidecar says {width}x{height}"
        )
    return ConfidenceMap(values.reshape(height, width))


def write_confidence(conf: ConfidenceMap, path: PathLike) -> None:
    path = Path(path)
    conf.values.astype('<f4').tofile(path)
    confidence_sidecar_path(path).write_text(json.dumps(
        {'width': conf.width, 'height': conf.height, 'dtype': 'f32le'}
    ))


def confidence_to_b64(conf: ConfidenceMap) -> str:
    return base64.b64encode(conf.values.astype('<f4').tobytes()).decode('ascii')


def confidence_from_b64(data: str, width: int, height: int) -> ConfidenceMap:
    try:
        values = np.frombuffer(base64.b64decode(data, validate=True), dtype='<f4')
    except (ValueError, TypeError) as e:
        raise RasterFormatError(f"Invalid base64 confidence payload: {e}")
    if values.size != width * height:
        raise RasterFormatError(
            f"Confidence payload has {values.size} values, expected {width * height}"
        )
    return ConfidenceMap(values.reshape(height, width))


# =============================================================================
# Geotransforms
# =============================================================================

def geo_to_sidecar(geo: GeoTransform) -> Dict[str, float]:
    return {
        'origin_lon': geo.origin_lon,
        'origin_lat': geo.origin_lat,
        'px_w_deg': geo.pixel_width_deg,
        'px_h_deg': geo.pixel_height_deg,
    }


def geo_from_sidecar(data: Dict[str, Any]) -> GeoTransform:
    try:
        return GeoTransform(
            origin_lon=float(data['origin_lon']),
            origin_lat=float(data['origin_lat']),
            pixel_width_deg=float(data['px_w_deg']),
            pixel_height_deg=float(data['px_h_deg']),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise RasterFormatError(f"Malformed geotransform sidecar: {e}")


def read_geo(path: PathLike) -> GeoTransform:
    try:
        return geo_from_sidecar(json.loads(Path(path).read_text()))
    except (OSError, json.JSONDecodeError) as e:
        raise RasterFormatError(f"Cannot read geotransform {path}: {e}")


def write_geo(geo: GeoTransform, path: PathLike) -> None:
    Path(path).write_text(json.dumps(geo_to_sidecar(geo)))


# =============================================================================
# Wire codecs
# =============================================================================

def png_b64(image: RgbImage) -> str:
    return base64.b64encode(rgb_to_png_bytes(image)).decode('ascii')


def rgb_from_png_b64(data: str) -> RgbImage:
    try:
        return rgb_from_png_bytes(base64.b64decode(data, validate=True))
    except (ValueError, OSError) as e:
        raise RasterFormatError(f"Invalid base64 PNG payload: {e}")


def encode_mask_rle(mask: BinaryMask) -> List[int]:
    """
    Run lengths over the row-major pixels, alternating background/foreground
    and always starting with background (a leading 0 when pixel 0 is foreground).
    """
    flat = mask.values.ravel()
    change_points = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate(([0], change_points, [flat.size]))
    runs = np.diff(bounds).tolist()
    if flat[0] == 1:
        runs.insert(0, 0)
    return [int(r) for r in runs]


def decode_mask_rle(runs: Sequence[int], width: int, height: int) -> BinaryMask:
    if not runs:
        raise RasterFormatError("Empty RLE")
    counts = np.asarray(runs, dtype=np.int64)
    if (counts < 0).any():
        raise RasterFormatError("RLE run lengths must be non-negative")
    if int(counts.sum()) != width * height:
        raise RasterFormatError(
            f"RLE covers {int(counts.sum())} pixels, expected {width * height}"
        )
    values = np.repeat(np.arange(counts.size) % 2, counts).astype(np.uint8)
    return BinaryMask(values.reshape(height, width))
