"""
Raster Core Module

Pure pixel-grid algebra used by every pipeline stage:
- Confidence binarization and connected-component extraction
- Bounding boxes, cropping and mask arithmetic (add / subtract / clamp)
- Geo-registration of auxiliary masks onto a patch grid

All rasters wrap read-only numpy arrays, so values can be shared freely
between worker threads.
"""

import math
from dataclasses import dataclass, replace
from enum import Enum
from typing import List, Optional, Tuple, Union

import numpy as np
from scipy import ndimage


class RasterError(Exception):
    """Base class for raster validation and algebra errors."""


class InvalidRasterError(RasterError):
    """Raster shape or value range is invalid."""


class NonFiniteConfidenceError(RasterError):
    """Confidence map contains NaN or infinite values."""


class DimensionMismatchError(RasterError):
    """Two rasters that must align have different dimensions."""


class OutOfBoundsError(RasterError):
    """A box does not lie within the host raster."""


class EmptyRegionError(RasterError):
    """A region has no pixels."""


class NoGeoOverlapError(RasterError):
    """Auxiliary raster does not overlap the target region geographically."""


class Connectivity(Enum):
    """Pixel neighbourhood used for connected-component labelling."""
    FOUR = 4
    EIGHT = 8

    @classmethod
    def parse(cls, value: Union[int, str, "Connectivity"]) -> "Connectivity":
        if isinstance(value, Connectivity):
            return value
        try:
            return cls(int(str(value).split('-')[0]))
        except ValueError:
            raise InvalidRasterError(f"Unknown connectivity: {value!r}")


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, copy=True)
    array.setflags(write=False)
    return array


def _check_2d(values: np.ndarray, kind: str) -> None:
    if values.ndim != 2 or values.shape[0] == 0 or values.shape[1] == 0:
        raise InvalidRasterError(f"{kind} must be a non-empty 2-D grid, got shape {values.shape}")


@dataclass(frozen=True)
class ConfidenceMap:
    """Per-pixel signed confidence scores C(x, y), row-major (height, width)."""
    values: np.ndarray

    def __post_init__(self):
        values = _frozen(np.asarray(self.values, dtype=np.float64))
        _check_2d(values, "ConfidenceMap")
        if not np.all(np.isfinite(values)):
            raise NonFiniteConfidenceError("Confidence map contains NaN or infinite values")
        object.__setattr__(self, 'values', values)

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def height(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class BinaryMask:
    """Per-pixel {0, 1} grid, row-major (height, width)."""
    values: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.values)
        _check_2d(raw, "BinaryMask")
        if not np.isin(raw, (0, 1)).all():
            raise InvalidRasterError("BinaryMask entries must be 0 or 1")
        object.__setattr__(self, 'values', _frozen(raw.astype(np.uint8)))

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def height(self) -> int:
        return int(self.values.shape[0])

    @classmethod
    def zeros(cls, width: int, height: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=np.uint8))


@dataclass(frozen=True)
class IntMask:
    """Intermediate corrected mask; entries in {-1, 0, 1, 2}."""
    values: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.values)
        _check_2d(raw, "IntMask")
        if not np.isin(raw, (-1, 0, 1, 2)).all():
            raise InvalidRasterError("IntMask entries must lie in {-1, 0, 1, 2}")
        object.__setattr__(self, 'values', _frozen(raw.astype(np.int8)))

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def height(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class RgbImage:
    """8-bit RGB image, shape (height, width, 3)."""
    values: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.values)
        if raw.ndim != 3 or raw.shape[2] != 3 or raw.shape[0] == 0 or raw.shape[1] == 0:
            raise InvalidRasterError(f"RgbImage must have shape (H, W, 3), got {raw.shape}")
        object.__setattr__(self, 'values', _frozen(raw.astype(np.uint8)))

    @property
    def width(self) -> int:
        return int(self.values.shape[1])

    @property
    def height(self) -> int:
        return int(self.values.shape[0])


Raster = Union[ConfidenceMap, BinaryMask, IntMask, RgbImage]


@dataclass(frozen=True)
class Bbox:
    """Half-open pixel box [x_min, x_max) x [y_min, y_max), origin top-left."""
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    def __post_init__(self):
        for name in ('x_min', 'y_min', 'x_max', 'y_max'):
            object.__setattr__(self, name, int(getattr(self, name)))
        if self.x_min >= self.x_max or self.y_min >= self.y_max:
            raise InvalidRasterError(f"Degenerate bbox: {self.to_list()}")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    @property
    def area(self) -> int:
        return self.width * self.height

    @property
    def slices(self) -> Tuple[slice, slice]:
        """(row slice, column slice) for numpy indexing."""
        return slice(self.y_min, self.y_max), slice(self.x_min, self.x_max)

    def within(self, width: int, height: int) -> bool:
        return self.x_min >= 0 and self.y_min >= 0 and self.x_max <= width and self.y_max <= height

    def to_list(self) -> List[int]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @classmethod
    def from_list(cls, coords) -> "Bbox":
        if len(coords) != 4:
            raise InvalidRasterError(f"Bbox needs 4 coordinates, got {coords!r}")
        return cls(*coords)


@dataclass(frozen=True)
class GeoBox:
    """Lon/lat rectangle in degrees."""
    lon_min: float
    lat_min: float
    lon_max: float
    lat_max: float

    def __post_init__(self):
        values = (self.lon_min, self.lat_min, self.lon_max, self.lat_max)
        if not all(math.isfinite(v) for v in values):
            raise InvalidRasterError(f"GeoBox coordinates must be finite: {values}")
        if self.lon_min >= self.lon_max or self.lat_min >= self.lat_max:
            raise InvalidRasterError(f"Degenerate GeoBox: {values}")

    @property
    def center(self) -> Tuple[float, float]:
        return (self.lon_min + self.lon_max) / 2.0, (self.lat_min + self.lat_max) / 2.0

    def contains(self, other: "GeoBox", tolerance: float = 1e-12) -> bool:
        return (self.lon_min <= other.lon_min + tolerance
                and self.lat_min <= other.lat_min + tolerance
                and self.lon_max >= other.lon_max - tolerance
                and self.lat_max >= other.lat_max - tolerance)

    def intersects(self, other: "GeoBox") -> bool:
        return (self.lon_min < other.lon_max and other.lon_min < self.lon_max
                and self.lat_min < other.lat_max and other.lat_min < self.lat_max)

    def scaled(self, factor: float) -> "GeoBox":
        """Scale the box about its center."""
        lon_c, lat_c = self.center
        half_w = (self.lon_max - self.lon_min) * factor / 2.0
        half_h = (self.lat_max - self.lat_min) * factor / 2.0
        return GeoBox(lon_c - half_w, lat_c - half_h, lon_c + half_w, lat_c + half_h)

    def to_list(self) -> List[float]:
        return [self.lon_min, self.lat_min, self.lon_max, self.lat_max]

    @classmethod
    def from_list(cls, coords) -> "GeoBox":
        if len(coords) != 4:
            raise InvalidRasterError(f"GeoBox needs 4 coordinates, got {coords!r}")
        return cls(*(float(c) for c in coords))


@dataclass(frozen=True)
class GeoTransform:
    """
    Affine north-up mapping from pixel (col, row) corners to (lon, lat).

    lon = origin_lon + col * pixel_width_deg
    lat = origin_lat + row * pixel_height_deg   (pixel_height_deg < 0 for north-up)
    """
    origin_lon: float
    origin_lat: float
    pixel_width_deg: float
    pixel_height_deg: float

    def __post_init__(self):
        if not self.pixel_width_deg > 0:
            raise InvalidRasterError("pixel_width_deg must be positive")
        if self.pixel_height_deg == 0 or not math.isfinite(self.pixel_height_deg):
            raise InvalidRasterError("pixel_height_deg must be non-zero")

    def pixel_to_geo(self, col: float, row: float) -> Tuple[float, float]:
        return (self.origin_lon + col * self.pixel_width_deg,
                self.origin_lat + row * self.pixel_height_deg)

    def pixel_center(self, col: int, row: int) -> Tuple[float, float]:
        return self.pixel_to_geo(col + 0.5, row + 0.5)

    def geo_to_pixel(self, lon: float, lat: float) -> Tuple[float, float]:
        """Fractional (col, row) of a geographic point."""
        return ((lon - self.origin_lon) / self.pixel_width_deg,
                (lat - self.origin_lat) / self.pixel_height_deg)

    def bbox_to_geo(self, box: Bbox) -> GeoBox:
        lon_a, lat_a = self.pixel_to_geo(box.x_min, box.y_min)
        lon_b, lat_b = self.pixel_to_geo(box.x_max, box.y_max)
        return GeoBox(min(lon_a, lon_b), min(lat_a, lat_b), max(lon_a, lon_b), max(lat_a, lat_b))

    def footprint(self, width: int, height: int) -> GeoBox:
        return self.bbox_to_geo(Bbox(0, 0, width, height))

    def geo_to_bbox(self, geo_box: GeoBox, width: int, height: int) -> Optional[Bbox]:
        """Smallest pixel box covering geo_box, clamped to the raster; None if disjoint."""
        col_a, row_a = self.geo_to_pixel(geo_box.lon_min, geo_box.lat_min)
        col_b, row_b = self.geo_to_pixel(geo_box.lon_max, geo_box.lat_max)
        x_min = max(0, int(math.floor(min(col_a, col_b) + 1e-9)))
        y_min = max(0, int(math.floor(min(row_a, row_b) + 1e-9)))
        x_max = min(width, int(math.ceil(max(col_a, col_b) - 1e-9)))
        y_max = min(height, int(math.ceil(max(row_a, row_b) - 1e-9)))
        if x_min >= x_max or y_min >= y_max:
            return None
        return Bbox(x_min, y_min, x_max, y_max)

    @classmethod
    def for_geo_box(cls, geo_box: GeoBox, width: int, height: int) -> "GeoTransform":
        """North-up transform mapping a width x height grid exactly onto geo_box."""
        return cls(
            origin_lon=geo_box.lon_min,
            origin_lat=geo_box.lat_max,
            pixel_width_deg=(geo_box.lon_max - geo_box.lon_min) / width,
            pixel_height_deg=-(geo_box.lat_max - geo_box.lat_min) / height,
        )


@dataclass(frozen=True)
class Region:
    """A connected set of foreground pixels, coordinates as parallel row/col arrays."""
    region_id: int
    rows: np.ndarray
    cols: np.ndarray

    @property
    def pixel_count(self) -> int:
        return int(self.rows.size)

    def pixel_set(self) -> frozenset:
        """Pixels as (x, y) tuples."""
        return frozenset(zip(self.cols.tolist(), self.rows.tolist()))


# =============================================================================
# Operations
# =============================================================================

def binarize_confidence(conf: ConfidenceMap, threshold: float) -> BinaryMask:
    """
    Low-confidence mask: 1 where C(x, y) lies in [-T, T], else 0.

    Args:
        conf: Confidence map (signed, logit-like)
        threshold: Non-negative half-width T of the interval

    Returns:
        BinaryMask with the dimensions of conf
    """
    if not threshold >= 0 or not math.isfinite(threshold):
        raise InvalidRasterError(f"Threshold must be a finite non-negative number, got {threshold}")
    if not np.all(np.isfinite(conf.values)):
        raise NonFiniteConfidenceError("Confidence map contains NaN or infinite values")
    return BinaryMask(np.abs(conf.values) <= threshold)


def _structure(connectivity: Connectivity) -> np.ndarray:
    rank = 1 if connectivity is Connectivity.FOUR else 2
    return ndimage.generate_binary_structure(2, rank)


def label_connected_components(
    mask: BinaryMask,
    connectivity: Connectivity = Connectivity.EIGHT
) -> List[Region]:
    """
    Extract connected foreground regions.

    Ids run 1..K in raster order of each region's first pixel.
    """
    connectivity = Connectivity.parse(connectivity)
    labels, count = ndimage.label(mask.values, structure=_structure(connectivity))
    if count == 0:
        return []

    flat_labels = labels.ravel()
    foreground = np.flatnonzero(flat_labels)
    group_labels = flat_labels[foreground]
    order = np.argsort(group_labels, kind='stable')
    sorted_idx = foreground[order]
    _, starts = np.unique(group_labels[order], return_index=True)
    groups = np.split(sorted_idx, starts[1:])

    # stable sort keeps raster order inside each group, so group[0] is the first pixel
    groups.sort(key=lambda g: g[0])

    regions = []
    for region_id, flat in enumerate(groups, start=1):
        rows, cols = np.divmod(flat, mask.width)
        regions.append(Region(region_id, _frozen(rows), _frozen(cols)))
    return regions


def bounding_box(region: Region) -> Bbox:
    """Tightest half-open box containing every pixel of the region."""
    if region.pixel_count == 0:
        raise EmptyRegionError(f"Region {region.region_id} is empty")
    return Bbox(
        int(region.cols.min()),
        int(region.rows.min()),
        int(region.cols.max()) + 1,
        int(region.rows.max()) + 1,
    )


def _check_same_dims(a, b) -> None:
    if a.values.shape[:2] != b.values.shape[:2]:
        raise DimensionMismatchError(
            f"Dimension mismatch: {a.width}x{a.height} vs {b.width}x{b.height}"
        )


def mask_add(a: BinaryMask, b: BinaryMask) -> IntMask:
    _check_same_dims(a, b)
    return IntMask(a.values.astype(np.int8) + b.values.astype(np.int8))


def mask_subtract(a: BinaryMask, b: BinaryMask) -> IntMask:
    _check_same_dims(a, b)
    return IntMask(a.values.astype(np.int8) - b.values.astype(np.int8))


def clamp_binary(m: IntMask) -> BinaryMask:
    """Binary remapping: min(max(0, m), 1) per pixel."""
    return BinaryMask(np.clip(m.values, 0, 1))


def crop(raster: Raster, box: Bbox) -> Raster:
    """Exact sub-grid copy of any raster kind."""
    if not box.within(raster.width, raster.height):
        raise OutOfBoundsError(
            f"Box {box.to_list()} outside {raster.width}x{raster.height} raster"
        )
    rows, cols = box.slices
    return replace(raster, values=raster.values[rows, cols])


def nearest_pixel_index(coord: np.ndarray) -> np.ndarray:
    """
    Index of the pixel whose center is nearest to each fractional coordinate.

    Pixel k owns [k, k+1). Exact interior edges are ties between two centers
    and go to the lower pixel; the outer edge at 0 belongs to pixel 0.
    """
    coord = np.where(np.abs(coord) < 1e-9, 0.0, coord)
    nearest = np.floor(coord)
    rounded = np.round(coord)
    on_edge = (np.abs(coord - rounded) < 1e-9) & (rounded > 0)
    return np.where(on_edge, rounded - 1, nearest).astype(np.int64)


def register_mask(
    aux_mask: BinaryMask,
    aux_geo: GeoTransform,
    target_geo: GeoTransform,
    target_dims: Tuple[int, int],
    restrict_to: Bbox,
) -> BinaryMask:
    """
    Resample an auxiliary mask onto the target grid inside restrict_to.

    Each target pixel in restrict_to takes the aux pixel whose center is
    nearest to its own geographic center; everything else is 0.

    Args:
        aux_mask: Mask on the auxiliary image grid
        aux_geo: Geotransform of the auxiliary image
        target_geo: Geotransform of the target patch
        target_dims: (width, height) of the target patch
        restrict_to: Pixel box on the target grid that may be written

    Returns:
        BinaryMask with target dimensions
    """
    width, height = target_dims
    if not restrict_to.within(width, height):
        raise OutOfBoundsError(f"restrict_to {restrict_to.to_list()} outside {width}x{height}")

    cols = np.arange(restrict_to.x_min, restrict_to.x_max) + 0.5
    rows = np.arange(restrict_to.y_min, restrict_to.y_max) + 0.5
    lons = target_geo.origin_lon + cols * target_geo.pixel_width_deg
    lats = target_geo.origin_lat + rows * target_geo.pixel_height_deg

    aux_cols = nearest_pixel_index((lons - aux_geo.origin_lon) / aux_geo.pixel_width_deg)
    aux_rows = nearest_pixel_index((lats - aux_geo.origin_lat) / aux_geo.pixel_height_deg)

    col_ok = (aux_cols >= 0) & (aux_cols < aux_mask.width)
    row_ok = (aux_rows >= 0) & (aux_rows < aux_mask.height)
    if not col_ok.any() or not row_ok.any():
        raise NoGeoOverlapError(
            f"Auxiliary raster does not overlap target box {restrict_to.to_list()}"
        )

    inside = row_ok[:, None] & col_ok[None, :]
    sampled = aux_mask.values[
        np.clip(aux_rows, 0, aux_mask.height - 1)[:, None],
        np.clip(aux_cols, 0, aux_mask.width - 1)[None, :],
    ]
    out = np.zeros((height, width), dtype=np.uint8)
    out[restrict_to.slices] = np.where(inside, sampled, 0)
    return BinaryMask(out)
