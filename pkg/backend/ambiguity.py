"""
Ambiguity Region Selection

Stage 1 of the pipeline: turn a confidence map into the list of ambiguous
regions worth querying about, and draw red boxes for the reasoning model.

Selection = binarize [-T, T] -> connected components -> bounding box ->
keep regions whose bbox area lies in [S, S + s] (inclusive on both ends).
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Tuple

import numpy as np

try:
    from .raster_core import (
        Bbox, ConfidenceMap, Connectivity, InvalidRasterError, OutOfBoundsError, RgbImage,
        binarize_confidence, bounding_box, label_connected_components,
    )
except ImportError:
    from raster_core import (
        Bbox, ConfidenceMap, Connectivity, InvalidRasterError, OutOfBoundsError, RgbImage,
        binarize_confidence, bounding_box, label_connected_components,
    )

logger = logging.getLogger(__name__)

# Configured values of the reference experiments
DEFAULT_THRESHOLD = 1.0
DEFAULT_AREA_MIN = 5000
DEFAULT_AREA_INCREMENT = 95000


@dataclass(frozen=True)
class AmbiguityParams:
    """Threshold T, minimum bbox area S and allowed increment s."""
    threshold: float = DEFAULT_THRESHOLD
    area_min: int = DEFAULT_AREA_MIN
    area_increment: int = DEFAULT_AREA_INCREMENT
    connectivity: Connectivity = Connectivity.EIGHT

    def __post_init__(self):
        object.__setattr__(self, 'connectivity', Connectivity.parse(self.connectivity))
        if not self.threshold >= 0:
            raise InvalidRasterError(f"threshold must be >= 0, got {self.threshold}")
        if self.area_min < 0 or self.area_increment < 0:
            raise InvalidRasterError("area_min and area_increment must be >= 0")

    @property
    def area_max(self) -> int:
        return self.area_min + self.area_increment

    def to_dict(self) -> Dict[str, Any]:
        return {
            'threshold': self.threshold,
            'area_min': self.area_min,
            'area_increment': self.area_increment,
            'connectivity': self.connectivity.value,
        }


@dataclass(frozen=True)
class AmbiguityRegion:
    region_id: int
    bbox: Bbox
    bbox_area: int
    pixel_count: int
    source_patch_id: str = ''

    def to_record(self) -> Dict[str, Any]:
        return {
            'region_id': self.region_id,
            'bbox': self.bbox.to_list(),
            'bbox_area': self.bbox_area,
            'pixel_count': self.pixel_count,
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any], source_patch_id: str = '') -> "AmbiguityRegion":
        bbox = Bbox.from_list(record['bbox'])
        return cls(
            region_id=int(record['region_id']),
            bbox=bbox,
            bbox_area=int(record.get('bbox_area', bbox.area)),
            pixel_count=int(record['pixel_count']),
            source_patch_id=source_patch_id,
        )


@dataclass(frozen=True)
class BoxStyle:
    color: Tuple[int, int, int] = (255, 0, 0)
    stroke_px: int = 3


def select_ambiguous_regions(
    conf: ConfidenceMap,
    params: AmbiguityParams,
    source_patch_id: str = ''
) -> List[AmbiguityRegion]:
    """
    Flag low-confidence connected regions whose bbox area is in [S, S + s].

    Args:
        conf: Confidence map of the base segmentation
        params: Threshold, area range and connectivity
        source_patch_id: Patch identifier stamped on each region

    Returns:
        Regions ordered by region id (raster order of first pixel)
    """
    mask = binarize_confidence(conf, params.threshold)
    selected = []
    components = label_connected_components(mask, params.connectivity)
    for component in components:
        box = bounding_box(component)
        if params.area_min <= box.area <= params.area_max:
            selected.append(AmbiguityRegion(
                region_id=component.region_id,
                bbox=box,
                bbox_area=box.area,
                pixel_count=component.pixel_count,
                source_patch_id=source_patch_id,
            ))
    logger.debug(
        "Patch %s: %d components, %d within area range [%d, %d]",
        source_patch_id or '-', len(components), len(selected), params.area_min, params.area_max,
    )
    return selected


def outline_mask(box: Bbox, stroke_px: int, width: int, height: int) -> np.ndarray:
    """Boolean (height, width) grid of box pixels closer than stroke_px to a box edge."""
    outline = np.zeros((height, width), dtype=bool)
    if stroke_px <= 0:
        return outline
    s = stroke_px
    inner = outline[box.slices]
    inner[:s, :] = True
    inner[-s:, :] = True
    inner[:, :s] = True
    inner[:, -s:] = True
    return outline


def annotate_with_box(image: RgbImage, box: Bbox, style: BoxStyle = BoxStyle()) -> RgbImage:
    """Draw a box outline; only outline pixels change."""
    if not box.within(image.width, image.height):
        raise OutOfBoundsError(
            f"Box {box.to_list()} outside {image.width}x{image.height} image"
        )
    outline = outline_mask(box, style.stroke_px, image.width, image.height)
    values = image.values.copy()
    values[outline] = style.color
    return RgbImage(values)
