"""
FRSI Scene Database

Stores georeferenced wide-swath scenes and serves auxiliary-image queries:
- Append-only JSON-lines catalog; scene pixels stay as PNG files on disk
- Two-level in-memory index: data type -> (country, province) -> scene ids
- Temporal queries: one crop per other season covering the region
- Enlarge queries: crops of the region footprint scaled about its center

Resolution order is always data type, then province, then coordinate containment.
"""

import functools
import json
import logging
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, FrozenSet, Iterable, List, Optional, Tuple, Union

import numpy as np

try:
    from .raster_core import GeoBox, GeoTransform, InvalidRasterError, RgbImage, nearest_pixel_index
    from .raster_io import (
        RasterFormatError, geo_from_sidecar, geo_sidecar_path, geo_to_sidecar,
        meta_sidecar_path, read_geo, read_image_size, read_rgb,
    )
except ImportError:
    from raster_core import GeoBox, GeoTransform, InvalidRasterError, RgbImage, nearest_pixel_index
    from raster_io import (
        RasterFormatError, geo_from_sidecar, geo_sidecar_path, geo_to_sidecar,
        meta_sidecar_path, read_geo, read_image_size, read_rgb,
    )

logger = logging.getLogger(__name__)

CATALOG_FILENAME = 'catalog.jsonl'
DEFAULT_ENLARGE_SCALE = 3.0
DEFAULT_PATCH_PX = 512


class ImageDbError(Exception):
    """Base class for scene database errors."""


class MissingSidecarError(ImageDbError):
    pass


class ConflictingSceneError(ImageDbError):
    pass


class MalformedSidecarError(ImageDbError):
    pass


class InvalidQueryError(ImageDbError):
    pass


class FootprintError(ImageDbError):
    """Requested crop exceeds the scene footprint."""


class DataType(Enum):
    MULTI_TEMPORAL = 'multi-temporal'
    ENLARGE = 'enlarge'


class Season(Enum):
    SPRING = 'spring'
    SUMMER = 'summer'
    AUTUMN = 'autumn'
    WINTER = 'winter'

    @property
    def order(self) -> int:
        return _SEASON_ORDER[self]

    @classmethod
    def parse(cls, value: Union[str, "Season"]) -> "Season":
        if isinstance(value, Season):
            return value
        try:
            return cls(str(value).strip().lower())
        except ValueError:
            raise InvalidQueryError(f"Unknown season: {value!r}")


_SEASON_ORDER = {season: i for i, season in enumerate(Season)}


class QueryKind(Enum):
    TEMPORAL = 'temporal'
    ENLARGE = 'enlarge'

    @property
    def data_type(self) -> DataType:
        return DataType.MULTI_TEMPORAL if self is QueryKind.TEMPORAL else DataType.ENLARGE


AdminRegion = Tuple[str, str]


@dataclass(frozen=True)
class SceneRecord:
    scene_id: str
    data_types: FrozenSet[DataType]
    country: str
    province: str
    season: Season
    acquisition_tag: str
    geo: GeoTransform
    width: int
    height: int
    storage_path: str

    def __post_init__(self):
        if not self.scene_id:
            raise ImageDbError("scene_id must be non-empty")
        if not self.country or not self.province:
            raise ImageDbError(f"Scene {self.scene_id}: admin region must be non-empty")
        if not self.data_types:
            raise ImageDbError(f"Scene {self.scene_id}: at least one data type is required")
        if self.width <= 0 or self.height <= 0:
            raise ImageDbError(f"Scene {self.scene_id}: dimensions must be positive")

    @property
    def admin_region(self) -> AdminRegion:
        return (self.country, self.province)

    @property
    def footprint(self) -> GeoBox:
        return self.geo.footprint(self.width, self.height)

    def to_record(self) -> Dict[str, Any]:
        return {
            'scene_id': self.scene_id,
            'data_types': sorted(t.value for t in self.data_types),
            'country': self.country,
            'province': self.province,
            'season': self.season.value,
            'acquisition_tag': self.acquisition_tag,
            'geo': geo_to_sidecar(self.geo),
            'width': self.width,
            'height': self.height,
            'storage_path': self.storage_path,
        }

    @classmethod
    def from_record(cls, record: Dict[str, Any]) -> "SceneRecord":
        try:
            return cls(
                scene_id=str(record['scene_id']),
                data_types=_parse_data_types(record['data_types']),
                country=str(record['country']),
                province=str(record['province']),
                season=Season.parse(record['season']),
                acquisition_tag=str(record.get('acquisition_tag', '')),
                geo=geo_from_sidecar(record['geo']),
                width=int(record['width']),
                height=int(record['height']),
                storage_path=str(record['storage_path']),
            )
        except KeyError as e:
            raise ImageDbError(f"Scene record missing field {e}")


def _parse_data_types(value: Union[str, Iterable[str]]) -> FrozenSet[DataType]:
    if isinstance(value, (str, DataType)):
        value = [value]
    try:
        return frozenset(v if isinstance(v, DataType) else DataType(str(v)) for v in value)
    except ValueError as e:
        raise ImageDbError(f"Unknown data type: {e}")


@dataclass(frozen=True)
class QuerySpec:
    kind: QueryKind
    geo_bbox: GeoBox
    exclude_season: Optional[Season] = None
    enlarge_scale: float = DEFAULT_ENLARGE_SCALE
    requested_patch_px: int = DEFAULT_PATCH_PX
    admin_region: Optional[AdminRegion] = None

    def __post_init__(self):
        if not isinstance(self.kind, QueryKind):
            raise InvalidQueryError(f"Unknown query kind: {self.kind!r}")
        if not isinstance(self.geo_bbox, GeoBox):
            raise InvalidQueryError("geo_bbox must be a GeoBox")
        if self.kind is QueryKind.ENLARGE and not self.enlarge_scale > 1:
            raise InvalidQueryError(f"enlarge_scale must be > 1, got {self.enlarge_scale}")
        if int(self.requested_patch_px) <= 0:
            raise InvalidQueryError("requested_patch_px must be positive")

    @property
    def target_box(self) -> GeoBox:
        """Geographic footprint every returned crop covers exactly."""
        if self.kind is QueryKind.ENLARGE:
            return self.geo_bbox.scaled(self.enlarge_scale)
        return self.geo_bbox

    def to_dict(self) -> Dict[str, Any]:
        return {
            'kind': self.kind.value,
            'geo_bbox': self.geo_bbox.to_list(),
            'exclude_season': self.exclude_season.value if self.exclude_season else None,
            'enlarge_scale': self.enlarge_scale,
            'requested_patch_px': self.requested_patch_px,
            'admin_region': list(self.admin_region) if self.admin_region else None,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "QuerySpec":
        """Build a spec from its JSON form; malformed input raises InvalidQueryError."""
        try:
            kind = QueryKind(data['kind'])
            geo_bbox = GeoBox.from_list(data['geo_bbox'])
            exclude = data.get('exclude_season')
            admin = data.get('admin_region')
            return cls(
                kind=kind,
                geo_bbox=geo_bbox,
                exclude_season=Season.parse(exclude) if exclude else None,
                enlarge_scale=float(data.get('enlarge_scale', DEFAULT_ENLARGE_SCALE)),
                requested_patch_px=int(data.get('requested_patch_px', DEFAULT_PATCH_PX)),
                admin_region=(str(admin[0]), str(admin[1])) if admin else None,
            )
        except (KeyError, TypeError, ValueError, IndexError, InvalidRasterError) as e:
            raise InvalidQueryError(f"Malformed query spec: {e}")


@dataclass(frozen=True)
class CandidateImage:
    candidate_id: str
    pixels: RgbImage
    geo: GeoTransform
    season: Season
    source_scene_id: str
    acquisition_tag: str = ''

    @property
    def footprint(self) -> GeoBox:
        return self.geo.footprint(self.pixels.width, self.pixels.height)

    def to_metadata(self) -> Dict[str, Any]:
        return {
            'candidate_id': self.candidate_id,
            'source_scene_id': self.source_scene_id,
            'season': self.season.value,
            'acquisition_tag': self.acquisition_tag,
            'geo': geo_to_sidecar(self.geo),
            'footprint': self.footprint.to_list(),
            'width': self.pixels.width,
            'height': self.pixels.height,
        }


@functools.lru_cache(maxsize=32)
def _load_scene_pixels(storage_path: str) -> RgbImage:
    return read_rgb(storage_path)


def crop_by_geo(scene: SceneRecord, geo_bbox: GeoBox, out_px: int, kind: str = 'crop') -> CandidateImage:
    """
    Nearest-neighbour sample of a scene over geo_bbox onto an out_px x out_px grid.

    Args:
        scene: Scene to crop
        geo_bbox: Footprint of the crop; must lie within the scene footprint
        out_px: Output edge length in pixels
        kind: Label used in the candidate id

    Returns:
        CandidateImage carrying the derived geotransform
    """
    if not scene.footprint.contains(geo_bbox, tolerance=1e-9):
        raise FootprintError(
            f"Crop {geo_bbox.to_list()} exceeds footprint of scene {scene.scene_id}"
        )
    pixels = _load_scene_pixels(scene.storage_path)
    if (pixels.width, pixels.height) != (scene.width, scene.height):
        raise ImageDbError(
            f"Scene {scene.scene_id} file is {pixels.width}x{pixels.height}, "
            f"catalog says {scene.width}x{scene.height}"
        )

    out_geo = GeoTransform.for_geo_box(geo_bbox, out_px, out_px)
    centers = np.arange(out_px) + 0.5
    lons = out_geo.origin_lon + centers * out_geo.pixel_width_deg
    lats = out_geo.origin_lat + centers * out_geo.pixel_height_deg
    cols = nearest_pixel_index((lons - scene.geo.origin_lon) / scene.geo.pixel_width_deg)
    rows = nearest_pixel_index((lats - scene.geo.origin_lat) / scene.geo.pixel_height_deg)
    cols = np.clip(cols, 0, scene.width - 1)
    rows = np.clip(rows, 0, scene.height - 1)

    return CandidateImage(
        candidate_id=f"{scene.scene_id}/{kind}",
        pixels=RgbImage(pixels.values[rows[:, None], cols[None, :]]),
        geo=out_geo,
        season=scene.season,
        source_scene_id=scene.scene_id,
        acquisition_tag=scene.acquisition_tag,
    )


Index = Dict[DataType, Dict[AdminRegion, Tuple[str, ...]]]


def _build_index(scenes: Dict[str, SceneRecord]) -> Index:
    index: Dict[DataType, Dict[AdminRegion, List[str]]] = {}
    for scene_id in sorted(scenes):
        scene = scenes[scene_id]
        for data_type in scene.data_types:
            index.setdefault(data_type, {}).setdefault(scene.admin_region, []).append(scene_id)
    return {
        data_type: {region: tuple(ids) for region, ids in buckets.items()}
        for data_type, buckets in index.items()
    }


class SceneDatabase:
    """
    Scene store with a hierarchical index.

    Reads work on an immutable snapshot of (scenes, index); ingestion builds a
    new snapshot and publishes it under a lock, so queries never see a
    half-ingested scene.
    """

    def __init__(self, catalog_dir: Optional[Union[str, Path]] = None):
        self.catalog_dir = Path(catalog_dir) if catalog_dir else None
        self._write_lock = threading.Lock()
        self._scenes: Dict[str, SceneRecord] = {}
        self._index: Index = {}
        if self.catalog_dir:
            self._load_catalog()

    @property
    def catalog_path(self) -> Optional[Path]:
        return self.catalog_dir / CATALOG_FILENAME if self.catalog_dir else None

    def _load_catalog(self) -> None:
        scenes: Dict[str, SceneRecord] = {}
        if self.catalog_path.exists():
            for line_no, line in enumerate(self.catalog_path.read_text().splitlines(), start=1):
                if not line.strip():
                    continue
                try:
                    record = SceneRecord.from_record(json.loads(line))
                except (json.JSONDecodeError, RasterFormatError) as e:
                    raise ImageDbError(f"{self.catalog_path}:{line_no}: {e}")
                # append-only: a later line for the same id supersedes earlier ones
                scenes[record.scene_id] = record
        self._scenes = scenes
        self._index = _build_index(scenes)
        logger.info("Loaded %d scenes from %s", len(scenes), self.catalog_path)

    def _snapshot(self) -> Tuple[Dict[str, SceneRecord], Index]:
        with self._write_lock:
            return self._scenes, self._index

    # -------------------------------------------------------------------------
    # Ingestion
    # -------------------------------------------------------------------------

    def ingest_scene(self, image_path: Union[str, Path], metadata: Optional[Dict[str, Any]] = None) -> str:
        """
        Register a scene file; idempotent for identical (path, metadata).

        Args:
            image_path: RGB PNG scene; `<stem>.geo.json` must sit next to it
            metadata: Scene fields (scene_id, data_types, country, province,
                season, acquisition_tag); missing keys are read from
                `<stem>.meta.json` when present

        Returns:
            The scene id
        """
        image_path = Path(image_path).resolve()
        geo_path = geo_sidecar_path(image_path)
        if not geo_path.exists():
            raise MissingSidecarError(f"No geotransform sidecar for {image_path} (expected {geo_path})")

        merged: Dict[str, Any] = {}
        meta_path = meta_sidecar_path(image_path)
        if meta_path.exists():
            try:
                sidecar = json.loads(meta_path.read_text())
            except (OSError, json.JSONDecodeError) as e:
                raise MalformedSidecarError(f"Cannot read scene metadata {meta_path}: {e}")
            if not isinstance(sidecar, dict):
                raise MalformedSidecarError(f"Scene metadata {meta_path} is not a JSON object")
            merged.update(sidecar)
        merged.update(metadata or {})
        if 'data_type' in merged and 'data_types' not in merged:
            merged['data_types'] = merged.pop('data_type')
        merged.setdefault('scene_id', image_path.stem)

        width, height = read_image_size(image_path)
        try:
            record = SceneRecord(
                scene_id=str(merged['scene_id']),
                data_types=_parse_data_types(merged['data_types']),
                country=str(merged.get('country', '')),
                province=str(merged.get('province', '')),
                season=Season.parse(merged['season']),
                acquisition_tag=str(merged.get('acquisition_tag', '')),
                geo=read_geo(geo_path),
                width=int(width),
                height=int(height),
                storage_path=str(image_path),
            )
        except (KeyError, InvalidQueryError) as e:
            raise ImageDbError(f"Incomplete metadata for {image_path}: {e}")

        with self._write_lock:
            existing = self._scenes.get(record.scene_id)
            if existing is not None:
                if existing == record:
                    logger.debug("Scene %s already ingested", record.scene_id)
                    return record.scene_id
                raise ConflictingSceneError(
                    f"Scene id {record.scene_id} already registered with different metadata"
                )
            if self.catalog_path:
                self.catalog_dir.mkdir(parents=True, exist_ok=True)
                with open(self.catalog_path, 'a') as f:
                    f.write(json.dumps(record.to_record(), sort_keys=True) + '\n')
            scenes = dict(self._scenes)
            scenes[record.scene_id] = record
            self._index = _build_index(scenes)
            self._scenes = scenes

        logger.info("Ingested scene %s (%s/%s, %s)", record.scene_id,
                    record.country, record.province, record.season.value)
        return record.scene_id

    # -------------------------------------------------------------------------
    # Introspection
    # -------------------------------------------------------------------------

    def scenes(self) -> List[SceneRecord]:
        scenes, _ = self._snapshot()
        return [scenes[k] for k in sorted(scenes)]

    def __len__(self) -> int:
        scenes, _ = self._snapshot()
        return len(scenes)

    def province_buckets(self, data_type: DataType) -> Dict[AdminRegion, int]:
        _, index = self._snapshot()
        return {region: len(ids) for region, ids in index.get(data_type, {}).items()}

    # -------------------------------------------------------------------------
    # Queries
    # -------------------------------------------------------------------------

    def resolve(self, spec: QuerySpec) -> List[SceneRecord]:
        """Scenes answering a query, via type -> province -> containment."""
        scenes, index = self._snapshot()
        buckets = index.get(spec.kind.data_type, {})
        if spec.admin_region is not None:
            scene_ids = buckets.get(tuple(spec.admin_region), ())
        else:
            scene_ids = [sid for region in sorted(buckets) for sid in buckets[region]]
        target = spec.target_box
        matches = [scenes[sid] for sid in scene_ids if scenes[sid].footprint.contains(target)]
        return _select_scenes(matches, spec)

    def resolve_full_scan(self, spec: QuerySpec) -> List[SceneRecord]:
        """Linear scan ignoring the index; same semantics as resolve()."""
        scenes, _ = self._snapshot()
        target = spec.target_box
        matches = [
            scene for scene in scenes.values()
            if spec.kind.data_type in scene.data_types
            and (spec.admin_region is None or scene.admin_region == tuple(spec.admin_region))
            and scene.footprint.contains(target)
        ]
        return _select_scenes(matches, spec)

    def query(self, spec: QuerySpec) -> List[CandidateImage]:
        """
        Crop auxiliary candidates for a query.

        An empty list is a normal outcome meaning no scene covers the request.
        """
        return self._crop_all(self.resolve(spec), spec)

    def query_full_scan(self, spec: QuerySpec) -> List[CandidateImage]:
        return self._crop_all(self.resolve_full_scan(spec), spec)

    def _crop_all(self, scenes: List[SceneRecord], spec: QuerySpec) -> List[CandidateImage]:
        if not scenes:
            logger.info("No %s candidates for %s", spec.kind.value, spec.geo_bbox.to_list())
            return []
        target = spec.target_box
        return [crop_by_geo(scene, target, spec.requested_patch_px, kind=spec.kind.value)
                for scene in scenes]


def _select_scenes(matches: List[SceneRecord], spec: QuerySpec) -> List[SceneRecord]:
    if spec.exclude_season is not None:
        matches = [s for s in matches if s.season is not spec.exclude_season]
    if spec.kind is QueryKind.TEMPORAL:
        # one scene per season: most recent acquisition_tag, scene_id breaks ties
        latest: Dict[Season, SceneRecord] = {}
        for scene in matches:
            current = latest.get(scene.season)
            if current is None or (scene.acquisition_tag, scene.scene_id) > (current.acquisition_tag, current.scene_id):
                latest[scene.season] = scene
        matches = list(latest.values())
    return sorted(matches, key=lambda s: (s.season.order, s.scene_id))
