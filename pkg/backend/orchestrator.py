"""
Segmentation Pipeline Orchestrator

Per patch:
1. Basic perception   base mask + confidence (from files, or the FSM)
2. Ambiguity          low-confidence regions with bbox area in range
3. Per region, in region-id order:
   reasoning query (prompt I) -> data query -> selection (prompt II)
   -> multi-image reasoning (prompt III) -> FSM on the auxiliary image
   -> register onto the patch grid -> add (yes) / subtract (no) -> clamp
4. Final mask + a trace with one record per ambiguous region

Per-region failures (adapter, parse, database, raster) skip that region and
leave the mask untouched. Dataset runs isolate failures per patch.
"""

import hashlib
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

try:
    from .adapters import STAGE_BASE, STAGE_SEGMENT, AdapterError, CallParams, FsmAdapter, RqmAdapter
    from .ambiguity import AmbiguityRegion, annotate_with_box, select_ambiguous_regions
    from .evaluation import (
        DEFAULT_GROUP, AggregateReport, PatchEvaluation, aggregate, confusion,
        write_report_csv, write_report_json,
    )
    from .imagedb import ImageDbError, QueryKind, QuerySpec, SceneDatabase, Season
    from .pipeline_config import PipelineConfig
    from .prompt_templates import (
        STAGE_DIRECTIVE, STAGE_SELECTION, STAGE_VERDICT, TemplateError,
        render_prompt_i, render_prompt_ii, render_prompt_iii, with_format_reminder,
    )
    from .raster_core import (
        BinaryMask, ConfidenceMap, DimensionMismatchError, GeoTransform, NoGeoOverlapError,
        RasterError, RgbImage, clamp_binary, mask_add, mask_subtract, register_mask,
    )
    from .raster_io import (
        RasterFormatError, binary_mask_to_png_bytes, read_binary_mask, read_confidence,
        read_geo, read_rgb, write_binary_mask,
    )
    from .response_parser import (
        ParseError, parse_directive, parse_error_record, parse_selection, parse_verdict,
    )
except ImportError:
    from adapters import STAGE_BASE, STAGE_SEGMENT, AdapterError, CallParams, FsmAdapter, RqmAdapter
    from ambiguity import AmbiguityRegion, annotate_with_box, select_ambiguous_regions
    from evaluation import (
        DEFAULT_GROUP, AggregateReport, PatchEvaluation, aggregate, confusion,
        write_report_csv, write_report_json,
    )
    from imagedb import ImageDbError, QueryKind, QuerySpec, SceneDatabase, Season
    from pipeline_config import PipelineConfig
    from prompt_templates import (
        STAGE_DIRECTIVE, STAGE_SELECTION, STAGE_VERDICT, TemplateError,
        render_prompt_i, render_prompt_ii, render_prompt_iii, with_format_reminder,
    )
    from raster_core import (
        BinaryMask, ConfidenceMap, DimensionMismatchError, GeoTransform, NoGeoOverlapError,
        RasterError, RgbImage, clamp_binary, mask_add, mask_subtract, register_mask,
    )
    from raster_io import (
        RasterFormatError, binary_mask_to_png_bytes, read_binary_mask, read_confidence,
        read_geo, read_rgb, write_binary_mask,
    )
    from response_parser import (
        ParseError, parse_directive, parse_error_record, parse_selection, parse_verdict,
    )

logger = logging.getLogger(__name__)

REGION_ERRORS = (AdapterError, ParseError, ImageDbError, RasterError, TemplateError)

OP_ADD = 'add'
OP_SUBTRACT = 'subtract'
OP_SKIP = 'skip'


# =============================================================================
# PATCHES
# =============================================================================

@dataclass(frozen=True)
class Patch:
    """An input image patch with its georeference and optional base segmentation."""
    patch_id: str
    image: RgbImage
    geo: GeoTransform
    country: str = ''
    province: str = ''
    season: Optional[Season] = None
    base_mask: Optional[BinaryMask] = None
    confidence: Optional[ConfidenceMap] = None

    def __post_init__(self):
        dims = (self.image.width, self.image.height)
        for name in ('base_mask', 'confidence'):
            raster = getattr(self, name)
            if raster is not None and (raster.width, raster.height) != dims:
                raise DimensionMismatchError(
                    f"Patch {self.patch_id}: {name} is {raster.width}x{raster.height}, "
                    f"image is {dims[0]}x{dims[1]}"
                )

    @property
    def admin_region(self) -> Optional[Tuple[str, str]]:
        if self.country and self.province:
            return (self.country, self.province)
        return None

    @property
    def group(self) -> str:
        return self.province or DEFAULT_GROUP

    def prompt_meta(self) -> Dict[str, Any]:
        return {
            'patch_id': self.patch_id,
            'width': self.image.width,
            'height': self.image.height,
            'country': self.country,
            'province': self.province,
            'season': self.season.value if self.season else None,
        }


def _is_patch_image(path: Path) -> bool:
    return path.suffix == '.png' and not path.name.endswith('.base.png')


def list_patch_ids(patch_dir: Union[str, Path]) -> List[str]:
    """Patch ids (`<id>.png` files) in sorted order."""
    return sorted(p.stem for p in Path(patch_dir).glob('*.png') if _is_patch_image(p))


def load_patch(patch_dir: Union[str, Path], patch_id: str) -> Patch:
    """
    Load `<id>.png` and its sidecars.

    Files:
        <id>.png, <id>.geo.json                    required
        <id>.meta.json                             optional {country, province, season}
        <id>.base.png, <id>.conf.f32 (+.conf.json) optional; both or the FSM is used
    """
    patch_dir = Path(patch_dir)
    image_path = patch_dir / f"{patch_id}.png"
    geo_path = patch_dir / f"{patch_id}.geo.json"
    if not geo_path.exists():
        raise RasterFormatError(f"Patch {patch_id} has no geotransform sidecar {geo_path.name}")

    meta: Dict[str, Any] = {}
    meta_path = patch_dir / f"{patch_id}.meta.json"
    if meta_path.exists():
        try:
            meta = json.loads(meta_path.read_text())
        except json.JSONDecodeError as e:
            raise RasterFormatError(f"Malformed metadata {meta_path}: {e}")

    base_path = patch_dir / f"{patch_id}.base.png"
    conf_path = patch_dir / f"{patch_id}.conf.f32"
    has_base = base_path.exists() and conf_path.exists()

    return Patch(
        patch_id=patch_id,
        image=read_rgb(image_path),
        geo=read_geo(geo_path),
        country=str(meta.get('country', '')),
        province=str(meta.get('province', '')),
        season=Season.parse(meta['season']) if meta.get('season') else None,
        base_mask=read_binary_mask(base_path) if has_base else None,
        confidence=read_confidence(conf_path) if has_base else None,
    )


# =============================================================================
# TRACE
# =============================================================================

@dataclass
class StageTimings:
    """Wall-clock seconds per pipeline stage."""
    basic_perception: float = 0.0
    reasoning: float = 0.0
    query: float = 0.0
    collaborative_reasoning: float = 0.0
    dynamic_correction: float = 0.0

    @contextmanager
    def measure(self, stage: str):
        start = time.perf_counter()
        try:
            yield
        finally:
            setattr(self, stage, getattr(self, stage) + time.perf_counter() - start)

    def __add__(self, other: "StageTimings") -> "StageTimings":
        return StageTimings(**{
            f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)
        })

    def to_dict(self) -> Dict[str, float]:
        return {f.name: round(getattr(self, f.name), 6) for f in fields(self)}


@dataclass
class RegionRecord:
    """Everything that happened to one ambiguous region."""
    region: AmbiguityRegion
    prompt_i: Optional[str] = None
    directive: Optional[Dict[str, Any]] = None
    directive_honored: Optional[bool] = None
    query: Optional[Dict[str, Any]] = None
    candidates: List[Dict[str, Any]] = field(default_factory=list)
    prompt_ii: Optional[str] = None
    selection: Optional[Dict[str, Any]] = None
    prompt_iii: Optional[str] = None
    verdict: Optional[Dict[str, Any]] = None
    ys_provenance: Optional[Dict[str, Any]] = None
    operation: str = OP_SKIP
    changed_pixels: int = 0
    replies: Dict[str, List[str]] = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)
    errors: List[Dict[str, Any]] = field(default_factory=list)
    stage: str = STAGE_DIRECTIVE

    def add_error(self, stage: str, error: Exception) -> None:
        if isinstance(error, ParseError):
            record = parse_error_record(error)
        else:
            record = {'error_type': type(error).__name__, 'message': str(error)}
        self.errors.append({'stage': stage, **record})

    def to_dict(self) -> Dict[str, Any]:
        return {
            'region': self.region.to_record(),
            'prompt_i': self.prompt_i,
            'directive': self.directive,
            'directive_honored': self.directive_honored,
            'query': self.query,
            'candidates': self.candidates,
            'prompt_ii': self.prompt_ii,
            'selection': self.selection,
            'prompt_iii': self.prompt_iii,
            'verdict': self.verdict,
            'ys_provenance': self.ys_provenance,
            'operation': self.operation,
            'changed_pixels': self.changed_pixels,
            'replies': self.replies,
            'notes': self.notes,
            'errors': self.errors,
        }


@dataclass
class CorrectionTrace:
    patch_id: str
    mode: str
    base_source: str
    regions: List[RegionRecord] = field(default_factory=list)
    timings: StageTimings = field(default_factory=StageTimings)
    adapters: Dict[str, Any] = field(default_factory=dict)
    base_foreground: int = 0
    final_foreground: int = 0
    final_mask_sha256: str = ''

    def to_dict(self, include_timings: bool = True) -> Dict[str, Any]:
        data = {
            'patch_id': self.patch_id,
            'mode': self.mode,
            'base_source': self.base_source,
            'adapters': self.adapters,
            'base_foreground': self.base_foreground,
            'final_foreground': self.final_foreground,
            'final_mask_sha256': self.final_mask_sha256,
            'regions': [r.to_dict() for r in self.regions],
        }
        if include_timings:
            data['timings'] = self.timings.to_dict()
        return data

    def canonical_json(self) -> str:
        """Deterministic serialisation without timings."""
        return json.dumps(self.to_dict(include_timings=False), sort_keys=True, indent=2)

    def corrected_boxes(self) -> List[List[int]]:
        return [r.region.bbox.to_list() for r in self.regions if r.operation != OP_SKIP]


@dataclass(frozen=True)
class SegmentationResult:
    patch_id: str
    base_mask: BinaryMask
    confidence: ConfidenceMap
    final_mask: BinaryMask
    trace: CorrectionTrace
    group: str = DEFAULT_GROUP


# =============================================================================
# PER-PATCH PIPELINE
# =============================================================================

def _basic_perception(patch: Patch, fsm: FsmAdapter) -> Tuple[BinaryMask, ConfidenceMap, str]:
    if patch.base_mask is not None and patch.confidence is not None:
        return patch.base_mask, patch.confidence, 'file'
    output = fsm.segment(patch.image, None, CallParams(patch.patch_id, STAGE_BASE))
    return output.mask, output.confidence, 'fsm'


def _ask(
    rqm: RqmAdapter,
    images: Sequence[RgbImage],
    prompt: str,
    params: CallParams,
    parse: Callable[[str], Any],
    record: RegionRecord,
    format_retry: bool,
) -> Any:
    """One model round; on a ParseError retry once with a format reminder."""
    replies = record.replies.setdefault(params.stage, [])
    text = rqm.complete(images, prompt, params)
    replies.append(text)
    try:
        return parse(text)
    except ParseError as e:
        if not format_retry:
            raise
        record.add_error(params.stage, e)
        logger.info("Patch %s region %s: unparseable %s reply, retrying with format reminder",
                    params.patch_id, params.region_id, params.stage)

    text = rqm.complete(images, with_format_reminder(prompt, params.stage), params)
    replies.append(text)
    return parse(text)


def _correct_region(
    patch: Patch,
    region: AmbiguityRegion,
    current: BinaryMask,
    config: PipelineConfig,
    rqm: RqmAdapter,
    fsm: FsmAdapter,
    db: SceneDatabase,
    record: RegionRecord,
    timings: StageTimings,
) -> BinaryMask:
    style = config.box_style

    def params(stage: str) -> CallParams:
        record.stage = stage
        return CallParams(patch.patch_id, stage, region.region_id)

    annotated = annotate_with_box(patch.image, region.bbox, style)

    # reasoning query
    record.prompt_i = render_prompt_i(region, patch.prompt_meta())
    with timings.measure('reasoning'):
        directive = _ask(
            rqm, [annotated], record.prompt_i, params(STAGE_DIRECTIVE),
            lambda text: parse_directive(text, region.region_id), record, config.format_retry,
        )
    record.directive = directive.to_record()
    kind: QueryKind = directive.kind
    record.directive_honored = config.mode.honors(kind)
    if not record.directive_honored:
        record.notes.append(f"{kind.value} directive not honored in mode {config.mode.value}")
        return current

    # data query
    geo_box = patch.geo.bbox_to_geo(region.bbox)
    spec = QuerySpec(
        kind=kind,
        geo_bbox=geo_box,
        exclude_season=patch.season if kind is QueryKind.TEMPORAL else None,
        enlarge_scale=config.enlarge_scale,
        requested_patch_px=config.patch_px,
        admin_region=patch.admin_region,
    )
    record.query = spec.to_dict()
    record.stage = 'query'
    with timings.measure('query'):
        candidates = db.query(spec)
    record.candidates = [c.to_metadata() for c in candidates]
    if not candidates:
        record.notes.append('no auxiliary candidates')
        return current

    # selection
    if len(candidates) == 1:
        chosen = candidates[0]
        record.selection = {'chosen_candidate_id': 1, 'skipped': True, 'reason': 'single candidate'}
    else:
        record.prompt_ii = render_prompt_ii(candidates, kind)
        offered = list(range(1, len(candidates) + 1))
        with timings.measure('reasoning'):
            selection = _ask(
                rqm, [annotated] + [c.pixels for c in candidates], record.prompt_ii,
                params(STAGE_SELECTION), lambda text: parse_selection(text, offered),
                record, config.format_retry,
            )
        chosen = candidates[selection.chosen_candidate_id - 1]
        record.selection = dict(selection.to_record(), skipped=False)

    aux_box = chosen.geo.geo_to_bbox(geo_box, chosen.pixels.width, chosen.pixels.height)
    if aux_box is None:
        raise NoGeoOverlapError(f"Region {region.region_id} falls outside candidate {chosen.candidate_id}")

    # multi-image reasoning
    record.prompt_iii = render_prompt_iii(kind)
    with timings.measure('collaborative_reasoning'):
        verdict = _ask(
            rqm, [annotated, annotate_with_box(chosen.pixels, aux_box, style)], record.prompt_iii,
            params(STAGE_VERDICT), parse_verdict, record, config.format_retry,
        )
    record.verdict = verdict.to_record()

    # dynamic correction
    with timings.measure('dynamic_correction'):
        aux = fsm.segment(chosen.pixels, aux_box, params(STAGE_SEGMENT))
        y_s = register_mask(
            aux.mask, chosen.geo, patch.geo, (patch.image.width, patch.image.height), region.bbox
        )
        if verdict.is_farmland:
            corrected = clamp_binary(mask_add(current, y_s))
            record.operation = OP_ADD
        else:
            corrected = clamp_binary(mask_subtract(current, y_s))
            record.operation = OP_SUBTRACT

    record.ys_provenance = {
        'candidate_id': chosen.candidate_id,
        'source_scene_id': chosen.source_scene_id,
        'fsm_box': aux_box.to_list(),
        'registered_pixels': int(y_s.values.sum()),
    }
    record.changed_pixels = int((corrected.values != current.values).sum())
    return corrected


def run_patch(
    patch: Patch,
    config: PipelineConfig,
    rqm: RqmAdapter,
    fsm: FsmAdapter,
    db: SceneDatabase,
) -> SegmentationResult:
    """
    Run the full correction pipeline on one patch.

    Args:
        patch: Georeferenced input patch
        config: Pipeline configuration (mode, ambiguity parameters, ...)
        rqm: Reasoning-query model adapter
        fsm: Segmentation model adapter
        db: Scene database for auxiliary imagery

    Returns:
        SegmentationResult with base mask, final mask and trace
    """
    timings = StageTimings()
    with timings.measure('basic_perception'):
        base_mask, confidence, base_source = _basic_perception(patch, fsm)
        regions = select_ambiguous_regions(confidence, config.ambiguity, patch.patch_id)

    trace = CorrectionTrace(
        patch_id=patch.patch_id,
        mode=config.mode.value,
        base_source=base_source,
        timings=timings,
        adapters={'rqm': rqm.info, 'fsm': fsm.info},
    )

    current = base_mask
    for region in regions:
        record = RegionRecord(region)
        trace.regions.append(record)
        if not config.mode.queries:
            record.notes.append('mode no-query: region not queried')
            continue
        try:
            current = _correct_region(patch, region, current, config, rqm, fsm, db, record, timings)
        except REGION_ERRORS as e:
            record.add_error(record.stage, e)
            record.operation = OP_SKIP
            logger.warning("Patch %s region %d skipped: %s: %s",
                           patch.patch_id, region.region_id, type(e).__name__, e)
            continue
        logger.info("Patch %s region %d: %s (%d px changed)",
                    patch.patch_id, region.region_id, record.operation, record.changed_pixels)

    trace.base_foreground = int(base_mask.values.sum())
    trace.final_foreground = int(current.values.sum())
    trace.final_mask_sha256 = hashlib.sha256(current.values.tobytes()).hexdigest()
    return SegmentationResult(
        patch_id=patch.patch_id,
        base_mask=base_mask,
        confidence=confidence,
        final_mask=current,
        trace=trace,
        group=patch.group,
    )


# =============================================================================
# DATASET RUNS
# =============================================================================

@dataclass(frozen=True)
class PatchOutcome:
    patch_id: str
    result: Optional[SegmentationResult] = None
    error: Optional[Dict[str, str]] = None

    @property
    def ok(self) -> bool:
        return self.result is not None


@dataclass(frozen=True)
class DatasetResult:
    outcomes: List[PatchOutcome]
    report: Optional[AggregateReport] = None

    @property
    def failures(self) -> List[PatchOutcome]:
        return [o for o in self.outcomes if not o.ok]

    def total_timings(self) -> StageTimings:
        total = StageTimings()
        for outcome in self.outcomes:
            if outcome.ok:
                total = total + outcome.result.trace.timings
        return total


def _run_one(
    patch_dir: Path,
    patch_id: str,
    config: PipelineConfig,
    rqm: RqmAdapter,
    fsm: FsmAdapter,
    db: SceneDatabase,
) -> PatchOutcome:
    try:
        patch = load_patch(patch_dir, patch_id)
        return PatchOutcome(patch_id, result=run_patch(patch, config, rqm, fsm, db))
    except Exception as e:
        logger.exception("Patch %s failed", patch_id)
        return PatchOutcome(patch_id, error={'error_type': type(e).__name__, 'message': str(e)})


def run_dataset(
    patch_dir: Union[str, Path],
    config: PipelineConfig,
    rqm: RqmAdapter,
    fsm: FsmAdapter,
    db: SceneDatabase,
    gt_dir: Optional[Union[str, Path]] = None,
    group_map: Optional[Mapping[str, str]] = None,
    workers: Optional[int] = None,
) -> DatasetResult:
    """
    Run every patch of a directory, optionally scoring against ground truth.

    Patches are processed by a bounded thread pool; outcomes keep sorted
    patch-id order whatever the worker count.
    """
    patch_dir = Path(patch_dir)
    patch_ids = list_patch_ids(patch_dir)
    workers = workers or config.workers
    logger.info("Running %d patches with %d worker(s), mode %s", len(patch_ids), workers, config.mode.value)

    if workers <= 1:
        outcomes = [_run_one(patch_dir, pid, config, rqm, fsm, db) for pid in patch_ids]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(lambda pid: _run_one(patch_dir, pid, config, rqm, fsm, db), patch_ids))

    report = None
    if gt_dir is not None:
        report = _score(outcomes, Path(gt_dir), group_map or {})
    return DatasetResult(outcomes=outcomes, report=report)


def _score(outcomes: List[PatchOutcome], gt_dir: Path, group_map: Mapping[str, str]) -> AggregateReport:
    evaluations = []
    missing = []
    for outcome in outcomes:
        gt_path = gt_dir / f"{outcome.patch_id}.png"
        if not outcome.ok or not gt_path.exists():
            missing.append(outcome.patch_id)
            continue
        result = outcome.result
        evaluations.append(PatchEvaluation(
            patch_id=outcome.patch_id,
            group=group_map.get(outcome.patch_id, result.group),
            counts=confusion(result.final_mask, read_binary_mask(gt_path)),
        ))
    return aggregate(evaluations, missing)


def write_outputs(dataset: DatasetResult, out_dir: Union[str, Path]) -> Dict[str, Any]:
    """
    Write out/masks/<id>.png, out/traces/<id>.json and out/report/metrics.{json,csv}.

    Returns:
        Per-patch output paths (relative to out_dir) and the report paths
    """
    out_dir = Path(out_dir)
    masks_dir, traces_dir, report_dir = out_dir / 'masks', out_dir / 'traces', out_dir / 'report'
    for directory in (masks_dir, traces_dir, report_dir):
        directory.mkdir(parents=True, exist_ok=True)

    patches: Dict[str, Any] = {}
    for outcome in dataset.outcomes:
        if not outcome.ok:
            patches[outcome.patch_id] = {'status': 'failed', 'error': outcome.error}
            continue
        result = outcome.result
        write_binary_mask(result.final_mask, masks_dir / f"{result.patch_id}.png")
        (traces_dir / f"{result.patch_id}.json").write_text(
            json.dumps(result.trace.to_dict(), sort_keys=True, indent=2)
        )
        patches[result.patch_id] = {
            'status': 'ok',
            'mask': f"masks/{result.patch_id}.png",
            'trace': f"traces/{result.patch_id}.json",
        }

    report_paths = {}
    if dataset.report is not None:
        write_report_json(dataset.report, report_dir / 'metrics.json')
        write_report_csv(dataset.report, report_dir / 'metrics.csv')
        report_paths = {'json': 'report/metrics.json', 'csv': 'report/metrics.csv'}
    return {'patches': patches, 'report': report_paths}


def mask_digest(mask: BinaryMask) -> str:
    """sha256 of the PNG encoding, for comparing runs file-for-file."""
    return hashlib.sha256(binary_mask_to_png_bytes(mask)).hexdigest()
