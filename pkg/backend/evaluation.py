"""
Segmentation Evaluation

Two-class (farmland / background) pixel metrics:
- mAcc:   mean over both classes of per-class recall
- mIoU:   mean over both classes of per-class IoU
- F1:     farmland F1 = 2tp / (2tp + fp + fn)
- Recall: farmland recall tp / (tp + fn)

A metric whose denominator is zero is undefined and reported as None (JSON null),
never NaN. Class means average only the defined class values.

Aggregation is micro: confusion counts are summed per group, then metrics are
computed from the sums.
"""

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np

try:
    from .raster_core import BinaryMask, DimensionMismatchError
    from .raster_io import meta_sidecar_path, read_binary_mask
except ImportError:
    from raster_core import BinaryMask, DimensionMismatchError
    from raster_io import meta_sidecar_path, read_binary_mask

logger = logging.getLogger(__name__)

DEFAULT_GROUP = 'all'
METRIC_NAMES = ('mAcc', 'mIoU', 'F1', 'Recall')
CSV_COLUMNS = ('group', 'patches') + METRIC_NAMES + ('tp', 'fp', 'fn', 'tn')


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        for name in ('tp', 'fp', 'fn', 'tn'):
            value = int(getattr(self, name))
            if value < 0:
                raise ValueError(f"{name} must be non-negative, got {value}")
            object.__setattr__(self, name, value)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )

    def to_dict(self) -> Dict[str, int]:
        return {'tp': self.tp, 'fp': self.fp, 'fn': self.fn, 'tn': self.tn}


def confusion(pred: BinaryMask, gt: BinaryMask) -> ConfusionCounts:
    """Exact pixel counts; farmland (1) is the positive class."""
    if pred.values.shape != gt.values.shape:
        raise DimensionMismatchError(
            f"Prediction is {pred.width}x{pred.height}, ground truth is {gt.width}x{gt.height}"
        )
    # bin = 2 * gt + pred -> [tn, fp, fn, tp]
    bins = np.bincount(
        (2 * gt.values.astype(np.int64) + pred.values.astype(np.int64)).ravel(), minlength=4
    )
    tn, fp, fn, tp = (int(v) for v in bins[:4])
    return ConfusionCounts(tp=tp, fp=fp, fn=fn, tn=tn)


def _ratio(numerator: int, denominator: int) -> Optional[float]:
    return numerator / denominator if denominator else None


def _mean_defined(values: Iterable[Optional[float]]) -> Optional[float]:
    defined = [v for v in values if v is not None]
    return sum(defined) / len(defined) if defined else None


def metrics(c: ConfusionCounts) -> Dict[str, Optional[float]]:
    """
    Compute mAcc, mIoU, F1 and Recall.

    Args:
        c: Confusion counts

    Returns:
        Dictionary keyed by METRIC_NAMES; undefined values are None
    """
    farmland_recall = _ratio(c.tp, c.tp + c.fn)
    background_recall = _ratio(c.tn, c.tn + c.fp)
    farmland_iou = _ratio(c.tp, c.tp + c.fp + c.fn)
    background_iou = _ratio(c.tn, c.tn + c.fn + c.fp)
    return {
        'mAcc': _mean_defined((farmland_recall, background_recall)),
        'mIoU': _mean_defined((farmland_iou, background_iou)),
        'F1': _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        'Recall': farmland_recall,
    }


# =============================================================================
# AGGREGATION
# =============================================================================

@dataclass(frozen=True)
class PatchEvaluation:
    patch_id: str
    group: str
    counts: ConfusionCounts

    @property
    def metrics(self) -> Dict[str, Optional[float]]:
        return metrics(self.counts)


@dataclass(frozen=True)
class GroupSummary:
    group: str
    patches: int
    counts: ConfusionCounts

    @property
    def metrics(self) -> Dict[str, Optional[float]]:
        return metrics(self.counts)

    def to_row(self) -> Dict[str, Any]:
        return {'group': self.group, 'patches': self.patches, **self.metrics, **self.counts.to_dict()}


@dataclass(frozen=True)
class AggregateReport:
    groups: Dict[str, GroupSummary]
    overall: GroupSummary
    missing: Tuple[str, ...] = field(default=())

    def rows(self) -> List[Dict[str, Any]]:
        """Group rows in sorted group order, then the overall row."""
        return [self.groups[g].to_row() for g in sorted(self.groups)] + [self.overall.to_row()]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'groups': {g: self.groups[g].to_row() for g in sorted(self.groups)},
            'overall': self.overall.to_row(),
            'missing': list(self.missing),
        }


def aggregate(per_patch: Iterable[PatchEvaluation], missing: Iterable[str] = ()) -> AggregateReport:
    """Micro-aggregate patch counts per group and overall."""
    totals: Dict[str, ConfusionCounts] = {}
    patches: Dict[str, int] = {}
    overall = ConfusionCounts()
    count = 0
    for evaluation in per_patch:
        totals[evaluation.group] = totals.get(evaluation.group, ConfusionCounts()) + evaluation.counts
        patches[evaluation.group] = patches.get(evaluation.group, 0) + 1
        overall = overall + evaluation.counts
        count += 1

    return AggregateReport(
        groups={g: GroupSummary(g, patches[g], totals[g]) for g in totals},
        overall=GroupSummary('overall', count, overall),
        missing=tuple(sorted(missing)),
    )


# =============================================================================
# FILES
# =============================================================================

def _format_cell(value: Any) -> Any:
    if value is None:
        return ''
    if isinstance(value, float):
        return f"{value:.6f}"
    return value


def write_report_csv(report: AggregateReport, path: Union[str, Path]) -> None:
    with open(path, 'w', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for row in report.rows():
            writer.writerow({k: _format_cell(row[k]) for k in CSV_COLUMNS})


def write_report_json(report: AggregateReport, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))


def load_group_map(path: Optional[Union[str, Path]]) -> Dict[str, str]:
    """JSON object {patch_id: group}; no path gives an empty map."""
    if path is None:
        return {}
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ValueError(f"Group map {path} must be a JSON object")
    return {str(k): str(v) for k, v in data.items()}


def group_from_meta(meta_path: Path) -> str:
    """Province of a patch `.meta.json` sidecar, or the default group."""
    if not meta_path.exists():
        return DEFAULT_GROUP
    try:
        meta = json.loads(meta_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        logger.warning("Ignoring unreadable patch metadata %s: %s", meta_path, e)
        return DEFAULT_GROUP
    if not isinstance(meta, dict):
        return DEFAULT_GROUP
    return str(meta.get('province') or DEFAULT_GROUP)


def evaluate_directories(
    pred_dir: Union[str, Path],
    gt_dir: Union[str, Path],
    group_map: Optional[Mapping[str, str]] = None,
    patch_dir: Optional[Union[str, Path]] = None,
) -> AggregateReport:
    """
    Evaluate every `<id>.png` ground-truth mask against `<pred_dir>/<id>.png`.

    A patch's group comes from group_map, else from the province in its
    `<id>.meta.json` (looked up in patch_dir, or next to the ground truth).
    Ground truth without a prediction is listed in the report's `missing`.
    """
    group_map = group_map or {}
    pred_dir, gt_dir = Path(pred_dir), Path(gt_dir)
    meta_dir = Path(patch_dir) if patch_dir is not None else gt_dir
    evaluations = []
    missing = []
    for gt_path in sorted(gt_dir.glob('*.png')):
        patch_id = gt_path.stem
        pred_path = pred_dir / gt_path.name
        if not pred_path.exists():
            logger.warning("No prediction for %s", patch_id)
            missing.append(patch_id)
            continue
        evaluations.append(PatchEvaluation(
            patch_id=patch_id,
            group=group_map.get(patch_id) or group_from_meta(meta_sidecar_path(meta_dir / gt_path.name)),
            counts=confusion(read_binary_mask(pred_path), read_binary_mask(gt_path)),
        ))
    return aggregate(evaluations, missing)
