#!/usr/bin/env python
"""
FieldSight command line

Subcommands:
- ingest: add scene images (with .geo.json / .meta.json sidecars) to a catalog
- run:    run the correction pipeline over a patch directory
- eval:   score predicted masks against ground truth
- trace:  render a correction trace for humans
- serve:  start the scene query HTTP service

Exit codes: 0 success, 1 unexpected failure, 2 configuration error, 3 partial failure.
"""

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional, Sequence

from dotenv import load_dotenv

try:
    from .evaluation import (
        METRIC_NAMES, AggregateReport, evaluate_directories, load_group_map,
        write_report_csv, write_report_json,
    )
    from .imagedb import ImageDbError, SceneDatabase
    from .orchestrator import mask_digest, run_dataset, write_outputs
    from .pipeline_config import ConfigError, CorrectionMode, build_adapters, get_modes_for_cli, load_config
    from .prompt_templates import template_versions
    from .raster_core import RasterError
except ImportError:
    from evaluation import (
        METRIC_NAMES, AggregateReport, evaluate_directories, load_group_map,
        write_report_csv, write_report_json,
    )
    from imagedb import ImageDbError, SceneDatabase
    from orchestrator import mask_digest, run_dataset, write_outputs
    from pipeline_config import ConfigError, CorrectionMode, build_adapters, get_modes_for_cli, load_config
    from prompt_templates import template_versions
    from raster_core import RasterError

load_dotenv()

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_PARTIAL = 3

LOG_FORMAT = '%(asctime)s %(levelname)s %(name)s: %(message)s'


@dataclass
class RunManifest:
    """Everything needed to repeat a run."""
    config_path: Optional[str]
    config: Dict[str, Any]
    mode: str
    dataset_path: str
    catalog_path: str
    output_dir: str
    adapters: Dict[str, Any]
    timestamp: str
    gt_path: Optional[str] = None
    mock_script: Optional[str] = None
    mock_script_sha256: Optional[str] = None
    template_versions: Dict[str, str] = field(default_factory=dict)
    patches: Dict[str, Any] = field(default_factory=dict)
    report: Dict[str, str] = field(default_factory=dict)
    failures: int = 0
    timings: Dict[str, float] = field(default_factory=dict)

    def write(self, path: Path) -> None:
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True))


def _require_dir(path: Optional[str], what: str) -> Path:
    if not path or not Path(path).is_dir():
        raise ConfigError(f"{what} directory not found: {path}")
    return Path(path)


def _load_groups(path: Optional[str]) -> Optional[Dict[str, str]]:
    if not path:
        return None
    try:
        return load_group_map(path)
    except (OSError, ValueError) as e:
        raise ConfigError(f"Cannot read group map {path}: {e}")


def _print_metrics(report: AggregateReport) -> None:
    header = f"  {'group':20}" + ''.join(f"{name:>9}" for name in METRIC_NAMES) + f"{'patches':>9}"
    print(header)
    print("  " + "-" * (len(header) - 2))
    for row in report.rows():
        cells = ''.join(
            f"{row[name]:>9.4f}" if row[name] is not None else f"{'n/a':>9}" for name in METRIC_NAMES
        )
        print(f"  {row['group']:20}{cells}{row['patches']:>9}")


# =============================================================================
# SUBCOMMANDS
# =============================================================================

def cmd_ingest(args: argparse.Namespace) -> int:
    db = SceneDatabase(args.catalog)
    overrides = {k: v for k, v in (
        ('data_types', args.data_type),
        ('country', args.country),
        ('province', args.province),
        ('season', args.season),
    ) if v}

    failed = 0
    for scene_path in args.scenes:
        try:
            scene_id = db.ingest_scene(scene_path, overrides or None)
            print(f"✓ {scene_path} -> {scene_id}")
        except (ImageDbError, RasterError) as e:
            failed += 1
            print(f"✗ {scene_path}: {e}")

    print(f"\n{len(args.scenes) - failed}/{len(args.scenes)} scenes ingested; catalog holds {len(db)} scenes")
    if failed:
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    if args.mode:
        config = replace(config, mode=CorrectionMode.parse(args.mode))
    if args.workers:
        config = replace(config, workers=args.workers)

    patch_dir = _require_dir(args.patches, 'Patch')
    catalog_dir = _require_dir(args.catalog, 'Catalog')
    gt_dir = _require_dir(args.gt, 'Ground-truth') if args.gt else None
    if args.mock_script and not Path(args.mock_script).is_file():
        raise ConfigError(f"Mock script not found: {args.mock_script}")
    group_map = _load_groups(args.groups)
    out_dir = Path(args.out)

    rqm, fsm = build_adapters(config, args.mock_script)
    db = SceneDatabase(catalog_dir)

    dataset = run_dataset(patch_dir, config, rqm, fsm, db, gt_dir=gt_dir, group_map=group_map)
    outputs = write_outputs(dataset, out_dir)
    for outcome in dataset.outcomes:
        if outcome.ok:
            outputs['patches'][outcome.patch_id]['mask_sha256'] = mask_digest(outcome.result.final_mask)

    manifest = RunManifest(
        config_path=str(args.config) if args.config else None,
        config=config.to_dict(),
        mode=config.mode.value,
        dataset_path=str(patch_dir),
        catalog_path=str(catalog_dir),
        output_dir=str(out_dir),
        adapters={'rqm': rqm.info, 'fsm': fsm.info},
        timestamp=datetime.now(timezone.utc).isoformat(),
        gt_path=str(gt_dir) if gt_dir else None,
        mock_script=str(args.mock_script) if args.mock_script else None,
        mock_script_sha256=(
            hashlib.sha256(Path(args.mock_script).read_bytes()).hexdigest() if args.mock_script else None
        ),
        template_versions=template_versions(),
        patches=outputs['patches'],
        report=outputs['report'],
        failures=len(dataset.failures),
        timings=dataset.total_timings().to_dict(),
    )
    manifest.write(out_dir / 'manifest.json')

    total = len(dataset.outcomes)
    print(f"{'✓' if not dataset.failures else '✗'} {total - len(dataset.failures)}/{total} patches "
          f"processed (mode {config.mode.value}) -> {out_dir}")
    for outcome in dataset.failures:
        print(f"  ✗ {outcome.patch_id}: {outcome.error['error_type']}: {outcome.error['message']}")
    if dataset.report is not None:
        _print_metrics(dataset.report)
    return EXIT_PARTIAL if dataset.failures else EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    _require_dir(args.pred, 'Prediction')
    _require_dir(args.gt, 'Ground-truth')
    patch_dir = _require_dir(args.patches, 'Patch') if args.patches else None
    report = evaluate_directories(args.pred, args.gt, _load_groups(args.groups), patch_dir)

    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_report_json(report, out_dir / 'metrics.json')
        write_report_csv(report, out_dir / 'metrics.csv')
        print(f"✓ Report written to {out_dir}")

    _print_metrics(report)
    if report.missing:
        print(f"✗ {len(report.missing)} ground-truth masks have no prediction: {', '.join(report.missing)}")
        return EXIT_PARTIAL
    return EXIT_OK


def render_trace(data: Dict[str, Any]) -> str:
    """Human-readable rendering of a trace JSON document."""
    lines = [
        f"Patch {data['patch_id']}  mode={data['mode']}  base={data['base_source']}",
        f"Foreground pixels: {data['base_foreground']} -> {data['final_foreground']}",
        f"Regions: {len(data['regions'])}",
    ]
    for record in data['regions']:
        region = record['region']
        lines.append("")
        lines.append(f"[region {region['region_id']}] bbox={region['bbox']} "
                     f"area={region['bbox_area']} pixels={region['pixel_count']}")
        if record['directive']:
            honored = 'honored' if record['directive_honored'] else 'not honored'
            lines.append(f"  directive: {record['directive']['kind']} ({honored})")
            if record['directive']['rationale_text']:
                lines.append(f"    rationale: {record['directive']['rationale_text']}")
        if record['query'] is not None:
            lines.append(f"  query: {record['query']['kind']} -> {len(record['candidates'])} candidate(s)")
            for i, candidate in enumerate(record['candidates'], start=1):
                lines.append(f"    {i}. {candidate['candidate_id']} ({candidate['season']})")
        if record['selection']:
            suffix = ' [skipped: single candidate]' if record['selection'].get('skipped') else ''
            lines.append(f"  selected: {record['selection']['chosen_candidate_id']}{suffix}")
        if record['verdict']:
            lines.append(f"  verdict: {record['verdict']['value']}")
            if record['verdict']['rationale_text']:
                lines.append(f"    rationale: {record['verdict']['rationale_text']}")
        lines.append(f"  operation: {record['operation']} ({record['changed_pixels']} px changed)")
        for note in record['notes']:
            lines.append(f"  note: {note}")
        for error in record['errors']:
            lines.append(f"  error [{error['stage']}]: {error['error_type']}: {error['message']}")
    if 'timings' in data:
        lines.append("")
        lines.append("Timings (s):")
        for stage, seconds in data['timings'].items():
            lines.append(f"  {stage:25} {seconds:.4f}")
    return '\n'.join(lines)


def cmd_trace(args: argparse.Namespace) -> int:
    path = Path(args.result)
    if path.is_dir():
        if not args.patch:
            raise ConfigError("--patch is required when RESULT is an output directory")
        path = path / 'traces' / f"{args.patch}.json"
    try:
        data = json.loads(path.read_text())
    except OSError as e:
        raise ConfigError(f"Cannot read trace {path}: {e}")
    print(render_trace(data))
    if args.prompts:
        for record in data['regions']:
            for key in ('prompt_i', 'prompt_ii', 'prompt_iii'):
                if record.get(key):
                    print(f"\n--- region {record['region']['region_id']} {key} ---\n{record[key]}")
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    try:
        from .query_service import create_app
    except ImportError:
        from query_service import create_app
    db = SceneDatabase(_require_dir(args.catalog, 'Catalog'))
    create_app(db).run(host=args.host, port=args.port)
    return EXIT_OK


# =============================================================================
# ENTRY POINT
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='FieldSight dynamic farmland segmentation')
    parser.add_argument('--log-level', default=os.getenv('FIELDSIGHT_LOG_LEVEL', 'INFO'),
                        help='Logging level (default: INFO or $FIELDSIGHT_LOG_LEVEL)')
    sub = parser.add_subparsers(dest='command', required=True)

    ingest = sub.add_parser('ingest', help='Add scenes to a catalog')
    ingest.add_argument('--catalog', required=True, help='Catalog directory (created if missing)')
    ingest.add_argument('scenes', nargs='+', help='Scene PNG files with .geo.json sidecars')
    ingest.add_argument('--data-type', choices=['multi-temporal', 'enlarge'], action='append',
                        help='Data type(s) of the scenes; overrides sidecar metadata')
    ingest.add_argument('--country', help='Country; overrides sidecar metadata')
    ingest.add_argument('--province', help='Province; overrides sidecar metadata')
    ingest.add_argument('--season', choices=['spring', 'summer', 'autumn', 'winter'],
                        help='Season; overrides sidecar metadata')
    ingest.set_defaults(func=cmd_ingest)

    run = sub.add_parser('run', help='Run the pipeline over a patch directory')
    run.add_argument('--config', help='Pipeline config JSON (defaults if omitted)')
    run.add_argument('--patches', required=True, help='Patch directory')
    run.add_argument('--catalog', required=True, help='Scene catalog directory')
    run.add_argument('--out', required=True, help='Output directory')
    run.add_argument('--mode', choices=get_modes_for_cli(), help='Correction mode (ablation)')
    run.add_argument('--mock-script', help='Replay a scripted adapter JSON instead of calling services')
    run.add_argument('--gt', help='Ground-truth mask directory for scoring')
    run.add_argument('--groups', help='JSON {patch_id: group} for per-group metrics')
    run.add_argument('--workers', type=int, help='Parallel patch workers')
    run.set_defaults(func=cmd_run)

    evaluate = sub.add_parser('eval', help='Score predicted masks')
    evaluate.add_argument('--pred', required=True, help='Predicted mask directory')
    evaluate.add_argument('--gt', required=True, help='Ground-truth mask directory')
    evaluate.add_argument('--groups', help='JSON {patch_id: group}')
    evaluate.add_argument('--patches', help='Patch directory whose .meta.json provinces group the report')
    evaluate.add_argument('--out', help='Directory for metrics.json / metrics.csv')
    evaluate.set_defaults(func=cmd_eval)

    trace = sub.add_parser('trace', help='Render a correction trace')
    trace.add_argument('result', help='Trace JSON file, or a run output directory with --patch')
    trace.add_argument('--patch', help='Patch id when RESULT is an output directory')
    trace.add_argument('--prompts', action='store_true', help='Also print the rendered prompts')
    trace.set_defaults(func=cmd_trace)

    serve = sub.add_parser('serve', help='Start the scene query service')
    serve.add_argument('--catalog', required=True, help='Scene catalog directory')
    serve.add_argument('--host', default=os.getenv('HOST', '0.0.0.0'))
    serve.add_argument('--port', type=int, default=int(os.getenv('PORT', '5000')))
    serve.set_defaults(func=cmd_serve)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO), format=LOG_FORMAT)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"✗ Configuration error: {e}")
        return EXIT_CONFIG
    except Exception:
        logger.exception("Command %s failed", args.command)
        return EXIT_UNEXPECTED


if __name__ == '__main__':
    sys.exit(main())
