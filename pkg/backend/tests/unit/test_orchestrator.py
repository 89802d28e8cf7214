"""
Unit tests for the per-patch pipeline and dataset runs.

Tests cover:
- Base segmentation from files or from the segmentation model
- Modes: no-query and directives the mode does not honor
- Format-reminder retry, then skip on a second bad reply
- Regions skipped for missing candidates or adapter failures
- Patch loading, dataset failure isolation and output files
"""

import pytest
import sys
import os
import json

import numpy as np

# Add backend to path
backend_dir = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
if backend_dir not in sys.path:
    sys.path.insert(0, backend_dir)

from adapters import scripted_adapters
from imagedb import SceneDatabase, Season
from orchestrator import (
    OP_ADD, OP_SKIP, OP_SUBTRACT, Patch, list_patch_ids, load_patch, mask_digest,
    run_dataset, run_patch, write_outputs,
)
from pipeline_config import CorrectionMode, PipelineConfig
from raster_core import DimensionMismatchError, GeoTransform
from raster_io import RasterFormatError, read_binary_mask, write_binary_mask
from tests.fixtures.factories import (
    PATCH_GEO, PATCH_META, boxes_mask, confidence_for, textured_rgb, write_patch,
)

BASE_BOXES = [[0, 0, 64, 128]]
LOW_BOXES = [[16, 16, 96, 96]]
BASE_ENTRY = {'foreground_boxes': BASE_BOXES, 'low_confidence_boxes': LOW_BOXES}

ENLARGE_REPLY = "Parcel edges run off the frame.\nDIRECTIVE: <reg-2>"
TEMPORAL_REPLY = "Bare soil could be fallow.\nDIRECTIVE: <reg-1>"


def make_patch(patch_id='p001', **kwargs) -> Patch:
    kwargs.setdefault('country', PATCH_META['country'])
    kwargs.setdefault('province', PATCH_META['province'])
    kwargs.setdefault('season', Season.SUMMER)
    return Patch(patch_id=patch_id, image=textured_rgb(128, 128, 1), geo=PATCH_GEO, **kwargs)


def script(rqm=None, segment=None, base=BASE_ENTRY):
    """Scripted adapters for region 1 of any patch."""
    data = {'name': 'unit', 'rqm': rqm or {}, 'fsm': {'base': {'*': [base]}}}
    if segment is not None:
        data['fsm']['segment'] = {'1': [segment]}
    return scripted_adapters(data)


def base_mask():
    return boxes_mask(BASE_BOXES, 128, 128)


class TestBasicPerception:
    """Where the base mask and confidence come from."""

    def test_from_segmentation_model(self, scene_db, small_config):
        rqm, fsm = script(base={'foreground_boxes': BASE_BOXES})
        result = run_patch(make_patch(), small_config, rqm, fsm, scene_db)
        assert result.trace.base_source == 'fsm'
        assert np.array_equal(result.base_mask.values, base_mask().values)

    def test_from_files(self, scene_db, small_config):
        mask = base_mask()
        patch = make_patch(base_mask=mask, confidence=confidence_for(mask))
        rqm, fsm = scripted_adapters({'name': 'empty'})
        result = run_patch(patch, small_config, rqm, fsm, scene_db)
        assert result.trace.base_source == 'file'

    def test_no_ambiguous_regions(self, scene_db, small_config):
        rqm, fsm = script(base={'foreground_boxes': BASE_BOXES})
        result = run_patch(make_patch(), small_config, rqm, fsm, scene_db)
        assert result.trace.regions == []
        assert np.array_equal(result.final_mask.values, result.base_mask.values)
        assert result.trace.final_foreground == result.trace.base_foreground == 64 * 128

    def test_mismatched_base_rejected(self):
        mask = boxes_mask(BASE_BOXES, 64, 128)
        with pytest.raises(DimensionMismatchError):
            make_patch(base_mask=mask, confidence=confidence_for(mask))


class TestRegionCorrection:
    """One ambiguous region [16, 16, 96, 96] over base foreground [0, 0, 64, 128]."""

    def test_enlarge_yes_adds(self, scene_db, small_config):
        rqm, fsm = script(
            rqm={'directive': {'1': [ENLARGE_REPLY]}, 'verdict': {'1': ['Parcels continue.\nANSWER: yes']}},
            segment={'constant': 1},
        )
        result = run_patch(make_patch(), small_config, rqm, fsm, scene_db)
        record = result.trace.regions[0]
        assert record.region.bbox.to_list() == [16, 16, 96, 96]
        assert record.directive['kind'] == 'enlarge'
        assert record.selection == {'chosen_candidate_id': 1, 'skipped': True, 'reason': 'single candidate'}
        assert record.prompt_ii is None
        assert record.operation == OP_ADD
        assert record.changed_pixels == 32 * 80
        assert record.ys_provenance['source_scene_id'] == 'enl-wide'

        expected = base_mask().values.copy()
        expected[16:96, 16:96] = 1
        assert np.array_equal(result.final_mask.values, expected)

    def test_temporal_no_subtracts(self, scene_db, small_config):
        rqm, fsm = script(
            rqm={
                'directive': {'1': [TEMPORAL_REPLY]},
                'selection': {'1': ['Winter snow hides nothing useful; autumn shows stubble.\nSELECTED: 2']},
                'verdict': {'1': ['A paved yard in every season.\nANSWER: no']},
            },
            segment={'fill_box_prompt': True},
        )
        result = run_patch(make_patch(), small_config, rqm, fsm, scene_db)
        record = result.trace.regions[0]
        assert [c['source_scene_id'] for c in record.candidates] == ['tmp-spring', 'tmp-autumn', 'tmp-winter']
        assert record.selection['chosen_candidate_id'] == 2
        assert record.selection['skipped'] is False
        assert record.ys_provenance['source_scene_id'] == 'tmp-autumn'
        assert record.operation == OP_SUBTRACT
        assert record.changed_pixels == 48 * 80

        expected = base_mask().values.copy()
        expected[16:96, 16:96] = 0
        assert np.array_equal(result.final_mask.values, expected)

    def test_changes_stay_inside_region(self, scene_db, small_config):
        rqm, fsm = script(
            rqm={'directive': {'1': [ENLARGE_REPLY]}, 'verdict': {'1': ['ANSWER: yes']}},
            segment={'constant': 1},
        )
        result = run_patch(make_patch(), small_config, rqm, fsm, scene_db)
        changed = result.final_mask.values != result.base_mask.values
        outside = changed.copy()
        outside[16:96, 16:96] = False
        assert changed.any()
        assert not outside.any()


class TestModes:
    """Modes gate querying."""

    def test_no_query_keeps_base(self, scene_db):
        rqm, fsm = script()
        config = PipelineConfig(patch_px=96, mode=CorrectionMode.NO_QUERY)
        result = run_patch(make_patch(), config, rqm, fsm, scene_db)
        record = result.trace.regions[0]
        assert record.prompt_i is None
        assert record.operation == OP_SKIP
        assert 'mode no-query: region not queried' in record.notes
        assert np.array_equal(result.final_mask.values, result.base_mask.values)

    def test_directive_not_honored(self, scene_db):
        rqm, fsm = script(rqm={'directive': {'1': [ENLARGE_REPLY]}})
        config = PipelineConfig(patch_px=96, mode=CorrectionMode.TEMPORAL_ONLY)
        result = run_patch(make_patch(), config, rqm, fsm, scene_db)
        record = result.trace.regions[0]
        assert record.directive_honored is False
        assert record.query is None
        assert record.operation == OP_SKIP
        assert np.array_equal(result.final_mask.values, result.base_mask.values)
        assert result.trace.mode == 'temporal-only'


class TestFailures:
    """Per-region failures skip the region and keep the mask."""

    def test_format_retry_recovers(self, scene_db, small_config):
        rqm, fsm = script(
            rqm={'directive': {'1': ['I think more data would help.', ENLARGE_REPLY]},
                 'verdict': {'1': ['ANSWER: yes']}},
            segment={'constant': 1},
        )
        result = run_patch(make_patch(), small_config, rqm, fsm, scene_db)
        record = result.trace.regions[0]
        assert record.operation == OP_ADD
        assert len(record.replies['directive']) == 2
        assert [e['error_type'] for e in record.errors] == ['NoDirectiveError']
        assert record.errors[0]['raw_text'] == 'I think more data would help.'

    def test_second_bad_reply_skips(self, scene_db, small_config):
        rqm, fsm = script(rqm={'directive': {'1': ['Unsure.', 'Still unsure.']}})
        result = run_patch(make_patch(), small_config, rqm, fsm, scene_db)
        record = result.trace.regions[0]
        assert record.operation == OP_SKIP
        assert [e['stage'] for e in record.errors] == ['directive', 'directive']
        assert np.array_equal(result.final_mask.values, result.base_mask.values)

    def test_no_retry_when_disabled(self, scene_db):
        rqm, fsm = script(rqm={'directive': {'1': ['Unsure.']}})
        config = PipelineConfig(patch_px=96, format_retry=False)
        result = run_patch(make_patch(), config, rqm, fsm, scene_db)
        record = result.trace.regions[0]
        assert record.operation == OP_SKIP
        assert len(record.replies['directive']) == 1

    def test_no_candidates(self, small_config):
        rqm, fsm = script(rqm={'directive': {'1': [ENLARGE_REPLY]}})
        result = run_patch(make_patch(), small_config, rqm, fsm, SceneDatabase())
        record = result.trace.regions[0]
        assert record.candidates == []
        assert 'no auxiliary candidates' in record.notes
        assert record.operation == OP_SKIP
        assert record.errors == []

    def test_adapter_failure(self, scene_db, small_config):
        # verdict replies missing: the scripted model runs dry at that stage
        rqm, fsm = script(rqm={'directive': {'1': [ENLARGE_REPLY]}})
        result = run_patch(make_patch(), small_config, rqm, fsm, scene_db)
        record = result.trace.regions[0]
        assert record.operation == OP_SKIP
        assert record.errors[-1]['stage'] == 'verdict'
        assert record.errors[-1]['error_type'] == 'ScriptExhaustedError'
        assert np.array_equal(result.final_mask.values, result.base_mask.values)


class TestTrace:
    def test_canonical_json_has_no_timings(self, scene_db, small_config):
        rqm, fsm = script(rqm={'directive': {'1': [ENLARGE_REPLY]}, 'verdict': {'1': ['ANSWER: yes']}},
                          segment={'constant': 1})
        trace = run_patch(make_patch(), small_config, rqm, fsm, scene_db).trace
        data = json.loads(trace.canonical_json())
        assert 'timings' not in data
        assert data['adapters']['rqm']['kind'] == 'scripted'
        assert trace.corrected_boxes() == [[16, 16, 96, 96]]
        assert set(trace.timings.to_dict()) == {
            'basic_perception', 'reasoning', 'query', 'collaborative_reasoning', 'dynamic_correction',
        }


class TestPatchFiles:
    """Patch directory layout."""

    def test_list_ignores_base_masks(self, tmp_path):
        mask = base_mask()
        write_patch(tmp_path, 'b', base_mask=mask, confidence=confidence_for(mask))
        write_patch(tmp_path, 'a')
        assert list_patch_ids(tmp_path) == ['a', 'b']

    def test_load_with_base(self, tmp_path):
        mask = base_mask()
        write_patch(tmp_path, 'p', base_mask=mask, confidence=confidence_for(mask, LOW_BOXES))
        patch = load_patch(tmp_path, 'p')
        assert patch.season is Season.SUMMER
        assert patch.admin_region == ('China', 'Heilongjiang')
        assert patch.group == 'Heilongjiang'
        assert np.array_equal(patch.base_mask.values, mask.values)
        assert patch.confidence.values[20, 20] == 0.0

    def test_base_mask_without_confidence_ignored(self, tmp_path):
        write_patch(tmp_path, 'p', base_mask=base_mask())
        assert load_patch(tmp_path, 'p').base_mask is None

    def test_without_meta(self, tmp_path):
        write_patch(tmp_path, 'p', meta=None)
        patch = load_patch(tmp_path, 'p')
        assert patch.season is None
        assert patch.admin_region is None
        assert patch.group == 'all'

    def test_missing_geo(self, tmp_path):
        write_patch(tmp_path, 'p')
        (tmp_path / 'p.geo.json').unlink()
        with pytest.raises(RasterFormatError):
            load_patch(tmp_path, 'p')


class TestDataset:
    """Directory runs, scoring and outputs."""

    def world(self, tmp_path):
        patches = tmp_path / 'patches'
        gt = tmp_path / 'gt'
        gt.mkdir()
        for patch_id in ('p1', 'p2'):
            write_patch(patches, patch_id)
            write_binary_mask(base_mask(), gt / f"{patch_id}.png")
        write_patch(patches, 'p3')
        (patches / 'p3.meta.json').write_text('{broken')
        return patches, gt

    def test_failures_are_isolated(self, tmp_path, scene_db):
        patches, gt = self.world(tmp_path)
        rqm, fsm = script(base={'foreground_boxes': BASE_BOXES})
        config = PipelineConfig(patch_px=96, mode=CorrectionMode.NO_QUERY)
        dataset = run_dataset(patches, config, rqm, fsm, scene_db, gt_dir=gt)

        assert [o.patch_id for o in dataset.outcomes] == ['p1', 'p2', 'p3']
        assert [o.patch_id for o in dataset.failures] == ['p3']
        assert dataset.failures[0].error['error_type'] == 'RasterFormatError'
        assert dataset.report.overall.patches == 2
        assert dataset.report.overall.metrics['F1'] == 1.0
        assert dataset.report.missing == ('p3',)
        assert set(dataset.report.groups) == {'Heilongjiang'}

    def test_parallel_matches_serial(self, tmp_path, scene_db):
        patches, _ = self.world(tmp_path)
        config = PipelineConfig(patch_px=96)
        rqm_data = {'directive': {'1': [ENLARGE_REPLY]}, 'verdict': {'1': ['ANSWER: yes']}}

        digests = []
        for workers in (1, 3):
            rqm, fsm = script(rqm=rqm_data, segment={'constant': 1})
            dataset = run_dataset(patches, config, rqm, fsm, scene_db, workers=workers)
            digests.append([
                (o.patch_id, mask_digest(o.result.final_mask), o.result.trace.canonical_json())
                for o in dataset.outcomes if o.ok
            ])
        assert digests[0] == digests[1]
        assert len(digests[0]) == 2

    def test_write_outputs(self, tmp_path, scene_db):
        patches, gt = self.world(tmp_path)
        rqm, fsm = script(base={'foreground_boxes': BASE_BOXES})
        config = PipelineConfig(mode=CorrectionMode.NO_QUERY)
        dataset = run_dataset(patches, config, rqm, fsm, scene_db, gt_dir=gt)

        out = tmp_path / 'out'
        written = write_outputs(dataset, out)
        assert written['patches']['p1'] == {'status': 'ok', 'mask': 'masks/p1.png', 'trace': 'traces/p1.json'}
        assert written['patches']['p3']['status'] == 'failed'
        assert written['report'] == {'json': 'report/metrics.json', 'csv': 'report/metrics.csv'}
        assert np.array_equal(read_binary_mask(out / 'masks' / 'p1.png').values, base_mask().values)
        assert json.loads((out / 'traces' / 'p2.json').read_text())['patch_id'] == 'p2'
        assert (out / 'report' / 'metrics.csv').exists()
