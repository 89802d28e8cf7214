"""
Unit tests for the command line.

Tests cover:
- ingest into a catalog, including partial failure
- run with a mock script: outputs, manifest and exit codes
- eval on mask directories
- trace rendering
- serve wiring (Flask.run patched)
"""

import pytest
import sys
import os
import json

import numpy as np
from freezegun import freeze_time

# Add backend to path
backend_dir = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
if backend_dir not in sys.path:
    sys.path.insert(0, backend_dir)

from cli import EXIT_CONFIG, EXIT_OK, EXIT_PARTIAL, main, render_trace
from imagedb import SceneDatabase
from prompt_templates import template_versions
from raster_core import BinaryMask
from raster_io import read_binary_mask, write_binary_mask
from tests.fixtures.factories import (
    FIXTURES_DIR, GOLDEN_SCENES, PATCH_META, boxes_mask, write_patch, write_scene,
)

ENLARGE_SCRIPT = FIXTURES_DIR / 'enlarge-workflow.json'


@pytest.fixture(autouse=True)
def clean_env(monkeypatch):
    for key in list(os.environ):
        if key.startswith('FIELDSIGHT_'):
            monkeypatch.delenv(key)


@pytest.fixture
def run_args(tmp_path, patch_dir, catalog_dir):
    out = tmp_path / 'out'
    return out, ['run', '--patches', str(patch_dir), '--catalog', str(catalog_dir), '--out', str(out)]


class TestIngest:
    def test_ingest_scenes(self, tmp_path, capsys):
        scene = GOLDEN_SCENES[0]
        path = write_scene(tmp_path / 'scenes', scene['scene_id'], scene['geo'], 100, 100,
                           dict(PATCH_META, **scene['meta']))
        catalog = tmp_path / 'catalog'

        code = main(['ingest', '--catalog', str(catalog), str(path)])

        assert code == EXIT_OK
        assert '✓' in capsys.readouterr().out
        assert len(SceneDatabase(catalog)) == 1

    def test_overrides(self, tmp_path):
        scene = GOLDEN_SCENES[1]
        path = write_scene(tmp_path / 'scenes', 'bare', scene['geo'], 50, 50, dict(PATCH_META, **scene['meta']))
        catalog = tmp_path / 'catalog'
        main(['ingest', '--catalog', str(catalog), '--season', 'winter', '--province', 'Jilin', str(path)])
        [record] = SceneDatabase(catalog).scenes()
        assert record.scene_id == 'bare'
        assert record.season.value == 'winter'
        assert record.province == 'Jilin'

    def test_missing_sidecar(self, tmp_path, capsys):
        scene = GOLDEN_SCENES[0]
        path = write_scene(tmp_path / 'scenes', 'lost', scene['geo'], 20, 20, dict(PATCH_META, **scene['meta']))
        (tmp_path / 'scenes' / 'lost.geo.json').unlink()
        code = main(['ingest', '--catalog', str(tmp_path / 'catalog'), str(path)])
        assert code == EXIT_PARTIAL
        assert '✗' in capsys.readouterr().out

    def test_malformed_metadata_does_not_stop_the_batch(self, tmp_path, capsys):
        scene = GOLDEN_SCENES[0]
        good = write_scene(tmp_path / 'scenes', 'good', scene['geo'], 20, 20, dict(PATCH_META, **scene['meta']))
        bad = write_scene(tmp_path / 'scenes', 'bad', scene['geo'], 20, 20, dict(PATCH_META, **scene['meta']))
        (tmp_path / 'scenes' / 'bad.meta.json').write_text('{"season": "summer",')
        catalog = tmp_path / 'catalog'

        code = main(['ingest', '--catalog', str(catalog), str(bad), str(good)])

        assert code == EXIT_PARTIAL
        assert 'Cannot read scene metadata' in capsys.readouterr().out
        assert [s.scene_id for s in SceneDatabase(catalog).scenes()] == ['good']


class TestRun:
    """Scripted end-to-end runs through the command line."""

    @freeze_time('2026-03-01 12:00:00')
    def test_run_with_mock_script(self, run_args):
        out, argv = run_args
        code = main(argv + ['--mock-script', str(ENLARGE_SCRIPT)])
        assert code == EXIT_OK

        final = read_binary_mask(out / 'masks' / 'p001.png').values
        expected = np.zeros((128, 128), dtype=np.uint8)
        expected[:, :64] = 1
        expected[16:96, 16:96] = 1
        assert np.array_equal(final, expected)

        manifest = json.loads((out / 'manifest.json').read_text())
        assert manifest['timestamp'] == '2026-03-01T12:00:00+00:00'
        assert manifest['mode'] == 'full'
        assert manifest['failures'] == 0
        assert manifest['adapters']['rqm']['script'] == 'enlarge-workflow'
        assert len(manifest['mock_script_sha256']) == 64
        assert manifest['mock_script_sha256'] == manifest['adapters']['rqm']['script_sha256']
        assert manifest['template_versions'] == template_versions()
        assert len(manifest['patches']['p001']['mask_sha256']) == 64
        assert manifest['config']['ambiguity']['area_min'] == 5000

    def test_no_query_mode(self, run_args):
        out, argv = run_args
        code = main(argv + ['--mock-script', str(ENLARGE_SCRIPT), '--mode', 'no-query'])
        assert code == EXIT_OK
        final = read_binary_mask(out / 'masks' / 'p001.png').values
        assert np.array_equal(final, boxes_mask([[0, 0, 64, 128]], 128, 128).values)
        trace = json.loads((out / 'traces' / 'p001.json').read_text())
        assert trace['mode'] == 'no-query'
        assert trace['regions'][0]['operation'] == 'skip'

    def test_scores_against_ground_truth(self, run_args, tmp_path, capsys):
        out, argv = run_args
        gt = tmp_path / 'gt'
        gt.mkdir()
        write_binary_mask(boxes_mask([[0, 0, 64, 128], [16, 16, 96, 96]], 128, 128), gt / 'p001.png')
        code = main(argv + ['--mock-script', str(ENLARGE_SCRIPT), '--gt', str(gt)])
        assert code == EXIT_OK
        metrics = json.loads((out / 'report' / 'metrics.json').read_text())
        assert metrics['overall']['F1'] == 1.0
        assert 'Heilongjiang' in capsys.readouterr().out

    def test_missing_patch_dir(self, tmp_path, catalog_dir, capsys):
        code = main(['run', '--patches', str(tmp_path / 'nope'), '--catalog', str(catalog_dir),
                     '--out', str(tmp_path / 'out'), '--mock-script', str(ENLARGE_SCRIPT)])
        assert code == EXIT_CONFIG
        assert 'Configuration error' in capsys.readouterr().out

    def test_missing_mock_script(self, run_args, tmp_path):
        _, argv = run_args
        assert main(argv + ['--mock-script', str(tmp_path / 'absent.json')]) == EXIT_CONFIG

    def test_no_service_urls(self, run_args):
        _, argv = run_args
        assert main(argv) == EXIT_CONFIG

    def test_partial_failure(self, run_args, patch_dir):
        out, argv = run_args
        write_patch(patch_dir, 'p002')
        (patch_dir / 'p002.geo.json').write_text('{"origin_lon": "east"}')
        code = main(argv + ['--mock-script', str(ENLARGE_SCRIPT)])
        assert code == EXIT_PARTIAL
        manifest = json.loads((out / 'manifest.json').read_text())
        assert manifest['failures'] == 1
        assert manifest['patches']['p002']['status'] == 'failed'
        assert manifest['patches']['p001']['status'] == 'ok'


class TestEval:
    def test_eval(self, tmp_path):
        pred, gt = tmp_path / 'pred', tmp_path / 'gt'
        pred.mkdir()
        gt.mkdir()
        mask = BinaryMask(np.eye(8, dtype=np.uint8))
        write_binary_mask(mask, pred / 'a.png')
        write_binary_mask(mask, gt / 'a.png')
        code = main(['eval', '--pred', str(pred), '--gt', str(gt), '--out', str(tmp_path / 'report')])
        assert code == EXIT_OK
        assert (tmp_path / 'report' / 'metrics.csv').exists()

    def test_missing_prediction_is_partial(self, tmp_path, capsys):
        pred, gt = tmp_path / 'pred', tmp_path / 'gt'
        pred.mkdir()
        gt.mkdir()
        write_binary_mask(BinaryMask.zeros(4, 4), gt / 'a.png')
        assert main(['eval', '--pred', str(pred), '--gt', str(gt)]) == EXIT_PARTIAL
        assert 'no prediction' in capsys.readouterr().out

    def test_missing_directory(self, tmp_path):
        assert main(['eval', '--pred', str(tmp_path / 'x'), '--gt', str(tmp_path)]) == EXIT_CONFIG

    def test_groups_from_patch_directory(self, tmp_path, patch_dir):
        pred, gt = tmp_path / 'pred', tmp_path / 'gt'
        pred.mkdir()
        gt.mkdir()
        mask = BinaryMask(np.eye(8, dtype=np.uint8))
        write_binary_mask(mask, pred / 'p001.png')
        write_binary_mask(mask, gt / 'p001.png')
        code = main(['eval', '--pred', str(pred), '--gt', str(gt), '--patches', str(patch_dir),
                     '--out', str(tmp_path / 'report')])
        assert code == EXIT_OK
        report = json.loads((tmp_path / 'report' / 'metrics.json').read_text())
        assert list(report['groups']) == ['Heilongjiang']


class TestTrace:
    """Human-readable trace output."""

    def test_render_from_output_dir(self, run_args, capsys):
        out, argv = run_args
        main(argv + ['--mock-script', str(ENLARGE_SCRIPT)])
        capsys.readouterr()

        assert main(['trace', str(out), '--patch', 'p001', '--prompts']) == EXIT_OK
        text = capsys.readouterr().out
        assert 'Patch p001  mode=full  base=fsm' in text
        assert '[region 1] bbox=[16, 16, 96, 96]' in text
        assert 'directive: enlarge (honored)' in text
        assert 'selected: 1 [skipped: single candidate]' in text
        assert 'verdict: yes' in text
        assert 'operation: add (2560 px changed)' in text
        assert '--- region 1 prompt_i ---' in text

    def test_patch_required_for_directory(self, tmp_path):
        assert main(['trace', str(tmp_path)]) == EXIT_CONFIG

    def test_render_errors_and_notes(self):
        text = render_trace({
            'patch_id': 'p9', 'mode': 'full', 'base_source': 'file',
            'base_foreground': 10, 'final_foreground': 10,
            'regions': [{
                'region': {'region_id': 3, 'bbox': [0, 0, 80, 80], 'bbox_area': 6400, 'pixel_count': 6000},
                'directive': None, 'directive_honored': None, 'query': None, 'candidates': [],
                'selection': None, 'verdict': None, 'operation': 'skip', 'changed_pixels': 0,
                'notes': ['no auxiliary candidates'],
                'errors': [{'stage': 'directive', 'error_type': 'NoDirectiveError', 'message': 'none found'}],
            }],
        })
        assert 'note: no auxiliary candidates' in text
        assert 'error [directive]: NoDirectiveError: none found' in text
        assert 'Timings' not in text


class TestServe:
    def test_starts_query_service(self, catalog_dir, mocker):
        run = mocker.patch('flask.Flask.run')
        assert main(['serve', '--catalog', str(catalog_dir), '--host', '127.0.0.1', '--port', '5055']) == EXIT_OK
        run.assert_called_once_with(host='127.0.0.1', port=5055)

    def test_missing_catalog(self, tmp_path, mocker):
        run = mocker.patch('flask.Flask.run')
        assert main(['serve', '--catalog', str(tmp_path / 'nope')]) == EXIT_CONFIG
        run.assert_not_called()
