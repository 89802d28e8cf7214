"""
API tests for the scene query service.

Tests cover:
- /health with per-province bucket counts
- /query for temporal and enlarge requests
- Validation errors and empty answers
"""

import pytest
import sys
import os

import numpy as np

# Add backend to path
backend_dir = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
if backend_dir not in sys.path:
    sys.path.insert(0, backend_dir)

from query_service import create_app
from raster_io import rgb_from_png_b64

# Patch pixel box [16, 16, 96, 96] on the 0.001 degree test grid
REGION_GEO = [100.016, 29.904, 100.096, 29.984]


@pytest.fixture
def client(scene_db):
    app = create_app(scene_db)
    app.config['TESTING'] = True
    return app.test_client()


@pytest.mark.api
class TestHealth:
    def test_health(self, client):
        response = client.get('/health')
        assert response.status_code == 200
        data = response.get_json()
        assert data['status'] == 'healthy'
        assert data['scenes'] == 5
        assert data['buckets']['enlarge'] == {'China/Heilongjiang': 1}
        assert data['buckets']['multi-temporal'] == {'China/Heilongjiang': 4}


@pytest.mark.api
class TestQuery:
    """POST /query."""

    def test_temporal(self, client):
        response = client.post('/query', json={
            'kind': 'temporal',
            'geo_bbox': REGION_GEO,
            'exclude_season': 'summer',
            'requested_patch_px': 32,
            'admin_region': ['China', 'Heilongjiang'],
        })
        assert response.status_code == 200
        data = response.get_json()
        assert data['empty'] is False
        assert [c['season'] for c in data['candidates']] == ['spring', 'autumn', 'winter']
        first = data['candidates'][0]
        assert first['candidate_id'] == 'tmp-spring/temporal'
        assert first['width'] == first['height'] == 32
        assert first['footprint'] == pytest.approx(REGION_GEO)
        image = rgb_from_png_b64(first['png_b64'])
        assert image.values.shape == (32, 32, 3)
        assert image.values.dtype == np.uint8

    def test_enlarge(self, client):
        response = client.post('/query', json={
            'kind': 'enlarge', 'geo_bbox': REGION_GEO, 'enlarge_scale': 3, 'requested_patch_px': 48,
        })
        data = response.get_json()
        assert response.status_code == 200
        assert [c['source_scene_id'] for c in data['candidates']] == ['enl-wide']
        assert data['spec']['enlarge_scale'] == 3.0
        lon0, lat0, lon1, lat1 = data['candidates'][0]['footprint']
        assert lon1 - lon0 == pytest.approx(0.24)
        assert lat1 - lat0 == pytest.approx(0.24)

    def test_empty_answer_is_not_an_error(self, client):
        response = client.post('/query', json={'kind': 'temporal', 'geo_bbox': [10.0, 10.0, 10.1, 10.1]})
        assert response.status_code == 200
        assert response.get_json()['empty'] is True
        assert response.get_json()['candidates'] == []

    def test_other_province_is_empty(self, client):
        response = client.post('/query', json={
            'kind': 'enlarge', 'geo_bbox': REGION_GEO, 'admin_region': ['China', 'Jilin'],
        })
        assert response.get_json()['empty'] is True

    def test_missing_field(self, client):
        response = client.post('/query', json={'kind': 'temporal'})
        assert response.status_code == 400
        assert response.get_json() == {'error': 'Missing fields: geo_bbox', 'missing': ['geo_bbox']}

    @pytest.mark.parametrize('body', [
        {'kind': 'panorama', 'geo_bbox': REGION_GEO},
        {'kind': 'temporal', 'geo_bbox': [1, 2, 3]},
        {'kind': 'temporal', 'geo_bbox': REGION_GEO, 'exclude_season': 'monsoon'},
        {'kind': 'enlarge', 'geo_bbox': REGION_GEO, 'enlarge_scale': 1},
    ])
    def test_malformed(self, client, body):
        response = client.post('/query', json=body)
        assert response.status_code == 400
        assert response.get_json()['error_type'] == 'InvalidQueryError'

    def test_no_json(self, client):
        response = client.post('/query', data='kind=temporal', content_type='application/x-www-form-urlencoded')
        assert response.status_code == 400
