"""
Unit tests for raster file formats and wire codecs.
"""

import pytest
import sys
import os
import io
import json

import numpy as np
from PIL import Image

# Add backend to path
backend_dir = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
if backend_dir not in sys.path:
    sys.path.insert(0, backend_dir)

from raster_core import BinaryMask, ConfidenceMap, GeoTransform, RgbImage
from raster_io import (
    RasterFormatError, binary_mask_from_png_bytes, confidence_from_b64, confidence_to_b64,
    decode_mask_rle, encode_mask_rle, geo_sidecar_path, meta_sidecar_path, png_b64,
    read_binary_mask, read_confidence, read_geo, read_rgb, rgb_from_png_b64,
    write_binary_mask, write_confidence, write_geo, write_rgb,
)


class TestMaskPng:
    """Masks are stored as 0/255 single-band PNG."""

    def test_write_uses_255_for_foreground(self, tmp_path):
        path = tmp_path / 'm.png'
        write_binary_mask(BinaryMask(np.array([[0, 1], [1, 0]])), path)
        with Image.open(path) as img:
            assert img.mode == 'L'
            assert np.asarray(img).tolist() == [[0, 255], [255, 0]]

    def test_read_back(self, tmp_path):
        path = tmp_path / 'm.png'
        mask = BinaryMask(np.eye(5, dtype=np.uint8))
        write_binary_mask(mask, path)
        assert np.array_equal(read_binary_mask(path).values, mask.values)

    def test_grey_values_rejected(self):
        buffer = io.BytesIO()
        Image.fromarray(np.array([[0, 128]], dtype=np.uint8)).save(buffer, format='PNG')
        with pytest.raises(RasterFormatError):
            binary_mask_from_png_bytes(buffer.getvalue())

    def test_missing_file(self, tmp_path):
        with pytest.raises(RasterFormatError):
            read_binary_mask(tmp_path / 'absent.png')


class TestRgbAndGeo:
    """RGB images and geotransform sidecars."""

    def test_rgb_file(self, tmp_path):
        image = RgbImage(np.random.default_rng(0).integers(0, 256, size=(6, 4, 3)))
        write_rgb(image, tmp_path / 'x.png')
        assert np.array_equal(read_rgb(tmp_path / 'x.png').values, image.values)

    def test_rgb_b64(self):
        image = RgbImage(np.full((3, 3, 3), 17))
        assert np.array_equal(rgb_from_png_b64(png_b64(image)).values, image.values)

    def test_invalid_b64(self):
        with pytest.raises(RasterFormatError):
            rgb_from_png_b64('not base64 !!')

    def test_geo_sidecar_keys(self, tmp_path):
        geo = GeoTransform(100.0, 30.0, 0.001, -0.001)
        write_geo(geo, tmp_path / 'g.geo.json')
        data = json.loads((tmp_path / 'g.geo.json').read_text())
        assert set(data) == {'origin_lon', 'origin_lat', 'px_w_deg', 'px_h_deg'}
        assert read_geo(tmp_path / 'g.geo.json') == geo

    def test_malformed_geo(self, tmp_path):
        (tmp_path / 'g.geo.json').write_text('{"origin_lon": 1}')
        with pytest.raises(RasterFormatError):
            read_geo(tmp_path / 'g.geo.json')

    def test_sidecar_names(self):
        assert geo_sidecar_path('/d/scene.png').name == 'scene.geo.json'
        assert meta_sidecar_path('/d/scene.png').name == 'scene.meta.json'


class TestConfidenceFiles:
    """Flat float32 little-endian with a JSON sidecar."""

    def test_file_round_trip(self, tmp_path):
        conf = ConfidenceMap(np.array([[0.5, -2.0, 3.25], [1.0, 0.0, -0.125]]))
        write_confidence(conf, tmp_path / 'p.conf.f32')
        assert json.loads((tmp_path / 'p.conf.json').read_text()) == {'width': 3, 'height': 2, 'dtype': 'f32le'}
        assert np.array_equal(read_confidence(tmp_path / 'p.conf.f32').values, conf.values)

    def test_size_mismatch(self, tmp_path):
        np.zeros(5, dtype='<f4').tofile(tmp_path / 'p.conf.f32')
        (tmp_path / 'p.conf.json').write_text(json.dumps({'width': 3, 'height': 2, 'dtype': 'f32le'}))
        with pytest.raises(RasterFormatError):
            read_confidence(tmp_path / 'p.conf.f32')

    def test_b64_wrong_length(self):
        payload = confidence_to_b64(ConfidenceMap(np.zeros((2, 2))))
        with pytest.raises(RasterFormatError):
            confidence_from_b64(payload, 3, 3)


class TestMaskRle:
    """Run-length encoding starts with a background run."""

    def test_leading_foreground(self):
        mask = BinaryMask(np.array([[1, 1, 0, 1]]))
        assert encode_mask_rle(mask) == [0, 2, 1, 1]

    def test_all_background(self):
        assert encode_mask_rle(BinaryMask.zeros(3, 2)) == [6]

    def test_decode(self):
        assert decode_mask_rle([1, 2, 1], 2, 2).values.tolist() == [[0, 1], [1, 0]]

    def test_decode_wrong_total(self):
        with pytest.raises(RasterFormatError):
            decode_mask_rle([1, 2], 2, 2)

    def test_reencode_random_masks(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            values = (rng.random((17, 23)) < 0.4).astype(np.uint8)
            runs = encode_mask_rle(BinaryMask(values))
            assert encode_mask_rle(decode_mask_rle(runs, 23, 17)) == runs
