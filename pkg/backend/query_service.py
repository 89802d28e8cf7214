"""
Flask Query Service for the Scene Database

Endpoints:
- POST /query   QuerySpec JSON -> candidate metadata + base64 PNG pixels
- GET  /health  catalog size and index buckets

Run with `python query_service.py --catalog <dir>` or through `cli.py serve`.
"""

import logging
import os

from dotenv import load_dotenv
from flask import Flask
from flask_cors import CORS

try:
    from .api_helpers import APIResponse, json_body, map_errors
    from .imagedb import DataType, QuerySpec, SceneDatabase
    from .raster_io import png_b64
except ImportError:
    from api_helpers import APIResponse, json_body, map_errors
    from imagedb import DataType, QuerySpec, SceneDatabase
    from raster_io import png_b64

load_dotenv()

logger = logging.getLogger(__name__)


def create_app(db: SceneDatabase) -> Flask:
    """Build the query service around an already-loaded database."""
    app = Flask(__name__)
    CORS(app, resources={r"/*": {"origins": os.getenv('FIELDSIGHT_CORS_ORIGINS', '*')}})
    app.config['SCENE_DB'] = db

    @app.route('/health', methods=['GET'])
    def health():
        return APIResponse.success({
            'status': 'healthy',
            'scenes': len(db),
            'buckets': {
                data_type.value: {
                    f"{country}/{province}": count
                    for (country, province), count in sorted(db.province_buckets(data_type).items())
                }
                for data_type in DataType
            },
        })

    @app.route('/query', methods=['POST'])
    @map_errors
    @json_body('kind', 'geo_bbox')
    def query(body):
        spec = QuerySpec.from_dict(body)
        candidates = db.query(spec)
        logger.info("Query %s -> %d candidates", spec.kind.value, len(candidates))
        return APIResponse.success({
            'spec': spec.to_dict(),
            'empty': not candidates,
            'candidates': [
                dict(candidate.to_metadata(), png_b64=png_b64(candidate.pixels))
                for candidate in candidates
            ],
        })

    return app


if __name__ == '__main__':
    import argparse

    parser = argparse.ArgumentParser(description='Scene database query service')
    parser.add_argument('--catalog', required=True, help='Catalog directory')
    parser.add_argument('--host', default=os.getenv('HOST', '0.0.0.0'))
    parser.add_argument('--port', type=int, default=int(os.getenv('PORT', '5000')))
    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO)
    create_app(SceneDatabase(args.catalog)).run(host=args.host, port=args.port)
