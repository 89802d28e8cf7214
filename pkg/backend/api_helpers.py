"""
API Helper Functions

Used by the scene query service:
- sanitize_for_json: pipeline values (enums, numpy, records) -> JSON primitives
- json_body: parse and check the request body, pass it to the view
- map_errors: domain exceptions -> HTTP status codes
- APIResponse: response envelopes
"""

import logging
from enum import Enum
from functools import wraps
from pathlib import Path
from typing import Any, Callable, Dict, Optional, Tuple, Type

import numpy as np
from flask import jsonify, request

try:
    from .imagedb import ImageDbError, InvalidQueryError
    from .raster_core import RasterError
except ImportError:
    from imagedb import ImageDbError, InvalidQueryError
    from raster_core import RasterError

logger = logging.getLogger(__name__)

# Most specific first; the first isinstance match wins.
ERROR_STATUS: Tuple[Tuple[Type[Exception], int], ...] = (
    (InvalidQueryError, 400),
    (ImageDbError, 422),
    (RasterError, 422),
)

_RECORD_METHODS = ('to_dict', 'to_record', 'to_metadata', 'to_list')


def sanitize_for_json(obj: Any) -> Any:
    """
    Convert a value to JSON primitives.

    Records exposing one of `to_dict`, `to_record`, `to_metadata` or
    `to_list` are serialised through it. Sets become sorted lists so
    responses are stable.
    """
    if obj is None or isinstance(obj, (bool, str)):
        return obj
    if isinstance(obj, Enum):
        return sanitize_for_json(obj.value)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, (int, float)):
        return obj
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, dict):
        return {str(k): sanitize_for_json(v) for k, v in obj.items()}
    if isinstance(obj, (set, frozenset)):
        return sorted(sanitize_for_json(v) for v in obj)
    if isinstance(obj, (list, tuple)):
        return [sanitize_for_json(v) for v in obj]
    for method in _RECORD_METHODS:
        if callable(getattr(obj, method, None)):
            return sanitize_for_json(getattr(obj, method)())
    if hasattr(obj, '__dict__'):
        return sanitize_for_json(vars(obj))
    return str(obj)


def json_body(*required: str):
    """
    Parse the JSON object body and pass it to the view as `body`.

    Args:
        *required: Keys that must be present with a non-empty value

    Usage:
        @json_body('kind', 'geo_bbox')
        def query(body):
            ...
    """
    def decorator(view: Callable):
        @wraps(view)
        def wrapper(*args, **kwargs):
            body = request.get_json(silent=True)
            if not isinstance(body, dict) or not body:
                return APIResponse.error('Request body must be a non-empty JSON object')
            missing = [key for key in required if body.get(key) in (None, '', [], {})]
            if missing:
                return APIResponse.error(f"Missing fields: {', '.join(missing)}", missing=missing)
            return view(*args, body=body, **kwargs)
        return wrapper
    return decorator


def status_for(error: Exception) -> Optional[int]:
    for error_type, status in ERROR_STATUS:
        if isinstance(error, error_type):
            return status
    return None


def map_errors(view: Callable):
    """
    Turn domain errors into 4xx responses; anything else is logged and becomes a 500.
    """
    @wraps(view)
    def wrapper(*args, **kwargs):
        try:
            return view(*args, **kwargs)
        except Exception as e:
            status = status_for(e)
            if status is None:
                logger.exception("Unhandled error in %s", view.__name__)
                return APIResponse.error(f"{view.__name__} failed: {type(e).__name__}", 500)
            logger.info("%s rejected: %s: %s", view.__name__, type(e).__name__, e)
            return APIResponse.error(str(e), status, error_type=type(e).__name__)
    return wrapper


class APIResponse:
    """JSON response envelopes."""

    @staticmethod
    def success(data: Dict[str, Any]) -> Tuple[Any, int]:
        return jsonify(sanitize_for_json(data)), 200

    @staticmethod
    def error(message: str, status_code: int = 400, **details: Any) -> Tuple[Any, int]:
        return jsonify(sanitize_for_json(dict(details, error=message))), status_code
