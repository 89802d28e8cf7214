"""
Model Adapters

The pipeline talks to two external services through narrow interfaces:
- RqmAdapter.complete(images, prompt, params) -> text      (reasoning-query model)
- FsmAdapter.segment(image, box_prompt, params) -> mask + confidence  (segmentation model)

Implementations:
- HttpRqmAdapter / HttpFsmAdapter: JSON over HTTP with retry, timeout and rate limiting
- ScriptedRqmAdapter / ScriptedFsmAdapter: deterministic replies from a JSON script,
  keyed by (patch_id, stage, region_id), for golden runs and tests
"""

import hashlib
import json
import logging
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import requests
from tenacity import (
    Retrying, before_sleep_log, retry_if_exception, stop_after_attempt, wait_exponential,
)

try:
    from .raster_core import BinaryMask, Bbox, ConfidenceMap, RgbImage
    from .raster_io import RasterFormatError, confidence_from_b64, decode_mask_rle, png_b64
    from .rate_limiting import CallGate
except ImportError:
    from raster_core import BinaryMask, Bbox, ConfidenceMap, RgbImage
    from raster_io import RasterFormatError, confidence_from_b64, decode_mask_rle, png_b64
    from rate_limiting import CallGate

logger = logging.getLogger(__name__)

DEFAULT_MAX_ATTEMPTS = 3
SCRIPT_CONFIDENCE = 5.0

STAGE_BASE = 'base'
STAGE_SEGMENT = 'segment'


class AdapterError(Exception):
    """A model service call failed."""


class TransportError(AdapterError):
    pass


class HttpStatusError(AdapterError):
    def __init__(self, status: int, message: str):
        super().__init__(message)
        self.status = status


class SchemaError(AdapterError):
    """The service (or a script) returned data that does not fit the wire schema."""


class AdapterTimeoutError(AdapterError):
    pass


class ScriptExhaustedError(AdapterError):
    pass


@dataclass(frozen=True)
class CallParams:
    """Where in the pipeline a call comes from."""
    patch_id: str = ''
    stage: str = ''
    region_id: Optional[int] = None


@dataclass(frozen=True)
class FsmOutput:
    mask: BinaryMask
    confidence: ConfidenceMap


class RqmAdapter(ABC):
    @property
    @abstractmethod
    def info(self) -> Dict[str, Any]:
        """Identity recorded in traces and run manifests."""

    @abstractmethod
    def complete(self, images: Sequence[RgbImage], prompt: str, params: CallParams = CallParams()) -> str:
        ...


class FsmAdapter(ABC):
    @property
    @abstractmethod
    def info(self) -> Dict[str, Any]:
        """Identity recorded in traces and run manifests."""

    @abstractmethod
    def segment(
        self,
        image: RgbImage,
        box_prompt: Optional[Bbox] = None,
        params: CallParams = CallParams(),
    ) -> FsmOutput:
        ...


def _check_output_dims(image: RgbImage, output: FsmOutput) -> FsmOutput:
    expected = (image.width, image.height)
    for name, raster in (('mask', output.mask), ('confidence', output.confidence)):
        if (raster.width, raster.height) != expected:
            raise SchemaError(
                f"FSM {name} is {raster.width}x{raster.height}, image is {expected[0]}x{expected[1]}"
            )
    return output


# =============================================================================
# HTTP ADAPTERS
# =============================================================================

def _is_retryable(error: BaseException) -> bool:
    if isinstance(error, (TransportError, AdapterTimeoutError)):
        return True
    return isinstance(error, HttpStatusError) and (error.status >= 500 or error.status == 429)


class _HttpAdapter:
    """POST JSON with per-call timeout, bounded retries and a shared call gate."""

    kind = 'http'

    def __init__(
        self,
        url: str,
        timeout_s: float = 60.0,
        api_key: Optional[str] = None,
        requests_per_minute: Optional[int] = None,
        max_in_flight: int = 4,
        max_attempts: int = DEFAULT_MAX_ATTEMPTS,
        backoff_s: float = 1.0,
    ):
        if not url:
            raise ValueError("Adapter URL is required")
        self.url = url
        self.timeout_s = timeout_s
        self.api_key = api_key
        self.max_attempts = max_attempts
        self.backoff_s = backoff_s
        self.gate = CallGate(requests_per_minute, max_in_flight)

    def _post_once(self, payload: Dict[str, Any]) -> Dict[str, Any]:
        headers = {'Content-Type': 'application/json'}
        if self.api_key:
            headers['Authorization'] = f'Bearer {self.api_key}'

        with self.gate.slot():
            try:
                response = requests.post(self.url, json=payload, headers=headers, timeout=self.timeout_s)
            except requests.exceptions.Timeout as e:
                raise AdapterTimeoutError(f"{self.url} timed out after {self.timeout_s}s: {e}")
            except requests.exceptions.RequestException as e:
                raise TransportError(f"{self.url} unreachable: {e}")

        if not 200 <= response.status_code < 300:
            raise HttpStatusError(
                response.status_code, f"{self.url} returned {response.status_code}: {response.text[:200]}"
            )
        try:
            body = response.json()
        except ValueError as e:
            raise SchemaError(f"{self.url} returned non-JSON body: {e}")
        if not isinstance(body, dict):
            raise SchemaError(f"{self.url} returned {type(body).__name__}, expected an object")
        return body

    def _post(self, payload: Dict[str, Any]) -> Tuple[Dict[str, Any], int]:
        """POST with retries; returns (body, attempts used)."""
        attempts = 0
        try:
            for attempt in Retrying(
                stop=stop_after_attempt(self.max_attempts),
                wait=wait_exponential(multiplier=self.backoff_s, max=30),
                retry=retry_if_exception(_is_retryable),
                before_sleep=before_sleep_log(logger, logging.WARNING),
                reraise=True,
            ):
                with attempt:
                    attempts = attempt.retry_state.attempt_number
                    body = self._post_once(payload)
        except AdapterError:
            self.gate.usage.record(attempts, failed=True)
            logger.warning("%s failed after %d attempt(s)", self.url, attempts)
            raise

        self.gate.usage.record(attempts)
        if attempts > 1:
            logger.info("%s succeeded after %d attempts", self.url, attempts)
        return body, attempts


class HttpRqmAdapter(_HttpAdapter, RqmAdapter):
    """
    Reasoning-query model over HTTP.

    Wire: POST {model, prompt, images: [base64 PNG], max_tokens} -> {text}
    """

    def __init__(self, url: str, model: str, max_tokens: int = 1024, **kwargs):
        super().__init__(url, **kwargs)
        self.model = model
        self.max_tokens = max_tokens

    @property
    def info(self) -> Dict[str, Any]:
        return {'kind': self.kind, 'url': self.url, 'model': self.model}

    def complete(self, images: Sequence[RgbImage], prompt: str, params: CallParams = CallParams()) -> str:
        body, _ = self._post({
            'model': self.model,
            'prompt': prompt,
            'images': [png_b64(image) for image in images],
            'max_tokens': self.max_tokens,
        })
        text = body.get('text')
        if not isinstance(text, str):
            raise SchemaError(f"RQM reply lacks a string 'text' field (keys: {sorted(body)})")
        logger.debug("RQM %s/%s/%s: %d chars", params.patch_id, params.stage, params.region_id, len(text))
        return text


class HttpFsmAdapter(_HttpAdapter, FsmAdapter):
    """
    Segmentation model over HTTP.

    Wire: POST {image: base64 PNG, box?: [x0, y0, x1, y1]} -> {mask_rle, confidence_b64_f32le}
    """

    def __init__(self, url: str, model: str = '', **kwargs):
        super().__init__(url, **kwargs)
        self.model = model

    @property
    def info(self) -> Dict[str, Any]:
        return {'kind': self.kind, 'url': self.url, 'model': self.model}

    def segment(
        self,
        image: RgbImage,
        box_prompt: Optional[Bbox] = None,
        params: CallParams = CallParams(),
    ) -> FsmOutput:
        payload: Dict[str, Any] = {'image': png_b64(image)}
        if box_prompt is not None:
            payload['box'] = box_prompt.to_list()
        body, _ = self._post(payload)

        runs = body.get('mask_rle')
        conf_b64 = body.get('confidence_b64_f32le')
        if not isinstance(runs, list) or not isinstance(conf_b64, str):
            raise SchemaError(f"FSM reply lacks mask_rle/confidence_b64_f32le (keys: {sorted(body)})")
        try:
            output = FsmOutput(
                mask=decode_mask_rle(runs, image.width, image.height),
                confidence=confidence_from_b64(conf_b64, image.width, image.height),
            )
        except (RasterFormatError, TypeError, ValueError) as e:
            raise SchemaError(f"FSM reply does not decode: {e}")
        return _check_output_dims(image, output)


# =============================================================================
# SCRIPTED ADAPTERS
# =============================================================================

class AdapterScript:
    """
    Canned replies loaded from JSON.

    Layout:
        {
          "name": "...",
          "rqm": {"<stage>": {"<region_id>|*": [reply, ...]}},
          "fsm": {"<stage>": {"<region_id>|*": [entry, ...]}},
          "patches": {"<patch_id>": {"rqm": {...}, "fsm": {...}}}
        }

    A patch section overrides the top-level replies for that patch. Every
    (patch_id, service, stage, region) key keeps its own position, so replies
    do not depend on how patches are interleaved across workers.
    """

    def __init__(self, data: Dict[str, Any], sha256: str = ''):
        if not isinstance(data, dict) or not isinstance(data.get('name'), str):
            raise SchemaError("Adapter script must be an object with a string 'name'")
        self.data = data
        self.name = data['name']
        self.sha256 = sha256 or hashlib.sha256(
            json.dumps(data, sort_keys=True).encode('utf-8')
        ).hexdigest()
        self._positions: Dict[Tuple[str, str, str, str], int] = {}
        self._lock = threading.Lock()

    @classmethod
    def load(cls, path: Union[str, Path]) -> "AdapterScript":
        raw = Path(path).read_bytes()
        try:
            data = json.loads(raw.decode('utf-8'))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise SchemaError(f"Cannot parse adapter script {path}: {e}")
        return cls(data, sha256=hashlib.sha256(raw).hexdigest())

    def _replies(self, service: str, params: CallParams) -> Tuple[str, List[Any]]:
        sections = []
        patch_section = self.data.get('patches', {}).get(params.patch_id)
        if patch_section is not None:
            sections.append(patch_section.get(service, {}))
        sections.append(self.data.get(service, {}))

        region_key = '*' if params.region_id is None else str(params.region_id)
        for section in sections:
            stage = section.get(params.stage, {})
            for key in (region_key, '*'):
                if key in stage:
                    return key, stage[key]
        raise ScriptExhaustedError(
            f"Script '{self.name}' has no {service} replies for "
            f"patch={params.patch_id!r} stage={params.stage!r} region={params.region_id}"
        )

    def next_reply(self, service: str, params: CallParams) -> Any:
        key, replies = self._replies(service, params)
        counter_key = (params.patch_id, service, params.stage, key)
        with self._lock:
            position = self._positions.get(counter_key, 0)
            if position >= len(replies):
                raise ScriptExhaustedError(
                    f"Script '{self.name}' exhausted for {service} "
                    f"patch={params.patch_id!r} stage={params.stage!r} region={key} "
                    f"after {len(replies)} replies"
                )
            self._positions[counter_key] = position + 1
        return replies[position]


class ScriptedRqmAdapter(RqmAdapter):
    def __init__(self, script: AdapterScript):
        self.script = script

    @property
    def info(self) -> Dict[str, Any]:
        return {'kind': 'scripted', 'script': self.script.name, 'script_sha256': self.script.sha256}

    def complete(self, images: Sequence[RgbImage], prompt: str, params: CallParams = CallParams()) -> str:
        reply = self.script.next_reply('rqm', params)
        if not isinstance(reply, str):
            raise SchemaError(f"Scripted RQM reply must be text, got {type(reply).__name__}")
        return reply


def _boxes_mask(boxes: Sequence[Sequence[int]], width: int, height: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=bool)
    for coords in boxes:
        box = Bbox.from_list(coords)
        mask[box.slices] = True
    return mask


def render_script_entry(entry: Dict[str, Any], image: RgbImage, box_prompt: Optional[Bbox]) -> FsmOutput:
    """
    Turn one scripted FSM entry into rasters on the image grid.

    Entry forms (combinable with "low_confidence_boxes", where confidence is 0):
        {"constant": 0|1}
        {"foreground_boxes": [[x0, y0, x1, y1], ...]}
        {"fill_box_prompt": true}
        {"mask_rle": [...]}
    """
    width, height = image.width, image.height
    if not isinstance(entry, dict):
        raise SchemaError(f"Scripted FSM entry must be an object, got {type(entry).__name__}")

    if 'constant' in entry:
        foreground = np.full((height, width), bool(entry['constant']))
    elif 'foreground_boxes' in entry:
        foreground = _boxes_mask(entry['foreground_boxes'], width, height)
    elif entry.get('fill_box_prompt'):
        if box_prompt is None:
            raise SchemaError("fill_box_prompt entry used without a box prompt")
        foreground = _boxes_mask([box_prompt.to_list()], width, height)
    elif 'mask_rle' in entry:
        try:
            foreground = decode_mask_rle(entry['mask_rle'], width, height).values.astype(bool)
        except RasterFormatError as e:
            raise SchemaError(f"Scripted mask_rle does not decode: {e}")
    else:
        raise SchemaError(f"Scripted FSM entry has no mask form: {sorted(entry)}")

    confidence = np.where(foreground, SCRIPT_CONFIDENCE, -SCRIPT_CONFIDENCE)
    if entry.get('low_confidence_boxes'):
        confidence[_boxes_mask(entry['low_confidence_boxes'], width, height)] = 0.0
    return FsmOutput(BinaryMask(foreground.astype(np.uint8)), ConfidenceMap(confidence))


class ScriptedFsmAdapter(FsmAdapter):
    def __init__(self, script: AdapterScript):
        self.script = script

    @property
    def info(self) -> Dict[str, Any]:
        return {'kind': 'scripted', 'script': self.script.name, 'script_sha256': self.script.sha256}

    def segment(
        self,
        image: RgbImage,
        box_prompt: Optional[Bbox] = None,
        params: CallParams = CallParams(),
    ) -> FsmOutput:
        entry = self.script.next_reply('fsm', params)
        return _check_output_dims(image, render_script_entry(entry, image, box_prompt))


def scripted_adapters(script: Union[AdapterScript, Dict[str, Any], str, Path]) -> Tuple[ScriptedRqmAdapter, ScriptedFsmAdapter]:
    """Both scripted adapters over one script (shared reply positions)."""
    if isinstance(script, (str, Path)):
        script = AdapterScript.load(script)
    elif isinstance(script, dict):
        script = AdapterScript(script)
    return ScriptedRqmAdapter(script), ScriptedFsmAdapter(script)
