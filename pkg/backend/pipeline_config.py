"""
Pipeline Configuration

Defines:
- Correction modes (the ablation harness: which directives get honored)
- Adapter settings for the reasoning-query model (RQM) and segmentation model (FSM)
- PipelineConfig, loaded from a versioned JSON file with environment overrides

Environment variables (read after load_dotenv()):
- FIELDSIGHT_RQM_URL, FIELDSIGHT_RQM_MODEL, FIELDSIGHT_FSM_URL
- FIELDSIGHT_WORKERS, FIELDSIGHT_MODE
- API keys from the variable named by each adapter's api_key_env
"""

import json
import os
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

from dotenv import load_dotenv

try:
    from .adapters import (
        AdapterScript, FsmAdapter, HttpFsmAdapter, HttpRqmAdapter, RqmAdapter, scripted_adapters,
    )
    from .ambiguity import AmbiguityParams, BoxStyle
    from .imagedb import DEFAULT_ENLARGE_SCALE, DEFAULT_PATCH_PX, QueryKind
    from .raster_core import RasterError
except ImportError:
    from adapters import (
        AdapterScript, FsmAdapter, HttpFsmAdapter, HttpRqmAdapter, RqmAdapter, scripted_adapters,
    )
    from ambiguity import AmbiguityParams, BoxStyle
    from imagedb import DEFAULT_ENLARGE_SCALE, DEFAULT_PATCH_PX, QueryKind
    from raster_core import RasterError

load_dotenv()

CONFIG_VERSION = 1


class ConfigError(Exception):
    """Invalid or unresolvable configuration; aborts a run."""


# =============================================================================
# CORRECTION MODES
# =============================================================================

class CorrectionMode(Enum):
    FULL = 'full'
    TEMPORAL_ONLY = 'temporal-only'
    ENLARGE_ONLY = 'enlarge-only'
    NO_QUERY = 'no-query'

    @classmethod
    def parse(cls, value: Union[str, "CorrectionMode"]) -> "CorrectionMode":
        try:
            return cls(value)
        except ValueError:
            raise ConfigError(
                f"Unknown mode {value!r}; choose one of {', '.join(m.value for m in cls)}"
            )

    @property
    def queries(self) -> bool:
        return self is not CorrectionMode.NO_QUERY

    def honors(self, kind: QueryKind) -> bool:
        return kind.value in CORRECTION_MODES[self.value]['honors']


CORRECTION_MODES = {
    'full': {
        'name': 'Complete pipeline',
        'description': 'Honor both temporal and enlarge directives',
        'honors': ['temporal', 'enlarge'],
    },
    'temporal-only': {
        'name': 'Query only temporal images',
        'description': 'Enlarge directives are traced but not executed',
        'honors': ['temporal'],
    },
    'enlarge-only': {
        'name': 'Query only enlarge images',
        'description': 'Temporal directives are traced but not executed',
        'honors': ['enlarge'],
    },
    'no-query': {
        'name': 'Basic perception only',
        'description': 'No reasoning queries; the final mask is the base mask',
        'honors': [],
    },
}


def get_modes_for_cli() -> List[str]:
    return list(CORRECTION_MODES)


# =============================================================================
# ADAPTER SETTINGS
# =============================================================================

ADAPTER_KINDS = ('http', 'scripted')


@dataclass(frozen=True)
class AdapterSettings:
    kind: str = 'http'
    url: str = ''
    model: str = ''
    timeout_s: float = 60.0
    max_tokens: int = 1024
    requests_per_minute: Optional[int] = None
    max_in_flight: int = 4
    api_key_env: str = ''
    max_attempts: int = 3
    backoff_s: float = 1.0

    def __post_init__(self):
        if self.kind not in ADAPTER_KINDS:
            raise ConfigError(f"Adapter kind must be one of {ADAPTER_KINDS}, got {self.kind!r}")
        if self.timeout_s <= 0:
            raise ConfigError(f"timeout_s must be > 0, got {self.timeout_s}")
        if self.max_in_flight < 1 or self.max_attempts < 1:
            raise ConfigError("max_in_flight and max_attempts must be >= 1")
        if self.requests_per_minute is not None and self.requests_per_minute < 1:
            raise ConfigError(f"requests_per_minute must be >= 1, got {self.requests_per_minute}")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], default_key_env: str) -> "AdapterSettings":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown adapter settings: {sorted(unknown)}")
        values = dict(data)
        values.setdefault('api_key_env', default_key_env)
        try:
            return cls(**values)
        except TypeError as e:
            raise ConfigError(f"Malformed adapter settings: {e}")

    def to_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)

    def api_key(self, env: Mapping[str, str]) -> Optional[str]:
        if not self.api_key_env:
            return None
        return env.get(self.api_key_env) or None


# =============================================================================
# PIPELINE CONFIG
# =============================================================================

@dataclass(frozen=True)
class PipelineConfig:
    ambiguity: AmbiguityParams = field(default_factory=AmbiguityParams)
    enlarge_scale: float = DEFAULT_ENLARGE_SCALE
    patch_px: int = DEFAULT_PATCH_PX
    mode: CorrectionMode = CorrectionMode.FULL
    workers: int = 1
    box_stroke_px: int = 3
    format_retry: bool = True
    rqm: AdapterSettings = field(default_factory=lambda: AdapterSettings(api_key_env='FIELDSIGHT_RQM_API_KEY'))
    fsm: AdapterSettings = field(default_factory=lambda: AdapterSettings(api_key_env='FIELDSIGHT_FSM_API_KEY'))

    def __post_init__(self):
        object.__setattr__(self, 'mode', CorrectionMode.parse(self.mode))
        if not self.enlarge_scale > 1:
            raise ConfigError(f"enlarge_scale must be > 1, got {self.enlarge_scale}")
        if self.patch_px < 1 or self.workers < 1:
            raise ConfigError("patch_px and workers must be >= 1")
        if self.box_stroke_px < 0:
            raise ConfigError(f"box_stroke_px must be >= 0, got {self.box_stroke_px}")

    @property
    def box_style(self) -> BoxStyle:
        return BoxStyle(stroke_px=self.box_stroke_px)

    def to_dict(self) -> Dict[str, Any]:
        """Snapshot for manifests; holds variable names, never key values."""
        return {
            'version': CONFIG_VERSION,
            'ambiguity': self.ambiguity.to_dict(),
            'enlarge_scale': self.enlarge_scale,
            'patch_px': self.patch_px,
            'mode': self.mode.value,
            'workers': self.workers,
            'box_stroke_px': self.box_stroke_px,
            'format_retry': self.format_retry,
            'rqm': self.rqm.to_dict(),
            'fsm': self.fsm.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "PipelineConfig":
        if data.get('version') != CONFIG_VERSION:
            raise ConfigError(f"Config version must be {CONFIG_VERSION}, got {data.get('version')!r}")
        allowed = {'version', 'ambiguity', 'enlarge_scale', 'patch_px', 'mode', 'workers',
                   'box_stroke_px', 'format_retry', 'rqm', 'fsm'}
        unknown = set(data) - allowed
        if unknown:
            raise ConfigError(f"Unknown config keys: {sorted(unknown)}")

        try:
            ambiguity = AmbiguityParams(**data.get('ambiguity', {}))
        except (TypeError, ValueError, RasterError) as e:
            raise ConfigError(f"Invalid ambiguity settings: {e}")

        values = {k: data[k] for k in ('enlarge_scale', 'patch_px', 'mode', 'workers',
                                       'box_stroke_px', 'format_retry') if k in data}
        try:
            return cls(
                ambiguity=ambiguity,
                rqm=AdapterSettings.from_dict(data.get('rqm', {}), 'FIELDSIGHT_RQM_API_KEY'),
                fsm=AdapterSettings.from_dict(data.get('fsm', {}), 'FIELDSIGHT_FSM_API_KEY'),
                **values,
            )
        except TypeError as e:
            raise ConfigError(f"Malformed config: {e}")


def apply_env_overrides(config: PipelineConfig, env: Mapping[str, str]) -> PipelineConfig:
    """Environment values replace file values; CLI flags are applied after this."""
    rqm, fsm = config.rqm, config.fsm
    if env.get('FIELDSIGHT_RQM_URL'):
        rqm = replace(rqm, url=env['FIELDSIGHT_RQM_URL'])
    if env.get('FIELDSIGHT_RQM_MODEL'):
        rqm = replace(rqm, model=env['FIELDSIGHT_RQM_MODEL'])
    if env.get('FIELDSIGHT_FSM_URL'):
        fsm = replace(fsm, url=env['FIELDSIGHT_FSM_URL'])

    changes: Dict[str, Any] = {'rqm': rqm, 'fsm': fsm}
    if env.get('FIELDSIGHT_MODE'):
        changes['mode'] = CorrectionMode.parse(env['FIELDSIGHT_MODE'])
    if env.get('FIELDSIGHT_WORKERS'):
        try:
            changes['workers'] = int(env['FIELDSIGHT_WORKERS'])
        except ValueError:
            raise ConfigError(f"FIELDSIGHT_WORKERS must be an integer, got {env['FIELDSIGHT_WORKERS']!r}")
    return replace(config, **changes)


def load_config(path: Optional[Union[str, Path]] = None, env: Optional[Mapping[str, str]] = None) -> PipelineConfig:
    """
    Load a pipeline config.

    Args:
        path: JSON config file; None means built-in defaults
        env: Environment mapping (defaults to os.environ)

    Returns:
        PipelineConfig with environment overrides applied
    """
    env = os.environ if env is None else env
    if path is None:
        config = PipelineConfig()
    else:
        try:
            data = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"Cannot read config {path}: {e}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config {path} is not valid JSON: {e}")
        if not isinstance(data, dict):
            raise ConfigError(f"Config {path} must be a JSON object")
        config = PipelineConfig.from_dict(data)
    return apply_env_overrides(config, env)


def build_adapters(
    config: PipelineConfig,
    mock_script: Optional[Union[str, Path, AdapterScript]] = None,
    env: Optional[Mapping[str, str]] = None,
) -> Tuple[RqmAdapter, FsmAdapter]:
    """
    Instantiate the RQM and FSM adapters.

    A mock script replaces both services with scripted adapters.
    """
    env = os.environ if env is None else env
    if mock_script is not None:
        try:
            return scripted_adapters(mock_script)
        except OSError as e:
            raise ConfigError(f"Cannot read mock script {mock_script}: {e}")

    for name, settings in (('rqm', config.rqm), ('fsm', config.fsm)):
        if settings.kind == 'scripted':
            raise ConfigError(f"{name} adapter is 'scripted' but no mock script was given")
        if not settings.url:
            raise ConfigError(f"{name} adapter has no URL (set it in the config or FIELDSIGHT_{name.upper()}_URL)")

    def common(s: AdapterSettings) -> Dict[str, Any]:
        return dict(
            timeout_s=s.timeout_s,
            api_key=s.api_key(env),
            requests_per_minute=s.requests_per_minute,
            max_in_flight=s.max_in_flight,
            max_attempts=s.max_attempts,
            backoff_s=s.backoff_s,
        )

    rqm = HttpRqmAdapter(config.rqm.url, model=config.rqm.model, max_tokens=config.rqm.max_tokens, **common(config.rqm))
    fsm = HttpFsmAdapter(config.fsm.url, model=config.fsm.model, **common(config.fsm))
    return rqm, fsm
