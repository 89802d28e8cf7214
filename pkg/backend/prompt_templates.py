"""
Prompt Templates for the Reasoning-Query Model

Three system prompts drive the per-region conversation:
- I:   why is this region ambiguous? -> DIRECTIVE: <reg-1> (temporal) | <reg-2> (enlarge)
- II:  which auxiliary candidate is best? -> SELECTED: <n>
- III: is the region farmland, given patch + auxiliary? -> ANSWER: yes | no

Templates live in prompts/*.txt as versioned text with `${name}` placeholders.
The `#` header lines are metadata and are never sent to the model.
"""

import functools
from pathlib import Path
from string import Template
from typing import Any, Dict, List, Mapping, Optional, Sequence

try:
    from .ambiguity import AmbiguityRegion
    from .imagedb import CandidateImage, QueryKind
except ImportError:
    from ambiguity import AmbiguityRegion
    from imagedb import CandidateImage, QueryKind

PROMPTS_DIR = Path(__file__).resolve().parent / 'prompts'

STAGE_DIRECTIVE = 'directive'
STAGE_SELECTION = 'selection'
STAGE_VERDICT = 'verdict'


class TemplateError(Exception):
    """A template file is missing, malformed, or rendered with missing values."""


# =============================================================================
# TEMPLATE REGISTRY
# =============================================================================

PROMPT_TEMPLATES = {
    'system_prompt_i': {
        'name': 'System Prompt I (reasoning query)',
        'stage': STAGE_DIRECTIVE,
        'directive_kind': None,
        'file': 'system_prompt_i.txt',
        'answer_slot': 'DIRECTIVE',
    },
    'system_prompt_ii_temporal': {
        'name': 'System Prompt II (multi-temporal selection)',
        'stage': STAGE_SELECTION,
        'directive_kind': QueryKind.TEMPORAL,
        'file': 'system_prompt_ii_temporal.txt',
        'answer_slot': 'SELECTED',
    },
    'system_prompt_ii_enlarge': {
        'name': 'System Prompt II (enlarge selection)',
        'stage': STAGE_SELECTION,
        'directive_kind': QueryKind.ENLARGE,
        'file': 'system_prompt_ii_enlarge.txt',
        'answer_slot': 'SELECTED',
    },
    'system_prompt_iii_temporal': {
        'name': 'System Prompt III (multi-temporal verdict)',
        'stage': STAGE_VERDICT,
        'directive_kind': QueryKind.TEMPORAL,
        'file': 'system_prompt_iii_temporal.txt',
        'answer_slot': 'ANSWER',
    },
    'system_prompt_iii_enlarge': {
        'name': 'System Prompt III (enlarge verdict)',
        'stage': STAGE_VERDICT,
        'directive_kind': QueryKind.ENLARGE,
        'file': 'system_prompt_iii_enlarge.txt',
        'answer_slot': 'ANSWER',
    },
}

FORMAT_REMINDERS = {
    STAGE_DIRECTIVE: (
        "Your previous reply did not follow the required output format. "
        "Reply again and finish with exactly one line, either `DIRECTIVE: <reg-1>` "
        "or `DIRECTIVE: <reg-2>`, and mention only one of the two tags."
    ),
    STAGE_SELECTION: (
        "Your previous reply did not follow the required output format. "
        "Reply again and finish with exactly one line `SELECTED: <n>` naming one of the offered image numbers."
    ),
    STAGE_VERDICT: (
        "Your previous reply did not follow the required output format. "
        "Reply again and finish with exactly one line, either `ANSWER: yes` or `ANSWER: no`."
    ),
}


# =============================================================================
# LOADING
# =============================================================================

@functools.lru_cache(maxsize=None)
def load_template(key: str) -> Dict[str, Any]:
    """
    Read a registered template file.

    Returns:
        Dictionary with 'header' (metadata from the `#` lines), 'version',
        'status', 'body' (string.Template) and 'placeholders'
    """
    entry = PROMPT_TEMPLATES.get(key)
    if entry is None:
        raise TemplateError(f"Unknown prompt template: {key}")

    path = PROMPTS_DIR / entry['file']
    try:
        lines = path.read_text(encoding='utf-8').splitlines()
    except OSError as e:
        raise TemplateError(f"Cannot read template {path}: {e}")

    header: Dict[str, str] = {}
    body_start = 0
    for i, line in enumerate(lines):
        if not line.startswith('#'):
            body_start = i
            break
        name, _, value = line[1:].partition(':')
        header[name.strip()] = value.strip()
    else:
        raise TemplateError(f"Template {path} has no body")

    if 'version' not in header:
        raise TemplateError(f"Template {path} header lacks a version")

    body = Template('\n'.join(lines[body_start:]) + '\n')
    placeholders = sorted({
        m.group('named') or m.group('braced')
        for m in body.pattern.finditer(body.template)
        if m.group('named') or m.group('braced')
    })
    return {
        'key': key,
        'header': header,
        'version': header['version'],
        'status': header.get('status', ''),
        'body': body,
        'placeholders': placeholders,
    }


def template_key(stage: str, directive_kind: Optional[QueryKind] = None) -> str:
    for key, entry in PROMPT_TEMPLATES.items():
        if entry['stage'] == stage and entry['directive_kind'] == directive_kind:
            return key
    raise TemplateError(f"No template for stage={stage} kind={directive_kind}")


def template_versions() -> Dict[str, str]:
    """Version of every registered template, recorded in run manifests."""
    return {key: load_template(key)['version'] for key in PROMPT_TEMPLATES}


def _render(key: str, values: Mapping[str, Any]) -> str:
    template = load_template(key)
    try:
        return template['body'].substitute({k: str(v) for k, v in values.items()})
    except KeyError as e:
        raise TemplateError(f"Template {key} missing value for placeholder {e}")


def output_format_section(text: str) -> str:
    """Text after the OUTPUT FORMAT heading of a rendered prompt."""
    _, found, section = text.partition('OUTPUT FORMAT')
    return section if found else ''


# =============================================================================
# RENDERING
# =============================================================================

def _location(patch_meta: Mapping[str, Any]) -> str:
    parts = [patch_meta.get('province'), patch_meta.get('country')]
    parts = [p for p in parts if p]
    return ', '.join(parts) if parts else 'an unspecified region'


def render_prompt_i(region: AmbiguityRegion, patch_meta: Mapping[str, Any]) -> str:
    """
    Ask the model why a boxed region is ambiguous.

    Args:
        region: Region whose bbox is drawn on the attached patch
        patch_meta: Mapping with patch_id, width, height and optionally
            country, province, season

    Returns:
        Prompt text; only the four coordinate slots depend on the region
    """
    box = region.bbox
    return _render('system_prompt_i', {
        'patch_id': patch_meta.get('patch_id', ''),
        'width': patch_meta.get('width', ''),
        'height': patch_meta.get('height', ''),
        'location': _location(patch_meta),
        'season': patch_meta.get('season') or 'an unknown season',
        'x_min': box.x_min,
        'y_min': box.y_min,
        'x_max': box.x_max,
        'y_max': box.y_max,
    })


def _describe_candidate(index: int, candidate: CandidateImage, directive_kind: QueryKind) -> str:
    if directive_kind is QueryKind.TEMPORAL:
        tag = f", acquired {candidate.acquisition_tag}" if candidate.acquisition_tag else ''
        return f"Image {index}: same location in {candidate.season.value}{tag}"
    lon_min, lat_min, lon_max, lat_max = candidate.footprint.to_list()
    return (
        f"Image {index}: enlarged view from scene {candidate.source_scene_id}, "
        f"lon {lon_min:.6f} to {lon_max:.6f}, lat {lat_min:.6f} to {lat_max:.6f}"
    )


def render_prompt_ii(candidates: Sequence[CandidateImage], directive_kind: QueryKind) -> str:
    """Selection prompt; candidates are referenced as Image 1..N in the given order."""
    if not candidates:
        raise TemplateError("Selection prompt needs at least one candidate")
    kind = QueryKind(directive_kind)
    indices = list(range(1, len(candidates) + 1))
    return _render(template_key(STAGE_SELECTION, kind), {
        'candidate_count': len(candidates),
        'candidate_list': '\n'.join(
            _describe_candidate(i, c, kind) for i, c in zip(indices, candidates)
        ),
        'candidate_indices': ', '.join(str(i) for i in indices),
    })


def render_prompt_iii(directive_kind: QueryKind) -> str:
    return _render(template_key(STAGE_VERDICT, QueryKind(directive_kind)), {})


def with_format_reminder(prompt: str, stage: str) -> str:
    """Prompt for the single retry after an unparseable reply."""
    if stage not in FORMAT_REMINDERS:
        raise TemplateError(f"Unknown stage: {stage}")
    return f"{prompt}\n{FORMAT_REMINDERS[stage]}\n"


def list_templates() -> List[Dict[str, Any]]:
    return [
        {
            'key': key,
            'name': entry['name'],
            'stage': entry['stage'],
            'directive_kind': entry['directive_kind'].value if entry['directive_kind'] else None,
            'version': load_template(key)['version'],
            'status': load_template(key)['status'],
        }
        for key, entry in PROMPT_TEMPLATES.items()
    ]


if __name__ == "__main__":
    for info in list_templates():
        print(f"  - {info['key']} v{info['version']} [{info['status']}]")
