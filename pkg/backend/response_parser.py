"""
Strict Parsing of Reasoning-Model Replies

Every reply must carry the machine-readable answer slot its prompt asks for:
- DIRECTIVE: <reg-1> | <reg-2>   (also accepts ⟨reg-k⟩, any case, inner spaces)
- SELECTED: <n>
- ANSWER: yes | no

Nothing is guessed. A reply that does not conform raises a ParseError subclass
carrying the raw text so the trace can show what the model actually said.
"""

import re
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, Optional, Sequence

try:
    from .imagedb import QueryKind
except ImportError:
    from imagedb import QueryKind


class ParseError(Exception):
    """A model reply does not follow the required output format."""

    def __init__(self, message: str, raw_text: str):
        super().__init__(message)
        self.raw_text = raw_text


class NoDirectiveError(ParseError):
    pass


class ConflictingDirectiveError(ParseError):
    pass


class NoSelectionError(ParseError):
    pass


class SelectionOutOfRangeError(ParseError):
    pass


class ConflictingSelectionError(ParseError):
    pass


class MissingVerdictError(ParseError):
    pass


class AmbiguousVerdictError(ParseError):
    pass


TAG_PATTERN = re.compile(r'[<⟨]\s*reg\s*-\s*([12])\s*[>⟩]', re.IGNORECASE)
DIRECTIVE_LINE = re.compile(r'^[ \t*_>]*DIRECTIVE\s*:(.*)$', re.IGNORECASE | re.MULTILINE)
SELECTED_SLOT = re.compile(r'SELECTED\s*:\s*\**\s*(?:image\s*)?#?\s*(\d+)\b', re.IGNORECASE)
SELECTED_LINE = re.compile(r'^.*SELECTED\s*:.*$', re.IGNORECASE | re.MULTILINE)
IMAGE_REFERENCE = re.compile(r'\bimage\s*#?\s*(\d+)\b', re.IGNORECASE)
ANSWER_SLOT = re.compile(r'ANSWER\s*:\s*\**\s*(yes|no)(?![\w/|-])', re.IGNORECASE)
ANSWER_LINE = re.compile(r'^.*ANSWER\s*:.*$', re.IGNORECASE | re.MULTILINE)

TAG_KINDS = {'1': QueryKind.TEMPORAL, '2': QueryKind.ENLARGE}


class VerdictValue(Enum):
    YES = 'yes'
    NO = 'no'


@dataclass(frozen=True)
class QueryDirective:
    kind: QueryKind
    rationale_text: str
    region_id: Optional[int] = None

    def to_record(self) -> Dict[str, Any]:
        return {'kind': self.kind.value, 'rationale_text': self.rationale_text}


@dataclass(frozen=True)
class SelectionResult:
    chosen_candidate_id: int
    rationale_text: str

    def to_record(self) -> Dict[str, Any]:
        return {'chosen_candidate_id': self.chosen_candidate_id, 'rationale_text': self.rationale_text}


@dataclass(frozen=True)
class Verdict:
    value: VerdictValue
    rationale_text: str

    @property
    def is_farmland(self) -> bool:
        return self.value is VerdictValue.YES

    def to_record(self) -> Dict[str, Any]:
        return {'value': self.value.value, 'rationale_text': self.rationale_text}


def _strip_lines(text: str, pattern: re.Pattern) -> str:
    return pattern.sub('', text).strip()


def parse_directive(model_text: str, region_id: Optional[int] = None) -> QueryDirective:
    """
    Read the query directive of a System Prompt I reply.

    When the reply has DIRECTIVE: lines only their tags count; otherwise every
    tag in the text counts. Repeating the same tag is fine, mixing both is not.
    """
    directive_lines = DIRECTIVE_LINE.findall(model_text)
    scope = '\n'.join(directive_lines) if directive_lines else model_text
    kinds = {TAG_KINDS[digit] for digit in TAG_PATTERN.findall(scope)}

    if not kinds:
        raise NoDirectiveError("Reply contains no <reg-1>/<reg-2> directive", model_text)
    if len(kinds) > 1:
        raise ConflictingDirectiveError("Reply requests both temporal and enlarge images", model_text)

    rationale = TAG_PATTERN.sub('', _strip_lines(model_text, DIRECTIVE_LINE)).strip()
    return QueryDirective(kind=kinds.pop(), rationale_text=rationale, region_id=region_id)


def parse_selection(model_text: str, offered_ids: Sequence[int]) -> SelectionResult:
    """
    Read the chosen candidate index of a System Prompt II reply.

    Args:
        model_text: Raw reply
        offered_ids: Indices the prompt offered (1..N)

    Returns:
        SelectionResult whose chosen_candidate_id is one of offered_ids
    """
    if not offered_ids:
        raise ValueError("offered_ids must not be empty")
    offered = {int(i) for i in offered_ids}

    slot_values = {int(v) for v in SELECTED_SLOT.findall(model_text)}
    if slot_values:
        candidates = slot_values
        rationale = _strip_lines(model_text, SELECTED_LINE)
    else:
        candidates = {int(v) for v in IMAGE_REFERENCE.findall(model_text)}
        rationale = model_text.strip()

    if not candidates:
        raise NoSelectionError("Reply names no candidate image", model_text)
    if len(candidates) > 1:
        raise ConflictingSelectionError(
            f"Reply names several candidates: {sorted(candidates)}", model_text
        )

    chosen = candidates.pop()
    if chosen not in offered:
        raise SelectionOutOfRangeError(
            f"Candidate {chosen} was not offered (offered {sorted(offered)})", model_text
        )
    return SelectionResult(chosen_candidate_id=chosen, rationale_text=rationale)


def parse_verdict(model_text: str) -> Verdict:
    """Read the yes/no ANSWER slot of a System Prompt III reply."""
    values = {v.lower() for v in ANSWER_SLOT.findall(model_text)}
    if not values:
        raise MissingVerdictError("Reply has no `ANSWER: yes|no` line", model_text)
    if len(values) > 1:
        raise AmbiguousVerdictError("Reply answers both yes and no", model_text)
    return Verdict(
        value=VerdictValue(values.pop()),
        rationale_text=_strip_lines(model_text, ANSWER_LINE),
    )


def parse_error_record(error: ParseError) -> Dict[str, Any]:
    return {
        'error_type': type(error).__name__,
        'message': str(error),
        'raw_text': error.raw_text,
    }

