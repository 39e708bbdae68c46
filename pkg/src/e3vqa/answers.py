"""Choice-letter extraction from model replies. Single point of truth for every method."""
from __future__ import annotations

import re
import threading
from typing import Optional, Sequence

from .core import ChoiceLetter

# Rule 1: standalone letter immediately followed by ')'; never inside a word.
_LETTER_PAREN_RE = re.compile(r"(?<![A-Za-z0-9])([A-Da-d])\)")
# Rule 2: standalone "(X)".
_PAREN_LETTER_RE = re.compile(r"(?<![A-Za-z0-9])\(([A-Da-d])\)")
# Rule 3: "answer is X" / "Answer: X", optional parentheses around the letter.
_ANSWER_IS_RE = re.compile(
    r"answer(?:\s+is|\s*:)\s*\(?([A-Da-d])\)?(?![A-Za-z0-9])", re.IGNORECASE
)

_counter_lock = threading.Lock()
_extraction_calls = 0


def extraction_call_count() -> int:
    """Process-wide count of extract_choice invocations (instrumentation)."""
    return _extraction_calls


def _normalize(text: str) -> str:
    return " ".join(text.casefold().split())


def extract_choice(text: str, options: Optional[Sequence[str]] = None) -> Optional[ChoiceLetter]:
    """Map a free-form reply to a choice letter; None means Unparsed.

    Rule cascade, first hit wins:
      1. standalone letter followed by ')', e.g. "B) Frying pan"
      2. standalone "(X)"
      3. "answer is X" / "Answer: X"
      4. exact or unique-substring match against the option strings
    Letters match case-insensitively; rule 4 is skipped when options are absent.
    """
    global _extraction_calls
    with _counter_lock:
        _extraction_calls += 1

    match = _LETTER_PAREN_RE.search(text)
    if match:
        return ChoiceLetter.from_letter(match.group(1))
    match = _PAREN_LETTER_RE.search(text)
    if match:
        return ChoiceLetter.from_letter(match.group(1))
    match = _ANSWER_IS_RE.search(text)
    if match:
        return ChoiceLetter.from_letter(match.group(1))

    if options:
        normalized = _normalize(text)
        if normalized:
            option_keys = [_normalize(o) for o in options]
            for i, key in enumerate(option_keys):
                if key and key == normalized:
                    return ChoiceLetter.from_index(i)
            contained = [i for i, key in enumerate(option_keys) if key and key in normalized]
            if len(contained) == 1:
                return ChoiceLetter.from_index(contained[0])
            within = [i for i, key in enumerate(option_keys) if key and normalized in key]
            if len(within) == 1:
                return ChoiceLetter.from_index(within[0])
    return None
