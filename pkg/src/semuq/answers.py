"""Rule-based answer normalization used by the judges and the binary probe clustering."""
from __future__ import annotations

import re
import string

YES, NO, UNKNOWN = "yes", "no", "unknown"

YES_LEXICON = frozenset({"yes", "yeah", "correct", "true", "present"})
NO_LEXICON = frozenset({"no", "not", "absent", "false", "negative"})

# checked in order, negative phrases first so "there is no" never reads as yes
_NO_PHRASES = ("there is no", "there are no", "no evidence", "is not", "are not", "absent", "negative")
_YES_PHRASES = ("there is a", "there is an", "there are", "is present", "are present", "is seen", "yes")

_PUNCT = str.maketrans({c: " " for c in string.punctuation})
_WS = re.compile(r"\s+")


def normalize_text(text: str) -> str:
    """Lowercase, replace punctuation with spaces and collapse whitespace."""
    return _WS.sub(" ", text.lower().translate(_PUNCT)).strip()


def normalize_answer(text: str) -> str:
    """Map a free-text answer to ``"yes"``, ``"no"`` or ``"unknown"``."""
    norm = normalize_text(text)
    if not norm:
        return UNKNOWN
    first = norm.split(" ", 1)[0]
    if first in YES_LEXICON:
        return YES
    if first in NO_LEXICON:
        return NO
    padded = f" {norm} "
    if any(f" {p} " in padded for p in _NO_PHRASES):
        return NO
    if any(f" {p} " in padded for p in _YES_PHRASES):
        return YES
    return UNKNOWN
