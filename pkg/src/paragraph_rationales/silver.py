"""Silver rationale extraction from references to fact paragraphs.

Judgments cite their own facts as "see paragraph 7 above", "paragraphs 2
and 4", "paragraphs 10-12" and so on.  Citations of other judgments
("Draci v. Russia, no. 25452/05, paragraph 58") are left alone: a reference
is dropped when its clause names a case, or when it continues with "of ..."
(a pointer into some other document).
"""

from __future__ import annotations

import re
from typing import Iterable

_NUM = r"\d{1,4}"
_RANGE_SEP = r"\s*(?:-|\u2013|\u2014|\bto\b)\s*"
_ITEM = rf"{_NUM}(?:{_RANGE_SEP}{_NUM})?"
_LIST_SEP = r"\s*(?:,\s*and\b|,|\band\b|&)\s*"

REFERENCE_RE = re.compile(
    rf"\b(?:paragraphs?|paras?\.?)\s+(?P<items>{_ITEM}(?:{_LIST_SEP}{_ITEM})*)",
    re.IGNORECASE,
)
_FOREIGN_RE = re.compile(r"[\d/]|\s+of\b", re.IGNORECASE)
# Where the clause holding a reference begins: an opening bracket, a
# semicolon, a "see", the close of a "(see ...)" aside, or a sentence end that
# is not one of the citation abbreviations.
_CLAUSE_START_RE = re.compile(
    r"[();\n]|\bsee\b|(?<!\bv)(?<!\bvs)(?<!\bno)(?<!\bnos)[.!?]\s+(?=[A-Z])",
    re.IGNORECASE,
)
_CASE_LAW_RE = re.compile(r"\bvs?\.|\bnos?\.\s*\d|\d+/\d+|\bjudgment\b|\bcited above\b", re.IGNORECASE)
_LOOKBACK = 300
_ITEM_RE = re.compile(rf"(?P<start>{_NUM})(?:{_RANGE_SEP}(?P<end>{_NUM}))?", re.IGNORECASE)


def _items(fragment: str) -> Iterable[int]:
    for m in _ITEM_RE.finditer(fragment):
        start = int(m.group("start"))
        end = int(m.group("end")) if m.group("end") else start
        if end < start:
            continue
        yield from range(start, end + 1)


def _cites_other_case(text: str, start: int) -> bool:
    window_start = max(0, start - _LOOKBACK)
    window = text[window_start:start]
    clause_start = 0
    for m in _CLAUSE_START_RE.finditer(window):
        token = m.group()
        if token == ")":
            opening = window.rfind("(", 0, m.start())
            if opening < 0 or not window[opening + 1:m.start()].lstrip().lower().startswith("see"):
                continue  # part of a case name such as "(no. 2)"
        clause_start = m.start() if token.lower() == "see" else m.end()
    return bool(_CASE_LAW_RE.search(window[clause_start:]))


def extract_silver_rationales(decision_text: str, n_facts: int) -> set[int]:
    """0-based indices of the fact paragraphs referenced in ``decision_text``.

    Paragraph numbers in the text are 1-based; numbers beyond ``n_facts``
    are discarded.
    """
    found: set[int] = set()
    for m in REFERENCE_RE.finditer(decision_text):
        if _FOREIGN_RE.match(decision_text, m.end()) or _cites_other_case(decision_text, m.start()):
            continue
        for number in _items(m.group("items")):
            if 1 <= number <= n_facts:
                found.add(number - 1)
    return found


def render_references(indices: Iterable[int]) -> str:
    """Inverse of extraction for a set of 0-based indices."""
    numbers = [str(i + 1) for i in sorted(set(indices))]
    if not numbers:
        return ""
    if len(numbers) == 1:
        return f"See paragraph {numbers[0]}."
    return f"See paragraphs {', '.join(numbers[:-1])} and {numbers[-1]}."
