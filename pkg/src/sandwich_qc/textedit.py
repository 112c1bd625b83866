"""Unit segmentation, span-edit extraction and the F0.5 / accuracy metrics.

Units are extended grapheme clusters when the text has no ASCII whitespace,
otherwise whitespace-delimited tokens with the whitespace runs kept as their
own units (so edits always round-trip to the exact target string).
"""
from __future__ import annotations

import unicodedata
from dataclasses import dataclass, field

import regex

GRAPHEME = "grapheme"
SPACED = "spaced"

_ASCII_WS = frozenset(" \t\n\r\x0b\x0c")
_GRAPHEME_RE = regex.compile(r"\X")
_SPACED_RE = regex.compile(r"\s+|\S+")


def has_ascii_space(text: str) -> bool:
    return any(ch in _ASCII_WS for ch in text)


def unit_mode(*texts: str) -> str:
    """Pick one segmentation mode shared by every text being compared."""
    return SPACED if any(has_ascii_space(t) for t in texts) else GRAPHEME


def segment(text: str, mode: str | None = None) -> list[str]:
    if mode is None:
        mode = unit_mode(text)
    if mode == SPACED:
        return _SPACED_RE.findall(text)
    if text.isascii():
        # no ASCII whitespace here, so every ASCII char is its own cluster
        return list(text)
    return _GRAPHEME_RE.findall(text)


def normalize(text: str) -> str:
    """NFC + outer whitespace trim; the comparison key used everywhere."""
    return unicodedata.normalize("NFC", text).strip()


@dataclass(frozen=True, order=True)
class Edit:
    start: int
    end: int
    replacement: tuple[str, ...] = ()

    def __post_init__(self):
        if not 0 <= self.start <= self.end:
            raise ValueError(f"bad edit range [{self.start}, {self.end})")
        if self.start == self.end and not self.replacement:
            raise ValueError("no-op edit")

    @property
    def text(self) -> str:
        return "".join(self.replacement)


@dataclass(frozen=True)
class EditSet:
    source: str
    units: tuple[str, ...]
    edits: tuple[Edit, ...] = field(default_factory=tuple)
    mode: str = GRAPHEME

    def __len__(self) -> int:
        return len(self.edits)

    def __iter__(self):
        return iter(self.edits)

    def apply(self) -> str:
        return apply_edits(self.units, self.edits)


def apply_edits(units, edits) -> str:
    out = list(units)
    for e in sorted(edits, key=lambda e: e.start, reverse=True):
        if e.end > len(out):
            raise ValueError(f"edit {e} exceeds source length {len(out)}")
        out[e.start:e.end] = list(e.replacement)
    return "".join(out)


def align(a: list[str], b: list[str]) -> list[str]:
    """Minimal-cost alignment as a forward list of ops ("M", "S", "D", "I").

    Traceback walks from the end preferring diagonal (match/substitution),
    then deletion, then insertion; this pushes edits as far left as the
    optimal cost allows.
    """
    n, m = len(a), len(b)
    cost = [list(range(m + 1))]
    for i in range(1, n + 1):
        prev = cost[-1]
        ai = a[i - 1]
        row = [i] * (m + 1)
        for j in range(1, m + 1):
            best = prev[j - 1] + (ai != b[j - 1])
            d = prev[j] + 1
            if d < best:
                best = d
            ins = row[j - 1] + 1
            if ins < best:
                best = ins
            row[j] = best
        cost.append(row)

    ops = []
    i, j = n, m
    while i or j:
        c = cost[i][j]
        if i and j:
            sub = a[i - 1] != b[j - 1]
            if cost[i - 1][j - 1] + sub == c:
                ops.append("S" if sub else "M")
                i -= 1
                j -= 1
                continue
        if i and cost[i - 1][j] + 1 == c:
            ops.append("D")
            i -= 1
        else:
            ops.append("I")
            j -= 1
    ops.reverse()
    return ops


def edits_from_ops(ops, b: list[str]) -> tuple[Edit, ...]:
    """Merge runs of adjacent non-match ops into maximal span edits."""
    edits = []
    i = j = 0
    span = None
    for op in ops:
        if op == "M":
            if span is not None:
                edits.append(Edit(span[0], i, tuple(b[span[1]:j])))
                span = None
            i += 1
            j += 1
            continue
        if span is None:
            span = (i, j)
        if op in ("S", "D"):
            i += 1
        if op in ("S", "I"):
            j += 1
    if span is not None:
        edits.append(Edit(span[0], i, tuple(b[span[1]:j])))
    return tuple(edits)


def extract_edits(source: str, target: str, mode: str | None = None) -> EditSet:
    if mode is None:
        mode = unit_mode(source, target)
    a = segment(source, mode)
    b = segment(target, mode)
    if a == b:
        return EditSet(source, tuple(a), (), mode)
    return EditSet(source, tuple(a), edits_from_ops(align(a, b), b), mode)


def f_half_from_sets(hyp, gold) -> float:
    hyp, gold = set(hyp), set(gold)
    if not hyp and not gold:
        return 1.0
    if not hyp or not gold:
        return 0.0
    tp = len(hyp & gold)
    if tp == 0:
        return 0.0
    p = tp / len(hyp)
    r = tp / len(gold)
    return 1.25 * p * r / (0.25 * p + r)


def f_half_score(hypothesis: str, q_noise: str, q_clean: str, mode: str | None = None) -> float:
    """Edit-level F0.5 of ``hypothesis`` against the gold correction.

    Both edit sets are taken relative to ``q_noise`` under one shared unit
    mode, and a hypothesis edit counts only on an exact (range, replacement)
    match. Passing ``mode=GRAPHEME`` forces character-level edits even for
    spaced text.
    """
    if mode is None:
        mode = unit_mode(hypothesis, q_noise, q_clean)
    hyp = extract_edits(q_noise, hypothesis, mode).edits
    gold = extract_edits(q_noise, q_clean, mode).edits
    return f_half_from_sets(hyp, gold)


def accuracy(hypothesis: str, q_clean: str) -> int:
    return int(normalize(hypothesis) == normalize(q_clean))
