"""Edit distance, CER and WER."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

CHAR, WORD = "char", "word"
INF_RATE = math.inf  # empty reference, non-empty hypothesis


@dataclass(frozen=True)
class TokenSequence:
    tokens: tuple[str, ...]
    granularity: str

    def __len__(self) -> int:
        return len(self.tokens)


def tokenize(text: str, granularity: str) -> TokenSequence:
    if granularity == CHAR:
        return TokenSequence(tuple(c for c in text if not c.isspace()), CHAR)
    if granularity == WORD:
        return TokenSequence(tuple(text.split()), WORD)
    raise ValueError(f"unknown granularity {granularity!r}")


def levenshtein(a: Sequence, b: Sequence) -> int:
    """Unit-cost edit distance, two-row DP."""
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        cur = [i]
        for j, y in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def edit_distance(a: TokenSequence, b: TokenSequence) -> int:
    if a.granularity != b.granularity:
        raise ValueError(f"granularity mismatch: {a.granularity} vs {b.granularity}")
    return levenshtein(a.tokens, b.tokens)


def _rate(ref: TokenSequence, hyp: TokenSequence) -> float:
    if not ref.tokens:
        return 0.0 if not hyp.tokens else INF_RATE
    return edit_distance(ref, hyp) / len(ref.tokens)


def cer(ref: str, hyp: str) -> float:
    return _rate(tokenize(ref, CHAR), tokenize(hyp, CHAR))


def wer(ref: str, hyp: str) -> float:
    return _rate(tokenize(ref, WORD), tokenize(hyp, WORD))


def metric_for_language(language: str) -> str:
    """Thai is scored by CER, space-delimited languages by WER."""
    return CHAR if language == "th" else WORD


@dataclass(frozen=True)
class ScoreRecord:
    id: str
    metric: str
    edits: int
    ref_tokens: int

    @property
    def rate(self) -> float:
        if self.ref_tokens == 0:
            return 0.0 if self.edits == 0 else INF_RATE
        return self.edits / self.ref_tokens


def score_pairs(pairs: Iterable[tuple[str, str, str]], granularity: str) -> tuple[list[ScoreRecord], float]:
    """Per-pair records for (id, ref, hyp) triples plus the micro-averaged rate."""
    records = []
    for key, ref, hyp in pairs:
        r, h = tokenize(ref, granularity), tokenize(hyp, granularity)
        records.append(ScoreRecord(key, granularity, edit_distance(r, h), len(r)))
    edits = sum(r.edits for r in records)
    total = sum(r.ref_tokens for r in records)
    micro = edits / total if total else (0.0 if edits == 0 else INF_RATE)
    return records, micro
