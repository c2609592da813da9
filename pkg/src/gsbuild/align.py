"""CTC forced alignment over precomputed emission matrices.

The aligner runs Viterbi over the usual expanded state graph: for ``L``
tokens there are ``2L + 1`` states, even indices are blanks and odd index
``2k + 1`` emits token ``k``.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

MAGIC = b"EMIS1"
_HEADER = struct.Struct("<IIIif")
MAX_CELLS = 1 << 31

DEFAULT_GAP_S = 0.5
DEFAULT_MIN_S = 1.0
DEFAULT_MAX_S = 30.0

_EPS = 1e-9


class EmissionError(ValueError):
    """Malformed emission file or matrix."""


class EmissionMagicError(EmissionError):
    pass


class EmissionShapeError(EmissionError):
    pass


class EmissionNaNError(EmissionError):
    pass


class AlignmentError(ValueError):
    pass


class InfeasibleAlignmentError(AlignmentError):
    """Too few frames to emit the token sequence under CTC rules."""


@dataclass(frozen=True)
class EmissionMatrix:
    log_probs: np.ndarray  # (T, V) float
    frame_duration_s: float
    vocab: tuple[str, ...]
    blank_index: int = 0
    star_index: Optional[int] = None

    def __post_init__(self) -> None:
        lp = self.log_probs
        if lp.ndim != 2:
            raise EmissionShapeError(f"log_probs must be 2-D, got shape {lp.shape}")
        T, V = lp.shape
        if T == 0 or V == 0:
            raise EmissionShapeError(f"empty emission matrix {lp.shape}")
        if len(self.vocab) != V:
            raise EmissionShapeError(f"vocab has {len(self.vocab)} entries, matrix has {V} columns")
        if not 0 <= self.blank_index < V:
            raise EmissionShapeError(f"blank index {self.blank_index} outside [0, {V})")
        if self.star_index is not None and not 0 <= self.star_index < V:
            raise EmissionShapeError(f"star index {self.star_index} outside [0, {V})")
        if not (self.frame_duration_s > 0 and math.isfinite(self.frame_duration_s)):
            raise EmissionShapeError(f"bad frame duration {self.frame_duration_s}")
        if np.isnan(lp).any():
            raise EmissionNaNError("emission matrix contains NaN")

    @property
    def num_frames(self) -> int:
        return self.log_probs.shape[0]

    def is_normalized(self, tol: float = 1e-3) -> bool:
        lp = self.log_probs.astype(np.float64)
        peak = lp.max(axis=1, keepdims=True)
        lse = peak[:, 0] + np.log(np.exp(lp - peak).sum(axis=1))
        return bool(np.all(np.abs(lse) <= tol))

    def index(self) -> dict[str, int]:
        return {sym: i for i, sym in enumerate(self.vocab)}


def dumps_emissions(e: EmissionMatrix) -> bytes:
    T, V = e.log_probs.shape
    star = -1 if e.star_index is None else e.star_index
    parts = [MAGIC, _HEADER.pack(T, V, e.blank_index, star, e.frame_duration_s),
             np.ascontiguousarray(e.log_probs, dtype="<f4").tobytes()]
    for sym in e.vocab:
        raw = sym.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    return b"".join(parts)


def loads_emissions(data: bytes) -> EmissionMatrix:
    if data[:len(MAGIC)] != MAGIC:
        raise EmissionMagicError("missing EMIS1 magic")
    pos = len(MAGIC)
    if len(data) < pos + _HEADER.size:
        raise EmissionShapeError("truncated header")
    T, V, blank, star, frame_dur = _HEADER.unpack_from(data, pos)
    pos += _HEADER.size
    if T == 0 or V == 0:
        raise EmissionShapeError(f"empty shape T={T} V={V}")
    cells = T * V
    if cells > MAX_CELLS or pos + 4 * cells > len(data):
        raise EmissionShapeError(f"shape {T}x{V} exceeds the {len(data) - pos} payload bytes")
    log_probs = np.frombuffer(data, dtype="<f4", count=cells, offset=pos).reshape(T, V).copy()
    pos += 4 * cells
    vocab = []
    for _ in range(V):
        if pos + 4 > len(data):
            raise EmissionShapeError("truncated vocab table")
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + n > len(data):
            raise EmissionShapeError("truncated vocab entry")
        try:
            vocab.append(data[pos:pos + n].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise EmissionError(f"vocab entry is not UTF-8: {exc}") from exc
        pos += n
    return EmissionMatrix(log_probs, float(frame_dur), tuple(vocab), blank, None if star < 0 else star)


def save_emissions(e: EmissionMatrix, path: str | Path) -> None:
    Path(path).write_bytes(dumps_emissions(e))


def load_emissions(path: str | Path) -> EmissionMatrix:
    return loads_emissions(Path(path).read_bytes())


# ------------------------------------------------------------------- viterbi

@dataclass(frozen=True)
class AlignmentPath:
    states: tuple[int, ...]
    total_log_score: float
    tokens: tuple[int, ...]

    def labels(self, blank: int) -> list[int]:
        """Vocabulary index emitted at every frame."""
        return [blank if s % 2 == 0 else self.tokens[s // 2] for s in self.states]


def min_frames(tokens: Sequence[int]) -> int:
    repeats = sum(1 for a, b in zip(tokens, tokens[1:]) if a == b)
    return len(tokens) + repeats


def viterbi_align(e: EmissionMatrix, tokens: Sequence[int]) -> AlignmentPath:
    """Best CTC path for a known token sequence.

    Ties prefer staying in a state over advancing, then the lower predecessor
    state; at the end the lower of the two final states wins.
    """
    tokens = tuple(int(t) for t in tokens)
    if not tokens:
        raise AlignmentError("token sequence is empty")
    V = e.log_probs.shape[1]
    for t in tokens:
        if t == e.blank_index:
            raise AlignmentError("token sequence contains the blank symbol")
        if not 0 <= t < V:
            raise AlignmentError(f"token {t} outside vocabulary of size {V}")
    T = e.num_frames
    need = min_frames(tokens)
    if T < need:
        raise InfeasibleAlignmentError(f"{T} frames cannot hold {len(tokens)} tokens (need {need})")

    S = 2 * len(tokens) + 1
    labels = np.full(S, e.blank_index, dtype=np.int64)
    labels[1::2] = tokens
    skip_ok = np.zeros(S, dtype=bool)
    for s in range(3, S, 2):
        skip_ok[s] = labels[s] != labels[s - 2]

    lp = e.log_probs.astype(np.float64)
    emit = lp[:, labels]  # (T, S)
    neg = -np.inf
    score = np.full(S, neg)
    score[0] = emit[0, 0]
    score[1] = emit[0, 1]
    back = np.zeros((T, S), dtype=np.int8)
    for t in range(1, T):
        stay = score
        adv1 = np.concatenate(([neg], score[:-1]))
        adv2 = np.where(skip_ok, np.concatenate(([neg, neg], score[:-2])), neg)
        cand = np.stack([stay, adv2, adv1])
        choice = np.argmax(cand, axis=0)  # first max: stay, then s-2, then s-1
        best = cand[choice, np.arange(S)]
        back[t] = np.array([0, 2, 1], dtype=np.int8)[choice]
        score = best + emit[t]

    finals = [S - 2, S - 1] if S >= 2 else [S - 1]
    end = max(finals, key=lambda s: (score[s], -s))
    total = float(score[end])
    if total == neg:
        raise InfeasibleAlignmentError("no path with finite score")
    states = [end]
    for t in range(T - 1, 0, -1):
        states.append(states[-1] - int(back[t, states[-1]]))
    states.reverse()
    return AlignmentPath(tuple(states), total, tokens)


def path_score(e: EmissionMatrix, path: AlignmentPath) -> float:
    lp = e.log_probs.astype(np.float64)
    total = 0.0
    for t, sym in enumerate(path.labels(e.blank_index)):
        total += lp[t, sym]
    return total


def is_valid_path(states: Sequence[int], tokens: Sequence[int]) -> bool:
    S = 2 * len(tokens) + 1
    if not states or states[0] not in (0, 1) or states[-1] not in (S - 1, S - 2):
        return False
    for a, b in zip(states, states[1:]):
        step = b - a
        if step in (0, 1):
            continue
        if step == 2 and b % 2 == 1 and tokens[b // 2] != tokens[b // 2 - 1]:
            continue
        return False
    return True


# --------------------------------------------------------------------- spans

@dataclass(frozen=True)
class TokenSpan:
    token: int  # position in the token sequence
    start_frame: int
    end_frame: int  # inclusive
    start_s: float
    end_s: float
    mean_log_score: float


def token_spans(p: AlignmentPath, e: EmissionMatrix) -> list[TokenSpan]:
    lp = e.log_probs.astype(np.float64)
    dur = e.frame_duration_s
    spans = []
    t = 0
    T = len(p.states)
    while t < T:
        s = p.states[t]
        if s % 2 == 0:
            t += 1
            continue
        u = t
        while u + 1 < T and p.states[u + 1] == s:
            u += 1
        k = s // 2
        sym = p.tokens[k]
        spans.append(TokenSpan(k, t, u, t * dur, (u + 1) * dur, float(lp[t:u + 1, sym].mean())))
        t = u + 1
    return spans


@dataclass(frozen=True)
class Utterance:
    start_s: float
    end_s: float
    first_token: int
    last_token: int  # exclusive

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s


def _split_long(run: list[TokenSpan], max_s: float) -> list[list[TokenSpan]]:
    if len(run) < 2 or run[-1].end_s - run[0].start_s <= max_s + _EPS:
        return [run]
    gaps = [run[i + 1].start_s - run[i].end_s for i in range(len(run) - 1)]
    cut = max(range(len(gaps)), key=lambda i: (gaps[i], -i)) + 1
    return _split_long(run[:cut], max_s) + _split_long(run[cut:], max_s)


def segment_utterances(spans: Sequence[TokenSpan], gap_s: float = DEFAULT_GAP_S, min_s: float = DEFAULT_MIN_S,
                       max_s: float = DEFAULT_MAX_S) -> tuple[list[Utterance], list[Utterance]]:
    """Group token spans into utterances at silences of at least ``gap_s``.

    Returns (kept, dropped); dropped utterances are shorter than ``min_s``.
    """
    if not spans:
        return [], []
    runs: list[list[TokenSpan]] = [[spans[0]]]
    for prev, cur in zip(spans, spans[1:]):
        if cur.start_s - prev.end_s >= gap_s - _EPS:
            runs.append([cur])
        else:
            runs[-1].append(cur)
    kept: list[Utterance] = []
    dropped: list[Utterance] = []
    for run in runs:
        for piece in _split_long(run, max_s):
            utt = Utterance(piece[0].start_s, piece[-1].end_s, piece[0].token, piece[-1].token + 1)
            (kept if utt.duration_s >= min_s - _EPS else dropped).append(utt)
    return kept, dropped
