"""Charset, duration, text-LID and per-channel duplication filters."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable

from gsbuild.backends.client import BackendError, identify_language
from gsbuild.manifest import Manifest, Segment
from gsbuild.textnorm import LanguageProfile

CHARSET, DURATION, LID, BALANCE = "charset", "duration", "lid", "balance"
RULES = (CHARSET, DURATION, LID, BALANCE)

DEFAULT_LID_THRESHOLD = 0.90
DEFAULT_MIN_S = 2.0
DEFAULT_MAX_S = 30.0
DEFAULT_MAX_DUP = 5


@dataclass(frozen=True)
class Decision:
    retain: bool
    reason: str = ""

    @classmethod
    def ok(cls) -> "Decision":
        return cls(True)

    @classmethod
    def reject(cls, reason: str) -> "Decision":
        return cls(False, reason)


@dataclass(frozen=True)
class FilterConfig:
    charset: frozenset[int]
    lid_threshold: float = DEFAULT_LID_THRESHOLD
    min_duration_s: float = DEFAULT_MIN_S
    max_duration_s: float = DEFAULT_MAX_S
    max_dup_per_channel: int = DEFAULT_MAX_DUP
    enabled: frozenset[str] = frozenset(RULES)

    def __post_init__(self) -> None:
        if not 0.0 <= self.lid_threshold <= 1.0:
            raise ValueError(f"lid_threshold {self.lid_threshold} outside [0, 1]")
        if not self.min_duration_s < self.max_duration_s:
            raise ValueError("min_duration_s must be below max_duration_s")
        if self.max_dup_per_channel < 1:
            raise ValueError("max_dup_per_channel must be >= 1")
        unknown = set(self.enabled) - set(RULES)
        if unknown:
            raise ValueError(f"unknown filter rules {sorted(unknown)}")

    @classmethod
    def for_profile(cls, profile: LanguageProfile, **kw) -> "FilterConfig":
        return cls(charset=profile.charset, **kw)


@dataclass
class FilterReport:
    input_count: int = 0
    rejected: dict[str, int] = field(default_factory=lambda: {r: 0 for r in RULES})
    parked: dict[str, str] = field(default_factory=dict)
    retained_count: int = 0
    retained_hours: float = 0.0
    duplicates_suppressed: dict[str, int] = field(default_factory=dict)
    rejections: list[tuple[str, str, str]] = field(default_factory=list)  # (segment, rule, reason)

    def reconciles(self) -> bool:
        return sum(self.rejected.values()) + len(self.parked) + self.retained_count == self.input_count

    def to_record(self) -> dict:
        return {
            "input": self.input_count,
            "rejected": dict(self.rejected),
            "parked": len(self.parked),
            "retained": self.retained_count,
            "retained_hours": self.retained_hours,
            "duplicates_suppressed": dict(sorted(self.duplicates_suppressed.items())),
        }

    def table(self) -> str:
        rows = [f"{'rule':<10} {'rejected':>9}"]
        rows += [f"{rule:<10} {self.rejected[rule]:>9d}" for rule in RULES]
        rows.append(f"{'parked':<10} {len(self.parked):>9d}")
        rows.append(f"{'retained':<10} {self.retained_count:>9d}  ({self.retained_hours:.4f} h of {self.input_count} in)")
        return "\n".join(rows)


def charset_filter(s: Segment, charset: frozenset[int]) -> Decision:
    if not s.text.strip():
        return Decision.reject("empty-text")
    bad = sorted({c for c in s.text if ord(c) not in charset})
    if bad:
        return Decision.reject("chars outside charset: " + "".join(bad[:10]))
    return Decision.ok()


def duration_filter(s: Segment, min_s: float, max_s: float) -> Decision:
    d = s.end_s - s.start_s
    if d < min_s:
        return Decision.reject(f"duration {d:.3f}s below {min_s}s")
    if d > max_s:
        return Decision.reject(f"duration {d:.3f}s above {max_s}s")
    return Decision.ok()


def lid_decision(s: Segment, language: str, score: float, threshold: float) -> Decision:
    if language != s.language:
        return Decision.reject(f"language {language} != {s.language}")
    if score < threshold:
        return Decision.reject(f"LID confidence {score:.3f} below {threshold}")
    return Decision.ok()


def lid_filter(s: Segment, threshold: float, lid) -> tuple[Decision, Segment]:
    """Score one segment; raises ``BackendError`` if the backend cannot answer."""
    answers, parked = identify_language(lid, [(s.id, s.text)], parallelism=1)
    if s.id in parked:
        raise BackendError(f"LID failed for {s.id}: {parked[s.id]}")
    resp = answers[s.id]
    scored = replace(s, lid_score=resp.confidence) if resp.language == s.language else s
    return lid_decision(s, resp.language, resp.confidence, threshold), scored


def balance(segments: Iterable[Segment], max_dup_per_channel: int) -> tuple[list[Segment], list[Segment], dict[str, int]]:
    """Keep the earliest ``max_dup_per_channel`` copies of each transcript per channel.

    Returns (retained, suppressed, suppressed-count per channel).
    """
    ordered = sorted(segments, key=lambda s: (s.video, s.start_s, s.id))
    seen: dict[tuple[str, str], int] = defaultdict(int)
    kept, dropped = [], []
    per_channel: dict[str, int] = defaultdict(int)
    for s in ordered:
        key = (s.channel, s.text)
        seen[key] += 1
        if seen[key] <= max_dup_per_channel:
            kept.append(s)
        else:
            dropped.append(s)
            per_channel[s.channel] += 1
    return kept, dropped, dict(per_channel)


def apply_all(m: Manifest, cfg: FilterConfig, lid=None, parallelism: int = 8) -> tuple[Manifest, FilterReport]:
    """Run charset -> duration -> LID -> balance; the first failing rule is blamed.

    Segments that already carry an ``lid_score`` reuse it instead of querying
    the backend.  Segments the LID backend cannot score are parked.
    """
    report = FilterReport(input_count=len(m.segments))
    segs = m.ordered_segments()

    def reject(s: Segment, rule: str, reason: str) -> None:
        report.rejected[rule] += 1
        report.rejections.append((s.id, rule, reason))

    survivors = []
    for s in segs:
        if CHARSET in cfg.enabled:
            d = charset_filter(s, cfg.charset)
            if not d.retain:
                reject(s, CHARSET, d.reason)
                continue
        if DURATION in cfg.enabled:
            d = duration_filter(s, cfg.min_duration_s, cfg.max_duration_s)
            if not d.retain:
                reject(s, DURATION, d.reason)
                continue
        survivors.append(s)

    if LID in cfg.enabled:
        need = [s for s in survivors if s.lid_score is None]
        if need and lid is None:
            raise ValueError("LID rule enabled but no LID backend given")
        answers, parked = identify_language(lid, [(s.id, s.text) for s in need], parallelism) if need else ({}, {})
        report.parked.update(parked)
        passed = []
        for s in survivors:
            if s.id in parked:
                continue
            if s.lid_score is not None:
                d = lid_decision(s, s.language, s.lid_score, cfg.lid_threshold)
            else:
                resp = answers[s.id]
                d = lid_decision(s, resp.language, resp.confidence, cfg.lid_threshold)
                if resp.language == s.language:
                    s = replace(s, lid_score=resp.confidence)
            if d.retain:
                passed.append(s)
            else:
                reject(s, LID, d.reason)
        survivors = passed

    if BALANCE in cfg.enabled:
        survivors, dropped, per_channel = balance(survivors, cfg.max_dup_per_channel)
        for s in dropped:
            reject(s, BALANCE, f"duplicate transcript beyond cap {cfg.max_dup_per_channel}")
        report.duplicates_suppressed = per_channel

    report.retained_count = len(survivors)
    report.retained_hours = sum(s.duration_s for s in survivors) / 3600.0
    return m.with_segments(survivors), report


def rejected_manifest(m: Manifest, report: FilterReport) -> Manifest:
    """Side manifest holding every rejected or parked segment; reasons stay in the report."""
    ids = {sid for sid, _, _ in report.rejections} | set(report.parked)
    return m.with_segments(s for s in m.segments.values() if s.id in ids)


def recheck(s: Segment, cfg: FilterConfig) -> list[str]:
    """Rules (other than balance) that a segment violates, using its cached LID score."""
    bad = []
    if not charset_filter(s, cfg.charset).retain:
        bad.append(CHARSET)
    if not duration_filter(s, cfg.min_duration_s, cfg.max_duration_s).retain:
        bad.append(DURATION)
    if s.lid_score is None or s.lid_score < cfg.lid_threshold:
        bad.append(LID)
    return bad


def balance_violations(segments: Iterable[Segment], cap: int) -> list[tuple[str, str]]:
    counts: dict[tuple[str, str], int] = defaultdict(int)
    for s in segments:
        counts[(s.channel, s.text)] += 1
    return [k for k, n in counts.items() if n > cap]
