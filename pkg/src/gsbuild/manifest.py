"""Corpus ledger: videos, segments, channel split assignment, persistence and stats."""
from __future__ import annotations

import hashlib
import json
import logging
import math
import random
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Optional

from gsbuild.audio import WavError, read_wav

log = logging.getLogger(__name__)

TRAIN, DEV, TEST, UNASSIGNED = "TRAIN", "DEV", "TEST", "UNASSIGNED"
SPLITS = (TRAIN, DEV, TEST, UNASSIGNED)

WHISPER = "whisper"
MANUAL = "manual"

TOPICS = frozenset({
    "Agriculture", "Art", "Business", "Climate", "Culture", "Economics", "Education",
    "Entertainment", "Health", "History", "Literature", "Music", "Politics",
    "Relationships", "Shopping", "Society", "Sport", "Technology", "Travel",
})
FORMATS = frozenset({"Audiobook", "Commentary", "Lecture", "Monologue", "Movie", "News", "Talk", "Vlog"})

SEGMENT_ORDINAL_WIDTH = 6


def teacher_source(iteration: int) -> str:
    if iteration < 1:
        raise ValueError(f"teacher iteration must be >= 1, got {iteration}")
    return f"teacher:{iteration}"


def segment_id(video_id: str, ordinal: int) -> str:
    return f"{video_id}_{ordinal:0{SEGMENT_ORDINAL_WIDTH}d}"


@dataclass(frozen=True)
class VideoRecord:
    id: str
    channel: str
    path: str
    duration_s: float
    sample_rate_hz: int
    channels: int = 1
    detected_language: Optional[str] = None
    language_prob: Optional[float] = None
    topic: Optional[str] = None
    format: Optional[str] = None


@dataclass(frozen=True)
class Segment:
    id: str
    video: str
    channel: str
    start_s: float
    end_s: float
    text: str
    raw_text: str
    language: str
    source: str = WHISPER
    lid_score: Optional[float] = None
    cer_vs_prev: Optional[float] = None

    @property
    def duration_s(self) -> float:
        return self.end_s - self.start_s

    def validate(self, video: Optional[VideoRecord] = None) -> None:
        if not 0 <= self.start_s < self.end_s:
            raise ValueError(f"{self.id}: bad bounds [{self.start_s}, {self.end_s}]")
        if video is not None and self.end_s > video.duration_s + 1e-6:
            raise ValueError(f"{self.id}: ends after its video ({video.duration_s} s)")
        if self.source.startswith("teacher:") and int(self.source.split(":", 1)[1]) < 1:
            raise ValueError(f"{self.id}: bad teacher source {self.source}")


@dataclass(frozen=True)
class Manifest:
    language: str
    videos: dict[str, VideoRecord] = field(default_factory=dict)
    segments: dict[str, Segment] = field(default_factory=dict)
    split_assignment: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        for seg in self.segments.values():
            video = self.videos.get(seg.video)
            if video is None:
                raise ValueError(f"segment {seg.id} references unknown video {seg.video}")
            seg.validate(video)
            if seg.channel not in self.split_assignment:
                raise ValueError(f"channel {seg.channel} has no split entry")
        for ch, split in self.split_assignment.items():
            if split not in SPLITS:
                raise ValueError(f"channel {ch}: unknown split {split}")

    def channels(self) -> list[str]:
        return sorted({v.channel for v in self.videos.values()})

    def split_of(self, seg: Segment) -> str:
        return self.split_assignment.get(seg.channel, UNASSIGNED)

    def with_segments(self, segments: Iterable[Segment]) -> "Manifest":
        segs = {s.id: s for s in segments}
        splits = dict(self.split_assignment)
        for s in segs.values():
            splits.setdefault(s.channel, UNASSIGNED)
        return replace(self, segments=segs, split_assignment=splits)

    def ordered_segments(self) -> list[Segment]:
        return [self.segments[k] for k in sorted(self.segments)]

    def channel_hours(self) -> dict[str, float]:
        """Hours per channel: segment hours when segments exist, else video hours."""
        hours: dict[str, float] = defaultdict(float)
        if self.segments:
            for seg in self.ordered_segments():
                hours[seg.channel] += seg.duration_s / 3600.0
        else:
            for vid in sorted(self.videos):
                v = self.videos[vid]
                hours[v.channel] += v.duration_s / 3600.0
        return dict(hours)


# ---------------------------------------------------------------- persistence

def format_seconds(x: float) -> str:
    return f"{x:.6f}"


_TIME_FIELDS = {"start_s", "end_s", "duration_s"}


def _encode_record(kind: str, payload: dict) -> str:
    parts = [f'"kind": {json.dumps(kind)}']
    for key, value in payload.items():
        if key in _TIME_FIELDS and value is not None:
            rendered = format_seconds(value)
        else:
            rendered = json.dumps(value, ensure_ascii=False, sort_keys=True)
        parts.append(f"{json.dumps(key)}: {rendered}")
    return "{" + ", ".join(parts) + "}"


def dumps_manifest(m: Manifest) -> str:
    lines = [_encode_record("header", {"language": m.language, "version": 1})]
    for vid in sorted(m.videos):
        lines.append(_encode_record("video", asdict(m.videos[vid])))
    for seg in m.ordered_segments():
        lines.append(_encode_record("segment", asdict(seg)))
    for ch in sorted(m.split_assignment):
        lines.append(_encode_record("split", {"channel": ch, "split": m.split_assignment[ch]}))
    return "\n".join(lines) + "\n"


def loads_manifest(text: str) -> Manifest:
    language = ""
    videos: dict[str, VideoRecord] = {}
    segments: dict[str, Segment] = {}
    splits: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            kind = rec.pop("kind")
            if kind == "header":
                language = rec["language"]
            elif kind == "video":
                videos[rec["id"]] = VideoRecord(**rec)
            elif kind == "segment":
                segments[rec["id"]] = Segment(**rec)
            elif kind == "split":
                splits[rec["channel"]] = rec["split"]
            else:
                raise ValueError(f"unknown record kind {kind!r}")
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"manifest line {lineno}: {exc}") from exc
    return Manifest(language, videos, segments, splits)


def save_manifest(m: Manifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(dumps_manifest(m), encoding="utf-8")
    tmp.replace(path)


def load_manifest(path: str | Path) -> Manifest:
    return loads_manifest(Path(path).read_text(encoding="utf-8"))


def content_hash(data: bytes) -> str:
    """64-bit content hash used to stamp artifacts."""
    return hashlib.blake2b(data, digest_size=8).hexdigest()


# ------------------------------------------------------------------ ingestion

@dataclass(frozen=True)
class IngestIssue:
    path: str
    error: str


def _probe(channel: str, path: Path) -> VideoRecord:
    buf = read_wav(path)
    if buf.frames == 0:
        raise WavError("no audio frames")
    return VideoRecord(
        id=f"{channel}-{path.stem}",
        channel=channel,
        path=str(path),
        duration_s=buf.duration_s,
        sample_rate_hz=buf.sample_rate_hz,
        channels=buf.channels,
    )


def ingest_audio_dir(root: str | Path, language: str, workers: int = 4) -> tuple[Manifest, list[IngestIssue]]:
    """Build a segment-less manifest from ``root/<channel>/<video>.wav``.

    Unreadable files do not abort ingestion; they are returned as issues.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"audio root {root} does not exist")
    jobs = [(ch.name, wav) for ch in sorted(p for p in root.iterdir() if p.is_dir())
            for wav in sorted(ch.glob("*.wav"))]

    def work(job: tuple[str, Path]) -> VideoRecord | IngestIssue:
        channel, path = job
        try:
            return _probe(channel, path)
        except (OSError, WavError, ValueError) as exc:
            return IngestIssue(str(path), f"{type(exc).__name__}: {exc}")

    videos: dict[str, VideoRecord] = {}
    issues: list[IngestIssue] = []
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        for result in pool.map(work, jobs):
            if isinstance(result, IngestIssue):
                issues.append(result)
            elif result.id in videos:
                issues.append(IngestIssue(result.path, f"duplicate video id {result.id}"))
            else:
                videos[result.id] = result
    splits = {v.channel: UNASSIGNED for v in videos.values()}
    return Manifest(language, videos, {}, splits), issues


def check_taxonomy(video: VideoRecord) -> list[str]:
    warnings = []
    if video.topic is not None and video.topic not in TOPICS:
        warnings.append(f"{video.id}: topic {video.topic!r} outside the controlled vocabulary")
    if video.format is not None and video.format not in FORMATS:
        warnings.append(f"{video.id}: format {video.format!r} outside the controlled vocabulary")
    return warnings


# --------------------------------------------------------------------- splits

class SplitError(ValueError):
    pass


def _ordered_channels(hours: dict[str, float], seed: int) -> list[str]:
    rng = random.Random(seed)
    keys = {ch: rng.random() for ch in sorted(hours)}
    return sorted(hours, key=lambda ch: (-hours[ch], keys[ch]))


def _within(value: float, target: float, tol: float) -> bool:
    return abs(value - target) <= tol * target + 1e-9


def _closest_subset(hours: list[float], target: float, limit: int = 200_000) -> float:
    sums = {0.0}
    for h in hours:
        sums |= {round(s + h, 6) for s in sums}
        if len(sums) > limit:
            break
    return min(sums, key=lambda s: (abs(s - target), s))


def _subset_search(order: list[str], hours: dict[str, float], target: float, tol: float) -> Optional[list[str]]:
    # Depth-first search over channels in descending-hours order; first hit wins,
    # so the result stays deterministic for a fixed order.
    hi = target * (1 + tol) + 1e-9
    lo = target * (1 - tol) - 1e-9
    suffix = [0.0] * (len(order) + 1)
    for i in range(len(order) - 1, -1, -1):
        suffix[i] = suffix[i + 1] + hours[order[i]]
    budget = [100_000]

    def dfs(i: int, total: float, picked: list[str]) -> Optional[list[str]]:
        if lo <= total <= hi:
            return list(picked)
        budget[0] -= 1
        if i == len(order) or total + suffix[i] < lo or budget[0] <= 0:
            return None
        ch = order[i]
        if total + hours[ch] <= hi:
            picked.append(ch)
            found = dfs(i + 1, total + hours[ch], picked)
            picked.pop()
            if found is not None:
                return found
        return dfs(i + 1, total, picked)

    return dfs(0, 0.0, [])


def assign_splits(m: Manifest, dev_target_h: float, test_target_h: float, seed: int,
                  tolerance: float = 0.10) -> Manifest:
    """Channel-atomic DEV/TEST/TRAIN assignment.

    Channels are visited in descending-hours order (seeded tie-break) and packed
    greedily into DEV, then TEST, while the split is below target and the
    channel fits under the upper tolerance.  When greedy packing misses a
    target, a bounded subset search over the remaining channels is tried before
    giving up.
    """
    hours = m.channel_hours()
    total = sum(hours.values())
    if dev_target_h < 0 or test_target_h < 0:
        raise SplitError("split targets must be non-negative")
    if (dev_target_h or test_target_h) and dev_target_h + test_target_h >= total:
        raise SplitError(f"targets {dev_target_h} + {test_target_h} h exceed corpus total {total:.3f} h")
    order = _ordered_channels(hours, seed)

    assignment = {ch: TRAIN for ch in order}
    for name, target in ((DEV, dev_target_h), (TEST, test_target_h)):
        if target <= 0:
            continue
        free = [ch for ch in order if assignment[ch] == TRAIN]
        got = 0.0
        picked = []
        for ch in free:
            if got < target and got + hours[ch] <= target * (1 + tolerance) + 1e-9:
                picked.append(ch)
                got += hours[ch]
        if not _within(got, target, tolerance):
            found = _subset_search(free, hours, target, tolerance)
            if found is None:
                closest = _closest_subset([hours[ch] for ch in free], target)
                raise SplitError(
                    f"{name} target {target} h unattainable at channel granularity: "
                    f"greedy reached {got:.3f} h, closest subset sum {closest:.3f} h"
                )
            picked = found
        for ch in picked:
            assignment[ch] = name
    splits = dict(m.split_assignment)
    splits.update(assignment)
    return replace(m, split_assignment=splits)


# ---------------------------------------------------------------------- stats

@dataclass
class SplitStats:
    hours: float = 0.0
    segments: int = 0
    histogram: list[int] = field(default_factory=list)
    channel_hours: dict[str, float] = field(default_factory=dict)
    duplicate_transcripts: int = 0


@dataclass
class CorpusStats:
    bin_width_s: float
    splits: dict[str, SplitStats]

    def to_records(self) -> list[dict]:
        out = []
        for name in SPLITS:
            st = self.splits[name]
            out.append({
                "split": name,
                "hours": st.hours,
                "segments": st.segments,
                "bin_width_s": self.bin_width_s,
                "histogram": st.histogram,
                "channel_hours": st.channel_hours,
                "duplicate_transcripts": st.duplicate_transcripts,
            })
        return out

    def table(self) -> str:
        rows = [f"{'split':<11} {'hours':>12} {'segments':>9} {'channels':>9} {'dup':>6}"]
        for name in SPLITS:
            st = self.splits[name]
            rows.append(f"{name:<11} {st.hours:>12.4f} {st.segments:>9d} {len(st.channel_hours):>9d} "
                        f"{st.duplicate_transcripts:>6d}")
        return "\n".join(rows)


def compute_stats(m: Manifest, bin_width_s: float = 1.0) -> CorpusStats:
    if bin_width_s <= 0:
        raise ValueError("bin width must be positive")
    by_split: dict[str, list[Segment]] = {name: [] for name in SPLITS}
    for seg in m.ordered_segments():
        by_split[m.split_of(seg)].append(seg)
    max_dur = max((s.duration_s for s in m.segments.values()), default=0.0)
    n_bins = int(math.floor(max_dur / bin_width_s)) + 1 if m.segments else 0

    result = {}
    for name, segs in by_split.items():
        st = SplitStats(histogram=[0] * n_bins)
        seconds = math.fsum(s.duration_s for s in segs)
        st.hours = seconds / 3600.0
        st.segments = len(segs)
        per_channel: dict[str, list[float]] = defaultdict(list)
        for s in segs:
            st.histogram[min(int(s.duration_s // bin_width_s), n_bins - 1)] += 1
            per_channel[s.channel].append(s.duration_s)
        st.channel_hours = {ch: math.fsum(v) / 3600.0 for ch, v in sorted(per_channel.items())}
        counts = Counter(s.text for s in segs)
        st.duplicate_transcripts = sum(c - 1 for c in counts.values() if c > 1)
        result[name] = st
    return CorpusStats(bin_width_s, result)
