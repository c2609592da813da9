"""Stage functions behind the CLI, plus the stage ledger and timing records.

Every stage reads the artifacts of its upstream stage from the work
directory and writes its own.  ``stages.json`` records the content hash of
every artifact a stage consumed and produced, so a stage can refuse to run on
missing or stale inputs.  Audio paths inside manifests are kept relative to
the config directory, and backend children run from there, which keeps
manifests identical between two checkouts of the same run.
"""
from __future__ import annotations

import json
import logging
import time
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from contextlib import ExitStack
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Optional

from gsbuild import align, filters, manifest as mf, refine
from gsbuild.audio import read_wav, to_canonical, write_wav
from gsbuild.backends import protocol as P
from gsbuild.backends.client import ProcessBackend, detect_languages, emit_batch, transcribe_batch
from gsbuild.config import PipelineConfig
from gsbuild.manifest import Manifest, Segment, content_hash, load_manifest, save_manifest
from gsbuild.textnorm import normalize

log = logging.getLogger("gsbuild")

CANONICAL_RATE = 16000

ARTIFACTS = {
    "ingest": "manifest.ingest.jsonl",
    "detect-lang": "manifest.lang.jsonl",
    "transcribe": "manifest.chunks.jsonl",
    "align": "alignments.jsonl",
    "segment": "manifest.segments.jsonl",
    "normalize": "manifest.normalized.jsonl",
    "filter": "manifest.filtered.jsonl",
    "partition": "manifest.partitioned.jsonl",
    "refine": "manifest.refined.jsonl",
}
STAGES = tuple(ARTIFACTS)
UPSTREAM = {
    "ingest": (),
    "detect-lang": ("ingest",),
    "transcribe": ("detect-lang",),
    "align": ("transcribe",),
    "segment": ("transcribe", "align"),
    "normalize": ("segment",),
    "filter": ("normalize",),
    "partition": ("filter",),
    "refine": ("partition",),
}
LEDGER = "stages.json"
TIMINGS = "timings.jsonl"


class StageError(RuntimeError):
    """A stage cannot run: an upstream artifact is missing or stale."""


def event(stage: str, name: str, **fields) -> None:
    """One structured log line per record-level event."""
    log.info(json.dumps({"stage": stage, "event": name, **fields}, ensure_ascii=False, sort_keys=True))


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _write_jsonl(path: Path, records: list[dict]) -> None:
    _write_text(path, "".join(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n" for r in records))


def _file_hash(path: Path) -> str:
    return content_hash(path.read_bytes())


# ------------------------------------------------------------------ ledger

@dataclass
class Workspace:
    cfg: PipelineConfig

    @property
    def root(self) -> Path:
        return self.cfg.work_dir

    def artifact(self, stage: str) -> Path:
        return self.root / ARTIFACTS[stage]

    def ledger(self) -> dict:
        path = self.root / LEDGER
        if not path.exists():
            return {}
        return json.loads(path.read_text(encoding="utf-8"))

    def _current(self, stage: str) -> Optional[str]:
        path = self.artifact(stage)
        return _file_hash(path) if path.exists() else None

    def check_upstream(self, stage: str) -> dict[str, str]:
        """Hashes of the upstream artifacts, after verifying the whole chain."""
        ledger = self.ledger()
        seen: set[str] = set()
        todo = list(UPSTREAM[stage])
        while todo:
            up = todo.pop()
            if up in seen:
                continue
            seen.add(up)
            rec = ledger.get(up)
            current = self._current(up)
            if rec is None or current is None:
                raise StageError(f"{stage}: required upstream artifact {self.artifact(up)} is missing; "
                                 f"run `gsbuild {up}` first")
            if rec["output"] != current:
                raise StageError(f"{stage}: upstream artifact {self.artifact(up)} is stale "
                                 f"(hash {current} != recorded {rec['output']}); re-run `gsbuild {up}`")
            for parent, h in rec["inputs"].items():
                if ledger.get(parent, {}).get("output") != h:
                    raise StageError(f"{stage}: {up} was built from an older {parent} output; "
                                     f"re-run `gsbuild {up}`")
                todo.append(parent)
        return {up: ledger[up]["output"] for up in UPSTREAM[stage]}

    def record(self, stage: str, inputs: dict[str, str]) -> None:
        ledger = self.ledger()
        ledger[stage] = {"inputs": inputs, "output": _file_hash(self.artifact(stage))}
        _write_text(self.root / LEDGER, json.dumps(ledger, indent=1, sort_keys=True) + "\n")

    def relpath(self, path: Path) -> str:
        try:
            return Path(path).resolve().relative_to(self.cfg.base_dir.resolve()).as_posix()
        except ValueError:
            return str(Path(path).resolve())


# ------------------------------------------------------------------ timings

@dataclass(frozen=True)
class StageTiming:
    stage: str
    wall_s: float
    audio_hours: float

    @property
    def rtf(self) -> float:
        return self.wall_s / (self.audio_hours * 3600.0) if self.audio_hours > 0 else 0.0

    def to_record(self) -> dict:
        return {"stage": self.stage, "wall_s": self.wall_s, "audio_hours": self.audio_hours, "rtf": self.rtf}


def append_timing(root: Path, t: StageTiming) -> None:
    root.mkdir(parents=True, exist_ok=True)
    with open(root / TIMINGS, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(t.to_record(), sort_keys=True) + "\n")


def load_timings(root: Path) -> list[StageTiming]:
    path = root / TIMINGS
    if not path.exists():
        return []
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            out.append(StageTiming(rec["stage"], float(rec["wall_s"]), float(rec["audio_hours"])))
    return out


def _fmt_wall(s: float) -> str:
    if s < 60:
        return f"{s:.2f}s"
    if s < 3600:
        return f"{s / 60:.1f}m"
    return f"{s / 3600:.2f}h"


def timing_table(timings: list[StageTiming]) -> str:
    """Latest run of each stage in pipeline order: stage, wall time, RTF."""
    latest: dict[str, StageTiming] = {}
    for t in timings:
        latest[t.stage] = t
    order = [s for s in STAGES if s in latest] + sorted(s for s in latest if s not in STAGES)
    rows = [f"{'stage':<12} {'wall':>9} {'audio h':>9} {'RTF':>10}"]
    for s in order:
        t = latest[s]
        rows.append(f"{s:<12} {_fmt_wall(t.wall_s):>9} {t.audio_hours:>9.4f} {t.rtf:>10.2e}")
    return "\n".join(rows)


def audio_hours(m: Manifest) -> float:
    return sum(v.duration_s for v in m.videos.values()) / 3600.0


# ----------------------------------------------------------------- backends

def open_backend(cfg: PipelineConfig, role: str, stack: ExitStack, override=None):
    """A backend for ``role``: ``override`` (used by tests) or the configured command."""
    if override is not None:
        return override
    spec = cfg.backend_spec(role) or {}
    backend = ProcessBackend(role, spec["command"], spec.get("mode", "stream"), cwd=str(cfg.base_dir))
    return stack.enter_context(backend)


def _retry_args(cfg: PipelineConfig) -> dict:
    b = cfg.section("backends")
    return {"retries": int(b["retries"]), "backoff_s": float(b["backoff_s"])}


# ------------------------------------------------------------------- stages

@dataclass
class StageResult:
    stage: str
    summary: str
    audio_hours: float


def stage_ingest(cfg: PipelineConfig, ws: Workspace, **_) -> StageResult:
    opts = cfg.section("ingest")
    language = cfg.profile().code
    m, issues = mf.ingest_audio_dir(cfg.path("audio_root"), language, workers=int(opts["workers"]))
    for issue in issues:
        event("ingest", "unreadable", path=ws.relpath(Path(issue.path)), error=issue.error)
    videos = {}
    canonical_dir = ws.root / "canonical"
    for vid in sorted(m.videos):
        v = m.videos[vid]
        path = Path(v.path)
        if opts.get("canonicalize", True) and (v.sample_rate_hz != CANONICAL_RATE or v.channels != 1):
            target = canonical_dir / v.channel / path.name
            buf = to_canonical(read_wav(path))
            target.parent.mkdir(parents=True, exist_ok=True)
            write_wav(target, buf)
            event("ingest", "canonicalized", video=vid, rate=v.sample_rate_hz, channels=v.channels)
            v = replace(v, duration_s=buf.duration_s, sample_rate_hz=CANONICAL_RATE, channels=1)
            path = target
        for warning in mf.check_taxonomy(v):
            event("ingest", "taxonomy", warning=warning)
        videos[vid] = replace(v, path=ws.relpath(path))
    m = replace(m, videos=videos)
    save_manifest(m, ws.artifact("ingest"))
    _write_jsonl(ws.root / "ingest_issues.jsonl",
                 [{"path": ws.relpath(Path(i.path)), "error": i.error} for i in issues])
    return StageResult("ingest", f"{len(videos)} videos ingested, {len(issues)} unreadable", audio_hours(m))


def stage_detect_lang(cfg: PipelineConfig, ws: Workspace, backends=None, **_) -> StageResult:
    m = load_manifest(ws.artifact("ingest"))
    with ExitStack() as stack:
        be = open_backend(cfg, P.TRANSCRIBER, stack, (backends or {}).get(P.TRANSCRIBER))
        found, parked = detect_languages(be, [m.videos[k] for k in sorted(m.videos)],
                                         int(cfg.section("transcribe")["parallelism"]), **_retry_args(cfg))
    videos = {}
    for vid in sorted(m.videos):
        if vid in found:
            lang, prob = found[vid]
            event("detect-lang", "detected", video=vid, language=lang, prob=prob)
            videos[vid] = replace(m.videos[vid], detected_language=lang, language_prob=prob)
        else:
            event("detect-lang", "parked", video=vid, error=parked[vid])
            videos[vid] = m.videos[vid]
    m = replace(m, videos=videos)
    save_manifest(m, ws.artifact("detect-lang"))
    match = sum(v.detected_language == m.language for v in videos.values())
    return StageResult("detect-lang", f"{match}/{len(videos)} videos detected as {m.language}, "
                       f"{len(parked)} parked", audio_hours(m))


def stage_transcribe(cfg: PipelineConfig, ws: Workspace, backends=None, **_) -> StageResult:
    m = load_manifest(ws.artifact("detect-lang"))
    keep = [v for v in (m.videos[k] for k in sorted(m.videos)) if v.detected_language == m.language]
    for v in m.videos.values():
        if v.detected_language != m.language:
            event("transcribe", "excluded", video=v.id, detected=v.detected_language)
    reqs = [P.TranscribeRequest(id=v.id, audio_path=v.path, start_s=0.0, end_s=v.duration_s,
                                language=m.language, want_chunks=True) for v in keep]
    with ExitStack() as stack:
        be = open_backend(cfg, P.TRANSCRIBER, stack, (backends or {}).get(P.TRANSCRIBER))
        responses, parked = transcribe_batch(be, reqs, int(cfg.section("transcribe")["parallelism"]),
                                             **_retry_args(cfg))
    for vid, err in sorted(parked.items()):
        event("transcribe", "parked", video=vid, error=err)
    segments = []
    for resp in responses:
        video = m.videos[resp.id]
        for k, c in enumerate(resp.chunks):
            start, end = max(0.0, c.start_s), min(video.duration_s, c.end_s)
            if not c.text.strip() or end <= start:
                continue
            segments.append(Segment(mf.segment_id(video.id, k), video.id, video.channel, start, end,
                                    c.text, c.text, m.language))
    kept_ids = {v.id for v in keep} - set(parked)
    out = Manifest(m.language, {k: v for k, v in m.videos.items() if k in kept_ids}, {},
                   {v.channel: mf.UNASSIGNED for k, v in m.videos.items() if k in kept_ids}).with_segments(segments)
    out.validate()
    save_manifest(out, ws.artifact("transcribe"))
    return StageResult("transcribe", f"{len(segments)} chunks from {len(kept_ids)} videos, {len(parked)} parked",
                       audio_hours(out))


def chunk_tokens(text: str, vocab: tuple[str, ...], star: Optional[int]) -> tuple[list[int], list[int]]:
    """Alignment tokens for a raw transcript and the character offset of each.

    Whitespace, punctuation and symbols are not spoken and get no token.
    Characters the acoustic vocabulary lacks map to the star token.
    """
    index = {sym: i for i, sym in enumerate(vocab)}
    tokens, positions = [], []
    for pos, c in enumerate(text):
        if c.isspace() or unicodedata.category(c)[0] in "PSZ":
            continue
        sym = index.get(c.lower(), index.get(c))
        if sym is None:
            if star is None:
                continue
            sym = star
        tokens.append(sym)
        positions.append(pos)
    return tokens, positions


def _align_one(e: align.EmissionMatrix, seg: Segment) -> dict:
    tokens, positions = chunk_tokens(seg.raw_text, e.vocab, e.star_index)
    rec = {"chunk": seg.id, "video": seg.video, "offset_s": round(seg.start_s, 6)}
    try:
        path = align.viterbi_align(e, tokens)
    except align.AlignmentError as exc:
        return {**rec, "error": str(exc)}
    spans = align.token_spans(path, e)
    return {**rec, "score": round(path.total_log_score, 6), "positions": positions,
            "spans": [[s.token, s.start_frame, s.end_frame, round(s.start_s, 6), round(s.end_s, 6),
                       round(s.mean_log_score, 6)] for s in spans]}


def stage_align(cfg: PipelineConfig, ws: Workspace, backends=None, **_) -> StageResult:
    m = load_manifest(ws.artifact("transcribe"))
    emis_dir = ws.root / "emissions"
    segs = m.ordered_segments()
    reqs = [P.EmitRequest(id=s.id, audio_path=m.videos[s.video].path, start_s=s.start_s, end_s=s.end_s,
                          output_path=str((emis_dir / f"{s.id}.emis").resolve()), language=m.language)
            for s in segs]
    with ExitStack() as stack:
        be = open_backend(cfg, P.ACOUSTIC, stack, (backends or {}).get(P.ACOUSTIC))
        emitted, parked = emit_batch(be, reqs, int(cfg.section("align")["workers"]), **_retry_args(cfg))
    for sid, err in sorted(parked.items()):
        event("align", "parked", chunk=sid, error=err)

    def work(seg: Segment) -> dict:
        try:
            e = align.load_emissions(emitted[seg.id].emission_path)
        except (OSError, align.EmissionError) as exc:
            return {"chunk": seg.id, "video": seg.video, "offset_s": round(seg.start_s, 6), "error": str(exc)}
        return _align_one(e, seg)

    todo = [s for s in segs if s.id in emitted]
    with ThreadPoolExecutor(max_workers=max(1, int(cfg.section("align")["workers"]))) as pool:
        records = list(pool.map(work, todo))
    records += [{"chunk": sid, "error": f"backend: {err}"} for sid, err in sorted(parked.items())]
    records.sort(key=lambda r: r["chunk"])
    failed = 0
    for r in records:
        if "error" in r:
            failed += 1
            event("align", "failed", chunk=r["chunk"], error=r["error"])
    _write_jsonl(ws.artifact("align"), records)
    return StageResult("align", f"{len(records) - failed} chunks aligned, {failed} failed", audio_hours(m))


def _utterance_text(raw: str, positions: list[int], first: int, last: int) -> str:
    lo, hi = positions[first], positions[last - 1] + 1
    while hi < len(raw) and not raw[hi].isspace():
        hi += 1  # keep trailing punctuation attached to the last word
    return raw[lo:hi].strip()


def stage_segment(cfg: PipelineConfig, ws: Workspace, **_) -> StageResult:
    chunks = load_manifest(ws.artifact("transcribe"))
    a = cfg.section("align")
    per_video: dict[str, list[tuple[float, float, str]]] = {}
    dropped = 0
    for line in ws.artifact("align").read_text(encoding="utf-8").splitlines():
        rec = json.loads(line)
        if "error" in rec:
            continue
        chunk = chunks.segments[rec["chunk"]]
        spans = [align.TokenSpan(int(k), int(f0), int(f1), float(s0), float(s1), float(sc))
                 for k, f0, f1, s0, s1, sc in rec["spans"]]
        kept, short = align.segment_utterances(spans, a["gap_s"], a["min_s"], a["max_s"])
        dropped += len(short)
        for u in short:
            event("segment", "dropped-short", chunk=chunk.id, duration_s=round(u.duration_s, 6))
        video = chunks.videos[chunk.video]
        for u in kept:
            text = _utterance_text(chunk.raw_text, rec["positions"], u.first_token, u.last_token)
            start = round(chunk.start_s + u.start_s, 6)
            end = round(min(video.duration_s, chunk.start_s + u.end_s), 6)
            if text and end > start:
                per_video.setdefault(chunk.video, []).append((start, end, text))
    segments = []
    for vid in sorted(per_video):
        v = chunks.videos[vid]
        for k, (start, end, text) in enumerate(sorted(per_video[vid])):
            segments.append(Segment(mf.segment_id(vid, k), vid, v.channel, start, end, text, text, chunks.language))
    out = chunks.with_segments(segments)
    out.validate()
    save_manifest(out, ws.artifact("segment"))
    return StageResult("segment", f"{len(segments)} utterances, {dropped} too short", audio_hours(out))


def stage_normalize(cfg: PipelineConfig, ws: Workspace, **_) -> StageResult:
    m = load_manifest(ws.artifact("segment"))
    profile = cfg.profile()
    segs = [replace(s, text=normalize(s.raw_text, profile)) for s in m.ordered_segments()]
    out = m.with_segments(segs)
    save_manifest(out, ws.artifact("normalize"))
    return StageResult("normalize", f"{len(segs)} transcripts normalized (profile {profile.code})",
                       audio_hours(out))


def filter_config(cfg: PipelineConfig) -> filters.FilterConfig:
    f = cfg.section("filter")
    return filters.FilterConfig.for_profile(
        cfg.profile(), lid_threshold=float(f["lid_threshold"]), min_duration_s=float(f["min_duration_s"]),
        max_duration_s=float(f["max_duration_s"]), max_dup_per_channel=int(f["max_dup_per_channel"]),
        enabled=frozenset(f["rules"]))


def stage_filter(cfg: PipelineConfig, ws: Workspace, backends=None, **_) -> StageResult:
    m = load_manifest(ws.artifact("normalize"))
    fc = filter_config(cfg)
    with ExitStack() as stack:
        lid = open_backend(cfg, P.LID, stack, (backends or {}).get(P.LID)) if filters.LID in fc.enabled else None
        out, report = filters.apply_all(m, fc, lid, int(cfg.section("filter")["parallelism"]))
    for sid, rule, reason in report.rejections:
        event("filter", "rejected", segment=sid, rule=rule, reason=reason)
    for sid, err in sorted(report.parked.items()):
        event("filter", "parked", segment=sid, error=err)
    save_manifest(out, ws.artifact("filter"))
    save_manifest(filters.rejected_manifest(m, report), ws.root / "filter_rejected.jsonl")
    _write_jsonl(ws.root / "filter_rejections.jsonl",
                 [{"segment": s, "rule": r, "reason": why} for s, r, why in sorted(report.rejections)])
    _write_text(ws.root / "filter_report.json", json.dumps(report.to_record(), indent=1, sort_keys=True) + "\n")
    return StageResult("filter", report.table(), audio_hours(m))


def stage_partition(cfg: PipelineConfig, ws: Workspace, **_) -> StageResult:
    m = load_manifest(ws.artifact("filter"))
    p = cfg.section("partition")
    out = mf.assign_splits(m, float(p["dev_hours"]), float(p["test_hours"]), int(p["seed"]), float(p["tolerance"]))
    save_manifest(out, ws.artifact("partition"))
    for ch in sorted(out.split_assignment):
        event("partition", "assigned", channel=ch, split=out.split_assignment[ch])
    stats = mf.compute_stats(out, float(cfg.section("stats")["bin_width_s"]))
    return StageResult("partition", stats.table(), audio_hours(out))


def refine_options(cfg: PipelineConfig) -> refine.RefineOptions:
    r = cfg.section("refine")
    b = _retry_args(cfg)
    return refine.RefineOptions(n=int(r["n"]), tau=float(r["tau"]), noise_config=dict(r.get("noise") or {}),
                                relabel_enabled=bool(r["relabel"]), capacities=list(r["capacities"]) or None,
                                seed=int(r["seed"]), parallelism=int(r["parallelism"]), **b)


def stage_refine(cfg: PipelineConfig, ws: Workspace, backends=None, stop_after: Optional[int] = None,
                 **_) -> StageResult:
    m = load_manifest(ws.artifact("partition"))
    pool = refine.subset(m, lambda s: m.split_of(s) == mf.TRAIN)
    opts = refine_options(cfg)
    with ExitStack() as stack:
        rb = refine.Backends(open_backend(cfg, P.TRANSCRIBER, stack, (backends or {}).get(P.TRANSCRIBER)),
                             open_backend(cfg, P.TRAINER, stack, (backends or {}).get(P.TRAINER)))
        state = refine.run(pool, opts, rb, (ws.root / "refine").resolve(), cfg.profile(), stop_after=stop_after)
    for h in state.history:
        event("refine", "iteration", **h)
    if not state.done:
        return StageResult("refine", f"stopped after iteration {state.iteration - 1}; re-run to resume",
                           audio_hours(m))
    final = refine.union([state.refined, refine.subset(m, lambda s: m.split_of(s) in (mf.DEV, mf.TEST))],
                         m.language)
    final = replace(final, split_assignment={**m.split_assignment, **final.split_assignment})
    save_manifest(final, ws.artifact("refine"))
    return StageResult("refine", f"{len(state.refined.segments)} refined TRAIN segments after {opts.n} iterations "
                       f"(final teacher {state.teacher.id})", audio_hours(m))


STAGE_FUNCS: dict[str, Callable[..., StageResult]] = {
    "ingest": stage_ingest,
    "detect-lang": stage_detect_lang,
    "transcribe": stage_transcribe,
    "align": stage_align,
    "segment": stage_segment,
    "normalize": stage_normalize,
    "filter": stage_filter,
    "partition": stage_partition,
    "refine": stage_refine,
}

NEEDS_BACKENDS = {
    "detect-lang": (P.TRANSCRIBER,),
    "transcribe": (P.TRANSCRIBER,),
    "align": (P.ACOUSTIC,),
    "filter": (P.LID,),
    "refine": (P.TRANSCRIBER, P.TRAINER),
}


def run_stage(cfg: PipelineConfig, stage: str, backends: Optional[dict] = None, **kw) -> StageResult:
    """Validate, check upstream, run, record hashes and append a timing record."""
    needs = () if backends else NEEDS_BACKENDS.get(stage, ())
    cfg.validate(need_backends=tuple(r for r in needs), need_audio=stage == "ingest")
    ws = Workspace(cfg)
    ws.root.mkdir(parents=True, exist_ok=True)
    inputs = ws.check_upstream(stage)
    t0 = time.perf_counter()
    result = STAGE_FUNCS[stage](cfg, ws, backends=backends, **kw)
    wall = time.perf_counter() - t0
    if ws.artifact(stage).exists() and (stage != "refine" or "stopped" not in result.summary):
        ws.record(stage, inputs)
    append_timing(ws.root, StageTiming(stage, wall, result.audio_hours))
    return result


def run_all(cfg: PipelineConfig, backends: Optional[dict] = None) -> list[StageResult]:
    return [run_stage(cfg, s, backends) for s in STAGES]
