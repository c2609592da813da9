"""Iterative label refinement with a CER gate.

The pseudo-labelled pool is cut into ``n`` channel-atomic splits.  A teacher
trained on the first split filters it; from the second iteration on, every
split seen so far is relabelled by the current teacher and kept only where
the new label stays within ``tau`` CER of the original pseudo label.  Each
iteration trains an equal-or-larger student on the refined set and promotes
it to teacher.
"""
from __future__ import annotations

import json
import logging
import random
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

from gsbuild.backends import protocol as P
from gsbuild.backends.client import train, transcribe_batch
from gsbuild.manifest import (Manifest, Segment, content_hash, dumps_manifest, loads_manifest, save_manifest,
                              teacher_source)
from gsbuild.metrics import cer
from gsbuild.textnorm import UNICODE_VERSION, LanguageProfile, normalize

log = logging.getLogger(__name__)

DEFAULT_TAU = 0.10
CER_BINS = (0.0, 0.05, 0.10, 0.20, 0.50, 1.0)


class CheckpointError(RuntimeError):
    """A refinement run directory cannot be resumed."""


@dataclass(frozen=True)
class RefineOptions:
    n: int
    tau: float
    noise_config: dict
    relabel_enabled: bool = True
    capacities: Optional[Sequence[str]] = None  # one per training call, n + 1 in total
    seed: int = 0
    parallelism: int = 4
    retries: int = 2
    backoff_s: float = 0.5

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not self.tau >= 0:
            raise ValueError("tau must be >= 0")
        if self.noise_config is None:
            raise ValueError("noise_config is required (pass an empty mapping for no noise)")
        caps = self.capacity_schedule()
        if len(caps) != self.n + 1:
            raise ValueError(f"need {self.n + 1} capacity tags, got {len(caps)}")
        ranks = [P.capacity_rank(c) for c in caps]
        if ranks != sorted(ranks):
            raise ValueError(f"capacity schedule {list(caps)} decreases")

    def capacity_schedule(self) -> list[str]:
        return list(self.capacities) if self.capacities is not None else ["M"] * (self.n + 1)

    def snapshot(self) -> dict:
        d = asdict(self)
        d["capacities"] = self.capacity_schedule()
        for k in ("parallelism", "retries", "backoff_s"):
            d.pop(k)
        return d


@dataclass(frozen=True)
class Backends:
    transcriber: object
    trainer: object


@dataclass(frozen=True)
class RefinementState:
    splits: tuple[Manifest, ...]
    refined: Manifest
    iteration: int  # next iteration to run; n + 1 when finished
    tau: float
    teacher: Optional[P.ModelHandle]
    relabel_enabled: bool
    noise_config: dict
    history: tuple[dict, ...] = ()

    @property
    def done(self) -> bool:
        return self.iteration > len(self.splits)


# --------------------------------------------------------------------- splits

def split_pseudo_set(pool: Manifest, n: int, seed: int = 0) -> list[Manifest]:
    """Channel-atomic, hour-balanced split (largest channel to lightest split)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if len(pool.segments) < n:
        raise ValueError(f"{len(pool.segments)} segments cannot fill {n} splits")
    hours = pool.channel_hours()
    if n > len(hours):
        raise ValueError(f"cannot make {n} channel-atomic splits from {len(hours)} channels")
    rng = random.Random(seed)
    tie = {ch: rng.random() for ch in sorted(hours)}
    order = sorted(hours, key=lambda ch: (-hours[ch], tie[ch]))
    load = [0.0] * n
    members: list[set[str]] = [set() for _ in range(n)]
    for ch in order:
        k = min(range(n), key=lambda j: (load[j], j))
        load[k] += hours[ch]
        members[k].add(ch)
    return [subset(pool, lambda s, chans=chans: s.channel in chans) for chans in members]


def subset(m: Manifest, keep: Callable[[Segment], bool]) -> Manifest:
    segs = {k: s for k, s in m.segments.items() if keep(s)}
    videos = {s.video for s in segs.values()}
    channels = {s.channel for s in segs.values()}
    return replace(m, videos={k: v for k, v in m.videos.items() if k in videos}, segments=segs,
                   split_assignment={c: sp for c, sp in m.split_assignment.items() if c in channels})


def union(parts: Sequence[Manifest], language: str) -> Manifest:
    videos, segs, splits = {}, {}, {}
    for part in parts:
        videos.update(part.videos)
        splits.update(part.split_assignment)
        for k, s in part.segments.items():
            if k in segs and segs[k].text != s.text:
                log.warning("segment %s relabelled twice with different text; keeping the later label", k)
            segs[k] = s
    return Manifest(language, videos, segs, splits)


# ----------------------------------------------------------------------- gate

def filter_by_cer(pairs: Manifest, teacher_out: dict[str, str], tau: float) -> tuple[Manifest, list[str]]:
    """Keep segments whose label is within ``tau`` CER of the teacher output.

    Retained segments keep their original label.  Ids without a teacher output
    are returned as parked.
    """
    parked = sorted(k for k in pairs.segments if k not in teacher_out)
    kept = []
    for seg in pairs.ordered_segments():
        if seg.id not in teacher_out:
            continue
        score = cer(seg.text, teacher_out[seg.id])
        if score <= tau:
            kept.append(replace(seg, cer_vs_prev=score))
    return subset(pairs.with_segments(kept), lambda s: True), parked


def relabel(split: Manifest, teacher_out: dict[str, str], tau: float, iteration: int) -> tuple[Manifest, list[str]]:
    """Same gate as ``filter_by_cer`` but retained segments take the teacher's label."""
    gated, parked = filter_by_cer(split, teacher_out, tau)
    source = teacher_source(iteration)
    kept = [replace(s, text=teacher_out[s.id], source=source) for s in gated.ordered_segments()]
    return gated.with_segments(kept), parked


def gate_report(split: Manifest, teacher_out: dict[str, str], kept: Manifest, parked: list[str]) -> dict:
    scores = [cer(s.text, teacher_out[s.id]) for s in split.ordered_segments() if s.id in teacher_out]
    hist = [0] * len(CER_BINS)
    for x in scores:
        idx = max(i for i, lo in enumerate(CER_BINS) if x >= lo)
        hist[idx] += 1
    total = len(split.segments)
    return {
        "segments": total,
        "retained": len(kept.segments),
        "parked": len(parked),
        "retention_rate": len(kept.segments) / total if total else 0.0,
        "cer_bins": list(CER_BINS),
        "cer_histogram": hist,
    }


# ----------------------------------------------------------------- checkpoints

class RunDir:
    """On-disk layout of a refinement run."""

    def __init__(self, root: str | Path):
        self.root = Path(root)

    @property
    def config(self) -> Path:
        return self.root / "config.json"

    @property
    def state(self) -> Path:
        return self.root / "state.json"

    def split(self, j: int) -> Path:
        return self.root / "splits" / f"P{j}.jsonl"

    def refined(self, i: int) -> Path:
        return self.root / f"iter{i}" / "R.jsonl"

    def teacher_cache(self, i: int, j: int) -> Path:
        return self.root / f"iter{i}" / f"teacher_P{j}.jsonl"

    def gate(self, i: int) -> Path:
        return self.root / f"iter{i}" / "gate.json"


def _write_json(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(data, ensure_ascii=False, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)


def _file_hash(path: Path) -> str:
    return content_hash(path.read_bytes())


def save_cache(path: Path, outputs: dict[str, str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"id": k, "text": outputs[k]}, ensure_ascii=False) for k in sorted(outputs)]
    tmp = path.with_suffix(".tmp")
    tmp.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    tmp.replace(path)


def load_cache(path: Path) -> dict[str, str]:
    out = {}
    try:
        for line in path.read_text(encoding="utf-8").splitlines():
            rec = json.loads(line)
            out[rec["id"]] = rec["text"]
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"teacher cache {path} unreadable: {exc}") from exc
    return out


def _save_state(rd: RunDir, state: RefinementState, r_path: Path) -> None:
    _write_json(rd.state, {
        "iteration": state.iteration,
        "teacher": asdict(state.teacher) if state.teacher else None,
        "refined_path": str(r_path.relative_to(rd.root)),
        "refined_hash": _file_hash(r_path),
        "split_hashes": [_file_hash(rd.split(j)) for j in range(1, len(state.splits) + 1)],
        "history": list(state.history),
    })


def _load_state(rd: RunDir, opts: RefineOptions) -> RefinementState:
    try:
        snap = json.loads(rd.config.read_text(encoding="utf-8"))
        raw = json.loads(rd.state.read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint in {rd.root}: {exc}") from exc
    if snap.get("options") != opts.snapshot():
        raise CheckpointError(f"run directory {rd.root} was created with different options")
    try:
        splits = []
        for j, expected in enumerate(raw["split_hashes"], 1):
            path = rd.split(j)
            if _file_hash(path) != expected:
                raise CheckpointError(f"split file {path} changed since checkpoint")
            splits.append(loads_manifest(path.read_text(encoding="utf-8")))
        r_path = rd.root / raw["refined_path"]
        if _file_hash(r_path) != raw["refined_hash"]:
            raise CheckpointError(f"refined manifest {r_path} changed since checkpoint")
        refined = loads_manifest(r_path.read_text(encoding="utf-8"))
        teacher = P.ModelHandle(**raw["teacher"]) if raw["teacher"] else None
        iteration = int(raw["iteration"])
    except CheckpointError:
        raise
    except (OSError, KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint in {rd.root}: {exc}") from exc
    return RefinementState(tuple(splits), refined, iteration, opts.tau, teacher, opts.relabel_enabled,
                           dict(opts.noise_config), tuple(raw.get("history", ())))


# ------------------------------------------------------------------- iteration

def _teacher_outputs(split: Manifest, teacher: P.ModelHandle, backends: Backends, opts: RefineOptions,
                     profile: Optional[LanguageProfile]) -> dict[str, str]:
    reqs = []
    for seg in split.ordered_segments():
        video = split.videos[seg.video]
        reqs.append(P.TranscribeRequest(id=seg.id, audio_path=video.path, start_s=seg.start_s, end_s=seg.end_s,
                                        language=seg.language, model=teacher.id))
    responses, parked = transcribe_batch(backends.transcriber, reqs, opts.parallelism, opts.retries, opts.backoff_s)
    if parked:
        log.warning("%d segments parked during relabelling", len(parked))
    return {r.id: normalize(r.text, profile) if profile else r.text for r in responses}


def _train_student(state_teacher: Optional[P.ModelHandle], refined: Manifest, path: Path, capacity: str,
                   backends: Backends, opts: RefineOptions, iteration: int) -> P.ModelHandle:
    save_manifest(refined, path)
    req = P.TrainRequest(id=f"train-{iteration}", manifest_path=str(path), capacity=capacity,
                         noise_config=dict(opts.noise_config), seed=opts.seed + iteration, language=refined.language)
    return train(backends.trainer, req, previous=state_teacher).model


def run_iteration(state: RefinementState, backends: Backends, opts: RefineOptions, rd: RunDir,
                  profile: Optional[LanguageProfile] = None) -> RefinementState:
    """One pass of the loop body.  The input state is never mutated; a trainer
    failure propagates before any new state exists."""
    i = state.iteration
    if state.done:
        raise ValueError("refinement already finished")
    if state.teacher is None:
        raise ValueError("no teacher model for this iteration")
    language = state.splits[0].language
    parts, reports, parked_total = [], {}, 0
    contributing = [1] if i == 1 else list(range(1, i + 1))
    for j in contributing:
        split = state.splits[j - 1]
        cache = rd.teacher_cache(i, j)
        if cache.exists():
            outputs = load_cache(cache)
        else:
            outputs = _teacher_outputs(split, state.teacher, backends, opts, profile)
            save_cache(cache, outputs)
        if i == 1 or not state.relabel_enabled:
            kept, parked = filter_by_cer(split, outputs, state.tau)
        else:
            kept, parked = relabel(split, outputs, state.tau, i)
        parked_total += len(parked)
        reports[f"P{j}"] = gate_report(split, outputs, kept, parked)
        parts.append(kept)
    refined = union(parts, language)
    capacity = opts.capacity_schedule()[i]
    student = _train_student(state.teacher, refined, rd.refined(i), capacity, backends, opts, i)
    summary = {"iteration": i, "splits": contributing, "retained": len(refined.segments),
               "parked": parked_total, "teacher": state.teacher.id, "student": student.id}
    _write_json(rd.gate(i), {"iteration": i, "splits": reports, "summary": summary})
    return replace(state, refined=refined, iteration=i + 1, teacher=student, history=state.history + (summary,))


def initial_state(pool: Manifest, opts: RefineOptions, backends: Backends, rd: RunDir) -> RefinementState:
    splits = split_pseudo_set(pool, opts.n, opts.seed)
    for j, sp in enumerate(splits, 1):
        save_manifest(sp, rd.split(j))
    refined = splits[0]
    capacity = opts.capacity_schedule()[0]
    teacher = _train_student(None, refined, rd.refined(0), capacity, backends, opts, 0)
    return RefinementState(tuple(splits), refined, 1, opts.tau, teacher, opts.relabel_enabled,
                           dict(opts.noise_config),
                           ({"iteration": 0, "splits": [1], "retained": len(refined.segments),
                             "student": teacher.id},))


def run(pool: Manifest, opts: RefineOptions, backends: Backends, run_dir: str | Path,
        profile: Optional[LanguageProfile] = None, stop_after: Optional[int] = None,
        resume: bool = True) -> RefinementState:
    """Run (or resume) refinement in ``run_dir``; returns the last state.

    ``stop_after`` ends the run after that iteration, leaving a resumable
    checkpoint.  The final refined set is ``state.refined``.
    """
    rd = RunDir(run_dir)
    rd.root.mkdir(parents=True, exist_ok=True)
    if rd.state.exists():
        if not resume:
            raise CheckpointError(f"{rd.root} already holds a run; pass resume=True or use a new directory")
        state = _load_state(rd, opts)
        recorded = json.loads(rd.config.read_text(encoding="utf-8")).get("pool_hash")
        if recorded != content_hash(dumps_manifest(pool).encode("utf-8")):
            raise CheckpointError(f"{rd.root} was started from a different pseudo-labelled pool")
        log.info("resuming refinement at iteration %d", state.iteration)
    else:
        _write_json(rd.config, {"options": opts.snapshot(), "language": pool.language,
                                "unicode_version": UNICODE_VERSION,
                                "pool_hash": content_hash(dumps_manifest(pool).encode("utf-8"))})
        state = initial_state(pool, opts, backends, rd)
        _save_state(rd, state, rd.refined(0))
    while not state.done:
        if stop_after is not None and state.iteration > stop_after:
            break
        state = run_iteration(state, backends, opts, rd, profile)
        _save_state(rd, state, rd.refined(state.iteration - 1))
    if state.done:
        final = rd.root / "R_final.jsonl"
        save_manifest(state.refined, final)
    return state
