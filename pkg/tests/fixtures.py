"""Shared builders for small synthetic manifests."""
from __future__ import annotations

import itertools
import random

import numpy as np

from gsbuild.manifest import UNASSIGNED, Manifest, Segment, VideoRecord, segment_id


def channel_corpus(hours: dict[str, float], language: str = "id") -> Manifest:
    """One video per channel with the given duration and no segments."""
    videos = {f"{ch}-v0": VideoRecord(f"{ch}-v0", ch, f"{ch}/v0.wav", h * 3600.0, 16000)
              for ch, h in hours.items()}
    return Manifest(language, videos, {}, {ch: UNASSIGNED for ch in hours})


def random_channel_hours(n: int, seed: int, lo: float = 1.0, hi: float = 8.0) -> dict[str, float]:
    rng = random.Random(seed)
    return {f"ch{i:02d}": round(rng.uniform(lo, hi), 3) for i in range(n)}


def feasible_pair_exists(hours: dict[str, float], dev: float, test: float, tol: float = 0.10) -> bool:
    """Brute force: is there a disjoint pair of channel subsets hitting both targets?"""
    names = sorted(hours)
    h = np.array([hours[c] for c in names])
    n = len(names)
    masks = np.arange(1 << n, dtype=np.int64)
    bits = (masks[:, None] >> np.arange(n)) & 1
    sums = bits @ h
    dev_ok = masks[np.abs(sums - dev) <= tol * dev + 1e-9]
    test_ok = masks[np.abs(sums - test) <= tol * test + 1e-9]
    test_set = test_ok
    for m in dev_ok:
        if np.any((test_set & m) == 0):
            return True
    return False


def segments_manifest(spec: list[tuple[str, str, float, float, str]], language: str = "id") -> Manifest:
    """Segments from (channel, video, start, end, text) rows."""
    videos: dict[str, VideoRecord] = {}
    segs = {}
    counters: dict[str, itertools.count] = {}
    for ch, vid, start, end, text in spec:
        v = videos.get(vid)
        dur = max(end + 1.0, v.duration_s if v else 0.0)
        videos[vid] = VideoRecord(vid, ch, f"{ch}/{vid}.wav", dur, 16000)
        k = next(counters.setdefault(vid, itertools.count()))
        sid = segment_id(vid, k)
        segs[sid] = Segment(sid, vid, ch, start, end, text, text, language)
    return Manifest(language, videos, segs, {v.channel: UNASSIGNED for v in videos.values()})


def sim_backends(truth, noise: float = 0.20, seed: int = 0, alpha: float = 0.7):
    from gsbuild.backends.client import InProcessBackend
    from gsbuild.backends.mock import MockTrainer, MockTranscriber
    from gsbuild.refine import Backends

    return Backends(InProcessBackend("transcriber", MockTranscriber(truth, noise, seed)),
                    InProcessBackend("trainer", MockTrainer(truth, alpha)))
