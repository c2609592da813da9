"""Reference mock backends.

They stand in for Whisper, the text LID model, the CTC aligner's acoustic
model and the NST trainer.  All of them read a *truth file* describing what
is really said in each recording, so pipeline and refinement runs can be
scored against hidden ground truth:

    {"language": "id",
     "videos": {"<channel>/<video>.wav": {"language": "id",
                                          "utterances": [[start_s, end_s, text], ...]}},
     "segments": {"<segment id>": "<normalized text>"}}

Run one as a child process with ``python -m gsbuild.backends.mock ROLE ...``.
"""
from __future__ import annotations

import argparse
import json
import random
import re
import threading
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from gsbuild.align import EmissionMatrix, save_emissions
from gsbuild.backends import protocol as P
from gsbuild.backends.client import TransientBackendError
from gsbuild.backends.server import add_transport_args, serve
from gsbuild.manifest import content_hash, load_manifest
from gsbuild.metrics import CHAR, levenshtein, tokenize
from gsbuild.textnorm import SHIPPED_LANGUAGES, get_profile, normalize

FRAME_S = 0.02
CHUNK_S = 30.0
BLANK, STAR = "<b>", "*"
_EPS_RE = re.compile(r"eps(\d+(?:\.\d+)?)")


def video_key(path: str) -> str:
    p = Path(path)
    return f"{p.parent.name}/{p.name}"


@dataclass
class Truth:
    language: str
    videos: dict[str, dict] = field(default_factory=dict)
    segments: dict[str, str] = field(default_factory=dict)

    @classmethod
    def load(cls, path: str | Path) -> "Truth":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(data.get("language", ""), data.get("videos", {}), data.get("segments", {}))

    def dump(self, path: str | Path) -> None:
        payload = {"language": self.language, "videos": self.videos, "segments": self.segments}
        Path(path).write_text(json.dumps(payload, ensure_ascii=False, indent=1, sort_keys=True), encoding="utf-8")

    def utterances(self, audio_path: str) -> list[tuple[float, float, str]]:
        video = self.videos.get(video_key(audio_path))
        return [tuple(u) for u in video["utterances"]] if video else []

    def raw_window(self, audio_path: str, start_s: float, end_s: float) -> str:
        """Text of every utterance whose midpoint lies inside the window."""
        return " ".join(text for s, e, text in self.utterances(audio_path) if start_s <= (s + e) / 2 < end_s)

    def normalized(self, text: str, language: Optional[str] = None) -> str:
        lang = language or self.language
        return normalize(text, get_profile(lang)) if lang in SHIPPED_LANGUAGES else text

    def segment_text(self, seg_id: str, audio_path: str, start_s: float, end_s: float,
                     language: Optional[str] = None) -> str:
        if seg_id in self.segments:
            return self.segments[seg_id]
        return self.normalized(self.raw_window(audio_path, start_s, end_s), language)

    def alphabet(self, normalized: bool, language: Optional[str] = None) -> list[str]:
        """Letters of the truth text, optionally restricted to one language."""
        lang = language or self.language
        texts = list(self.segments.values()) if normalized and lang == self.language else []
        for video in self.videos.values():
            if language is not None and video.get("language", self.language) != language:
                continue
            for _, _, text in video["utterances"]:
                texts.append(self.normalized(text, video.get("language")) if normalized else text)
        chars = {c for t in texts for c in t if unicodedata.category(c)[0] == "L"}
        if lang in SHIPPED_LANGUAGES:
            # stray foreign words in the truth should not leak into the noise
            charset = get_profile(lang).charset
            chars = {c for c in chars if all(ord(u) in charset for u in normalize(c, get_profile(lang)))}
        return sorted(chars) or list("abcdefghijklmnopqrstuvwxyz")


def model_noise(model: Optional[str], base: float) -> float:
    if not model:
        return base
    m = _EPS_RE.search(model)
    return float(m.group(1)) if m else base


def segment_rate(mean: float, rng: random.Random) -> float:
    """Per-segment corruption rate: exponential around ``mean``, capped at 1."""
    if mean <= 0:
        return 0.0
    return min(1.0, rng.expovariate(1.0 / mean))


def corrupt(text: str, rate: float, rng: random.Random, alphabet: list[str]) -> str:
    out = []
    for c in text:
        if c.isspace() or rng.random() >= rate:
            out.append(c)
            continue
        op = rng.randrange(3)
        if op == 0:
            out.append(rng.choice([a for a in alphabet if a != c] or alphabet))
        elif op == 2:
            out.append(c)
            out.append(rng.choice(alphabet))
        # op == 1 deletes
    return "".join(out)


def _rng(*parts) -> random.Random:
    return random.Random("|".join(str(p) for p in parts))


# ------------------------------------------------------------------ transcriber

class MockTranscriber:
    """Whisper stand-in with character noise.

    Without a model handle it plays the base pseudo-labeller (mean noise
    ``noise``) and returns raw-looking text; with a handle from the mock
    trainer it returns normalized text at the handle's noise level.
    """

    def __init__(self, truth: Truth, noise: float = 0.0, seed: int = 0, chunk_s: float = CHUNK_S):
        self.truth = truth
        self.noise = noise
        self.seed = seed
        self.chunk_s = chunk_s
        self._alphabets: dict[tuple[bool, Optional[str]], list[str]] = {}

    def _alphabet(self, normalized: bool, language: Optional[str]) -> list[str]:
        key = (normalized, language)
        if key not in self._alphabets:
            self._alphabets[key] = self.truth.alphabet(normalized, language)
        return self._alphabets[key]

    def _noisy(self, key: str, text: str, model: Optional[str], normalized: bool,
               language: Optional[str] = None) -> tuple[str, float]:
        rng = _rng(self.seed, model or "base", key)
        rate = segment_rate(model_noise(model, self.noise), rng)
        return corrupt(text, rate, rng, self._alphabet(normalized, language)), -rate

    def chunks(self, audio_path: str, start_s: float, end_s: float) -> list[tuple[float, float, str]]:
        utts = [u for u in self.truth.utterances(audio_path) if start_s <= (u[0] + u[1]) / 2 < end_s]
        groups: list[list[tuple]] = []
        for u in utts:
            if groups and u[1] - groups[-1][0][0] <= self.chunk_s - 0.4:
                groups[-1].append(u)
            else:
                groups.append([u])
        out = []
        for g in groups:
            out.append((max(start_s, g[0][0] - 0.2), min(end_s, g[-1][1] + 0.2), " ".join(u[2] for u in g)))
        return out

    def __call__(self, req: dict) -> dict:
        if req.get("type") != "transcribe":
            raise ValueError(f"transcriber cannot handle {req.get('type')!r}")
        key, path = req["id"], req["audio_path"]
        video = self.truth.videos.get(video_key(path))
        if video is None and key not in self.truth.segments:
            raise ValueError(f"no truth for {path}")
        start, end = float(req["start_s"]), float(req["end_s"])
        if req.get("detect_language"):
            lang = video["language"] if video else self.truth.language
            return {"id": key, "text": "", "language": lang, "language_prob": 0.99}
        model = req.get("model")
        spoken = video["language"] if video else self.truth.language
        if req.get("want_chunks"):
            chunks = []
            for i, (cs, ce, text) in enumerate(self.chunks(path, start, end)):
                noisy, _ = self._noisy(f"{key}#{i}", text, model, False, spoken)
                chunks.append({"start_s": round(cs, 3), "end_s": round(ce, 3), "text": noisy})
            return {"id": key, "text": " ".join(c["text"] for c in chunks), "chunks": chunks}
        if model or key in self.truth.segments:
            clean = self.truth.segment_text(key, path, start, end, req.get("language"))
            text, lp = self._noisy(key, clean, model, True, spoken)
        else:
            text, lp = self._noisy(key, self.truth.raw_window(path, start, end), None, False, spoken)
        return {"id": key, "text": text, "avg_logprob": lp}


class FaultInjector:
    """Fails the first ``failures`` attempts for each id in ``ids`` transiently."""

    def __init__(self, handler, ids, failures: int = 1):
        self.handler = handler
        self.ids = set(ids)
        self.failures = failures
        self.attempts: dict[str, int] = {}
        self._lock = threading.Lock()

    def __call__(self, req: dict) -> dict:
        with self._lock:
            n = self.attempts[req["id"]] = self.attempts.get(req["id"], 0) + 1
        if req["id"] in self.ids and n <= self.failures:
            raise TransientBackendError(f"injected failure {n} for {req['id']}")
        return self.handler(req)


# ---------------------------------------------------------------------- trainer

class MockTrainer:
    """Contraction trainer: the student's noise is ``alpha`` times the label
    noise of its training manifest, measured against hidden truth."""

    def __init__(self, truth: Truth, alpha: float = 0.7):
        self.truth = truth
        self.alpha = alpha

    def label_noise(self, manifest_path: str) -> tuple[float, int]:
        m = load_manifest(manifest_path)
        edits = total = 0
        for seg in m.ordered_segments():
            video = m.videos.get(seg.video)
            ref = self.truth.segment_text(seg.id, video.path if video else "", seg.start_s, seg.end_s, m.language)
            r = tokenize(ref, CHAR).tokens
            edits += levenshtein(r, tokenize(seg.text, CHAR).tokens)
            total += len(r)
        return (edits / total if total else 0.0), len(m.segments)

    def __call__(self, req: dict) -> dict:
        if req.get("type") != "train":
            raise ValueError(f"trainer cannot handle {req.get('type')!r}")
        eps_train, n = self.label_noise(req["manifest_path"])
        if n == 0:
            raise ValueError("empty training manifest")
        eps = self.alpha * eps_train
        digest = content_hash(Path(req["manifest_path"]).read_bytes() + f"|{req['seed']}".encode())
        handle = f"mock-{req['capacity']}-eps{eps:.6f}-{digest}"
        summary = {"train_label_cer": round(eps_train, 6), "model_noise": round(eps, 6), "segments": n,
                   "noise_config": req.get("noise_config")}
        return {"id": req["id"], "model": {"id": handle, "capacity": req["capacity"]}, "summary": summary}


# -------------------------------------------------------------------------- LID

class MockLid:
    """Table-driven LID: exact-text overrides, else script coverage."""

    def __init__(self, table: Optional[dict[str, tuple[str, float]]] = None, languages=SHIPPED_LANGUAGES):
        self.table = dict(table or {})
        self.profiles = [get_profile(code) for code in languages]

    def classify(self, text: str) -> tuple[str, float]:
        if text in self.table:
            lang, conf = self.table[text]
            return lang, float(conf)
        chars = [c for c in text if not c.isspace()]
        if not chars:
            return "unk", 0.0
        scored = []
        for prof in self.profiles:
            cover = sum(ord(c) in prof.charset for c in chars) / len(chars)
            scored.append((cover, -len(prof.charset), prof.code))
        cover, _, lang = max(scored)
        words = text.split()
        if len(words) >= 4 and len(set(words)) <= len(words) // 4:
            cover *= 0.5  # repetitive output
        return lang, round(0.99 * cover, 6)

    def __call__(self, req: dict) -> dict:
        lang, conf = self.classify(req["text"])
        return {"id": req["id"], "language": lang, "confidence": conf}


# --------------------------------------------------------------------- acoustic

def acoustic_vocab(language: str) -> tuple[str, ...]:
    prof = get_profile(language)
    letters = sorted({chr(cp).lower() for cp in prof.charset
                      if unicodedata.category(chr(cp))[0] in "LM"})
    return (BLANK, STAR) + tuple(letters)


class MockAcoustic:
    """Writes spiky synthetic CTC emissions following the truth timing."""

    def __init__(self, truth: Truth, frame_s: float = FRAME_S):
        self.truth = truth
        self.frame_s = frame_s

    def emissions(self, audio_path: str, start_s: float, end_s: float, language: str) -> EmissionMatrix:
        vocab = acoustic_vocab(language)
        index = {s: i for i, s in enumerate(vocab)}
        V = len(vocab)
        T = max(1, int(round((end_s - start_s) / self.frame_s)))
        probs = np.full((T, V), 0.05 / (V - 2))
        spoken = []
        for s, e, text in self.truth.utterances(audio_path):
            if e <= start_s or s >= end_s:
                continue
            chars = [index.get(c, 1) for c in self.truth.normalized(text, language).lower() if not c.isspace()]
            spoken.append((s, e, chars))
        for f in range(T):
            t = start_s + (f + 0.5) * self.frame_s
            row = probs[f]
            sym, main = 0, True
            for s, e, chars in spoken:
                if s <= t < e and chars:
                    pos = (t - s) / (e - s) * len(chars)
                    k = min(int(pos), len(chars) - 1)
                    sym, main = chars[k], pos - k < 0.75
                    break
            if sym == 0:
                row[0] = 0.95
            elif main:
                row[sym], row[0] = 0.85, 0.1
            else:
                row[0], row[sym] = 0.85, 0.1
            row /= row.sum()
        return EmissionMatrix(np.log(probs).astype(np.float32), self.frame_s, vocab, 0, 1)

    def __call__(self, req: dict) -> dict:
        lang = req.get("language") or self.truth.language
        e = self.emissions(req["audio_path"], float(req["start_s"]), float(req["end_s"]), lang)
        Path(req["output_path"]).parent.mkdir(parents=True, exist_ok=True)
        save_emissions(e, req["output_path"])
        return {"id": req["id"], "emission_path": req["output_path"], "frames": e.num_frames}


def build_handler(role: str, truth: Optional[Truth], noise: float = 0.0, seed: int = 0, alpha: float = 0.7,
                  lid_table: Optional[dict] = None):
    if role == P.TRANSCRIBER:
        return MockTranscriber(truth, noise, seed)
    if role == P.TRAINER:
        return MockTrainer(truth, alpha)
    if role == P.LID:
        return MockLid(lid_table)
    if role == P.ACOUSTIC:
        return MockAcoustic(truth)
    raise ValueError(f"unknown role {role!r}")


def main(argv: Optional[list[str]] = None) -> None:
    parser = argparse.ArgumentParser(description="reference mock backend")
    parser.add_argument("role", choices=P.ROLES)
    parser.add_argument("--truth", help="truth JSON file")
    parser.add_argument("--noise", type=float, default=0.0, help="base transcriber noise rate")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--alpha", type=float, default=0.7, help="trainer contraction factor")
    parser.add_argument("--lid-table", help="JSON object text -> [language, confidence]")
    add_transport_args(parser)
    args = parser.parse_args(argv)
    truth = Truth.load(args.truth) if args.truth else None
    if truth is None and args.role != P.LID:
        parser.error(f"{args.role} mock needs --truth")
    table = json.loads(Path(args.lid_table).read_text(encoding="utf-8")) if args.lid_table else None
    serve(build_handler(args.role, truth, args.noise, args.seed, args.alpha, table), args.role, args)


if __name__ == "__main__":
    main()
