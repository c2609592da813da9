"""Synthetic corpora with hidden ground truth, for the mock backends.

``make_toy_corpus`` writes a small audio tree plus truth file that the full
pipeline can run on.  ``synthetic_pool`` builds an audio-free pseudo-labelled
pool for refinement simulations.
"""
from __future__ import annotations

import random
from pathlib import Path

import numpy as np

from gsbuild.audio import AudioBuffer, write_wav
from gsbuild.backends.mock import MockTranscriber, Truth
from gsbuild.manifest import UNASSIGNED, Manifest, Segment, VideoRecord, segment_id
from gsbuild.metrics import CHAR, levenshtein, tokenize
from gsbuild.textnorm import get_profile, normalize

ID_WORDS = (
    "saya kamu kita mereka rumah jalan pasar makan minum pergi datang besar kecil baru lama "
    "hari ini besok kemarin pagi siang malam kota desa sekolah guru murid buku air api tanah "
    "langit laut gunung sungai hutan pohon bunga burung ikan kucing anjing mobil kereta kapal "
    "harga uang kerja bisnis musik lagu film berita cerita teman keluarga ibu ayah anak"
).split()

VI_WORDS = "tôi bạn chúng ta nhà đường chợ ăn uống đi đến lớn nhỏ mới cũ hôm nay ngày mai".split()

INTRO = "selamat datang di kanal kami"


def _sentence(rng: random.Random, words, chars: int) -> str:
    out: list[str] = []
    while sum(len(w) for w in out) < chars:
        out.append(rng.choice(words))
    return " ".join(out)


def hidden_cer(m: Manifest, truth: Truth) -> float:
    """Micro-averaged CER of a manifest's labels against hidden truth."""
    edits = total = 0
    for seg in m.ordered_segments():
        video = m.videos.get(seg.video)
        ref = truth.segment_text(seg.id, video.path if video else "", seg.start_s, seg.end_s, m.language)
        r = tokenize(ref, CHAR).tokens
        edits += levenshtein(r, tokenize(seg.text, CHAR).tokens)
        total += len(r)
    return edits / total if total else 0.0


def synthetic_pool(n_channels: int = 12, videos_per_channel: int = 2, segments_per_video: int = 25,
                   base_noise: float = 0.20, seed: int = 0, language: str = "id") -> tuple[Manifest, Truth]:
    """Pseudo-labelled pool whose labels come from the noisy mock transcriber."""
    rng = random.Random(seed)
    profile = get_profile(language)
    truth = Truth(language)
    videos: dict[str, VideoRecord] = {}
    clean: dict[str, tuple[str, str, float, float]] = {}
    for c in range(n_channels):
        channel = f"ch{c:02d}"
        for v in range(videos_per_channel):
            vid = f"{channel}-v{v:02d}"
            t = 0.0
            for k in range(segments_per_video):
                dur = round(rng.uniform(2.0, 8.0), 3)
                sid = segment_id(vid, k)
                truth.segments[sid] = normalize(_sentence(rng, ID_WORDS, int(dur * 6)), profile)
                clean[sid] = (vid, channel, t, round(t + dur, 3))
                t = round(t + dur + rng.uniform(0.3, 1.5), 3)
            videos[vid] = VideoRecord(vid, channel, f"sim/{channel}/{vid}.wav", round(t, 3), 16000)
    whisper = MockTranscriber(truth, noise=base_noise, seed=seed)
    segments = {}
    for sid, (vid, channel, start, end) in clean.items():
        label = whisper({"type": "transcribe", "id": sid, "audio_path": videos[vid].path,
                         "start_s": start, "end_s": end})["text"]
        label = normalize(label, profile)
        segments[sid] = Segment(sid, vid, channel, start, end, label, label, language)
    splits = {v.channel: UNASSIGNED for v in videos.values()}
    return Manifest(language, videos, segments, splits), truth


# ------------------------------------------------------------------ audio tree

def _tone(rng: random.Random, n: int, rate: int) -> np.ndarray:
    t = np.arange(n) / rate
    sig = np.zeros(n)
    for _ in range(3):
        sig += rng.uniform(0.05, 0.2) * np.sin(2 * np.pi * rng.uniform(150, 900) * t)
    env = np.minimum(1.0, np.minimum(t, t[::-1]) / 0.05) if n else sig
    return sig * env


def _video_plan(rng: random.Random, seconds: float, language: str, specials: list[str]) -> list[list]:
    words = ID_WORDS if language == "id" else VI_WORDS
    utts = []
    t = round(rng.uniform(0.5, 1.0), 2)
    queue = list(specials)
    while True:
        text = queue.pop(0) if queue else None
        dur = round(rng.uniform(2.5, 8.0), 2) if text is None else max(1.5, round(len(text) / 9, 2))
        if text is None:
            text = _sentence(rng, words, int(dur * 9))
        if t + dur > seconds - 0.5:
            break
        utts.append([t, round(t + dur, 2), text])
        t = round(t + dur + rng.uniform(0.8, 2.0), 2)
    return utts


def make_toy_corpus(root: str | Path, seed: int = 0, video_s: float = 60.0) -> Path:
    """Ten one-minute videos over five channels (about ten minutes of audio).

    One channel carries a Vietnamese video that language detection should
    drop; a few utterances are planted to trip each filter rule.  Returns the
    path of the truth file.
    """
    root = Path(root)
    rng = random.Random(seed)
    truth = Truth("id")
    plan = {
        "ch00": [("v00", "id", [INTRO] * 7), ("v01", "id", ["Harga naik 10 persen, kata Ibu!"])],
        "ch01": [("v00", "id", ["ha ha ha ha ha ha ha ha"]), ("v01", "id", [])],
        "ch02": [("v00", "id", ["ya"]), ("v01", "id", [])],
        "ch03": [("v00", "id", ["kata สวัสดี itu artinya halo"]), ("v01", "id", [])],
        "ch04": [("v00", "id", []), ("v01", "vi", [])],
    }
    for channel, videos in plan.items():
        for name, lang, specials in videos:
            rate, chans = (48000, 2) if (channel, name) == ("ch01", "v01") else (16000, 1)
            utts = _video_plan(rng, video_s, lang, specials)
            n = int(video_s * rate)
            mono = np.zeros(n)
            for s, e, _ in utts:
                lo, hi = int(s * rate), int(e * rate)
                mono[lo:hi] = _tone(rng, hi - lo, rate)
            samples = np.repeat(mono, chans) if chans > 1 else mono
            path = root / "audio" / channel / f"{name}.wav"
            path.parent.mkdir(parents=True, exist_ok=True)
            write_wav(path, AudioBuffer(samples, rate, chans))
            truth.videos[f"{channel}/{name}.wav"] = {"language": lang, "utterances": utts}
    out = root / "truth.json"
    truth.dump(out)
    return out


def toy_config(root: str | Path, truth_path: str | Path, python: str = "python3", noise: float = 0.05,
               relabel: bool = True) -> Path:
    """Write a ``gsbuild.toml`` next to a toy corpus, wired to the mock backends."""
    root = Path(root)
    truth = Path(truth_path).resolve().as_posix()

    def mock(role: str, *extra: str) -> str:
        cmd = [python, "-m", "gsbuild.backends.mock", role, "--truth", truth, *extra]
        return "[" + ", ".join(f'"{c}"' for c in cmd) + "]"

    text = f"""# Toy pipeline over the synthetic corpus, with mock backends.
[paths]
audio_root = "audio"
work_dir = "work"

[language]
code = "id"

[filter]
# toy scale: each channel has only a couple of minutes of speech
max_dup_per_channel = 3

[partition]
dev_hours = 0.023
test_hours = 0.023
seed = 0

[refine]
n = 2
tau = 0.10
relabel = {str(relabel).lower()}
seed = 0

[refine.noise]
spec_augment = true
dropout = 0.1

[backends.transcriber]
command = {mock("transcriber", "--noise", str(noise))}

[backends.trainer]
command = {mock("trainer", "--alpha", "0.7")}

[backends.lid]
command = {mock("lid")}

[backends.acoustic]
command = {mock("acoustic")}
"""
    path = root / "gsbuild.toml"
    path.write_text(text, encoding="utf-8")
    return path
