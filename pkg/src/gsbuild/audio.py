"""WAV parsing, downmix, resampling and span extraction.

Only RIFF/WAVE with PCM16 or IEEE float32 payloads is accepted; other codecs
must be converted upstream.  Samples are held interleaved as float64 in
[-1, 1].
"""
from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly

log = logging.getLogger(__name__)

CANONICAL_RATE = 16000
MIN_RATE = 8000
MAX_RATE = 192000

_FMT_PCM = 1
_FMT_FLOAT = 3
_FMT_EXTENSIBLE = 0xFFFE

class WavError(ValueError):
    """Base class for WAV parse failures."""


class NotRiffError(WavError):
    pass


class UnsupportedCodecError(WavError):
    pass


class TruncatedWavError(WavError):
    pass


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray  # interleaved, float64
    sample_rate_hz: int
    channels: int = 1

    def __post_init__(self) -> None:
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        if len(self.samples) % self.channels:
            raise ValueError("sample count not divisible by channel count")
        if not MIN_RATE <= self.sample_rate_hz <= MAX_RATE:
            raise ValueError(f"sample rate {self.sample_rate_hz} outside [{MIN_RATE}, {MAX_RATE}]")

    @property
    def frames(self) -> int:
        return len(self.samples) // self.channels

    @property
    def duration_s(self) -> float:
        return self.frames / self.sample_rate_hz


def round_half_away(x: float) -> int:
    """Nearest integer, ties away from zero."""
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def parse_wav(data: bytes) -> AudioBuffer:
    if len(data) < 12:
        raise TruncatedWavError(f"{len(data)} bytes is too short for a RIFF header")
    if data[0:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise NotRiffError("missing RIFF/WAVE magic")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body_start = pos + 8
        available = len(data) - body_start
        if chunk_id == b"fmt ":
            if size < 16 or available < 16:
                raise TruncatedWavError("fmt chunk truncated")
            fmt = _parse_fmt(data[body_start:body_start + min(size, available)])
        elif chunk_id == b"data":
            if size > available:
                log.warning("data chunk declares %d bytes, only %d present; using the shorter", size, available)
                size = available
            payload = data[body_start:body_start + size]
            if fmt is not None:
                break
        # chunks are word aligned
        pos = body_start + size + (size & 1)

    if fmt is None:
        raise TruncatedWavError("no fmt chunk found")
    if payload is None:
        raise TruncatedWavError("no data chunk found")

    audio_format, channels, rate, bits = fmt
    block = channels * bits // 8
    usable = len(payload) - len(payload) % block
    if usable != len(payload):
        log.warning("dropping %d trailing bytes of a partial frame", len(payload) - usable)
    payload = payload[:usable]
    if audio_format == _FMT_PCM:
        samples = np.frombuffer(payload, dtype="<i2").astype(np.float64) / 32768.0
    else:
        samples = np.frombuffer(payload, dtype="<f4").astype(np.float64)
        if not np.all(np.isfinite(samples)):
            raise WavError("non-finite float samples")
        samples = np.clip(samples, -1.0, 1.0)
    return AudioBuffer(samples, rate, channels)


def _parse_fmt(body: bytes) -> tuple[int, int, int, int]:
    audio_format, channels, rate, _byte_rate, _align, bits = struct.unpack_from("<HHIIHH", body, 0)
    if audio_format == _FMT_EXTENSIBLE:
        if len(body) < 40:
            raise TruncatedWavError("extensible fmt chunk truncated")
        (audio_format,) = struct.unpack_from("<H", body, 24)
    if (audio_format, bits) not in {(_FMT_PCM, 16), (_FMT_FLOAT, 32)}:
        raise UnsupportedCodecError(f"format tag {audio_format} with {bits} bits is not supported")
    if channels < 1:
        raise WavError("zero channels")
    if not MIN_RATE <= rate <= MAX_RATE:
        raise UnsupportedCodecError(f"sample rate {rate} not supported")
    return audio_format, channels, rate, bits


def read_wav(path: str | Path) -> AudioBuffer:
    return parse_wav(Path(path).read_bytes())


def encode_wav(buf: AudioBuffer, float32: bool = False) -> bytes:
    if float32:
        payload = buf.samples.astype("<f4").tobytes()
        tag, bits = _FMT_FLOAT, 32
    else:
        ints = np.clip(np.round(buf.samples * 32768.0), -32768, 32767).astype("<i2")
        payload = ints.tobytes()
        tag, bits = _FMT_PCM, 16
    block = buf.channels * bits // 8
    fmt = struct.pack("<HHIIHH", tag, buf.channels, buf.sample_rate_hz,
                      buf.sample_rate_hz * block, block, bits)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt
    body += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        body += b"\x00"
    return b"RIFF" + struct.pack("<I", len(body)) + body


def write_wav(path: str | Path, buf: AudioBuffer, float32: bool = False) -> None:
    Path(path).write_bytes(encode_wav(buf, float32=float32))


def downmix(b: AudioBuffer) -> AudioBuffer:
    if b.channels == 1:
        return b
    frames = b.samples.reshape(-1, b.channels)
    return AudioBuffer(frames.mean(axis=1), b.sample_rate_hz, 1)


def resample(b: AudioBuffer, target_hz: int) -> AudioBuffer:
    """Polyphase resampling of a mono buffer (Kaiser-windowed FIR from scipy)."""
    if target_hz <= 0:
        raise ValueError(f"target rate must be positive, got {target_hz}")
    if b.channels != 1:
        raise ValueError("resample expects mono input; downmix first")
    if target_hz == b.sample_rate_hz:
        return b
    g = math.gcd(target_hz, b.sample_rate_hz)
    out = resample_poly(b.samples, target_hz // g, b.sample_rate_hz // g)
    return AudioBuffer(np.asarray(out, dtype=np.float64), target_hz, 1)


def to_canonical(b: AudioBuffer) -> AudioBuffer:
    return resample(downmix(b), CANONICAL_RATE)


def extract_segment(b: AudioBuffer, start_s: float, end_s: float) -> AudioBuffer:
    if not 0 <= start_s < end_s <= b.duration_s + 0.5 / b.sample_rate_hz:
        raise ValueError(f"segment [{start_s}, {end_s}) outside [0, {b.duration_s}]")
    lo = round_half_away(start_s * b.sample_rate_hz)
    hi = min(round_half_away(end_s * b.sample_rate_hz), b.frames)
    c = b.channels
    return AudioBuffer(b.samples[lo * c:hi * c], b.sample_rate_hz, c)
