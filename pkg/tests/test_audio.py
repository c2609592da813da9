import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gsbuild.audio import (AudioBuffer, NotRiffError, TruncatedWavError, UnsupportedCodecError, WavError,
                           downmix, encode_wav, extract_segment, parse_wav, resample, to_canonical)


def pcm16(samples, rate=16000, channels=1) -> bytes:
    return encode_wav(AudioBuffer(np.asarray(samples, dtype=np.float64), rate, channels))


def test_one_second_mono():
    b = parse_wav(pcm16(np.zeros(16000)))
    assert b.frames == 16000 and b.duration_s == 1.0


def test_zero_length_data():
    b = parse_wav(pcm16(np.zeros(0)))
    assert b.frames == 0 and b.duration_s == 0.0


def test_pcm16_round_trip_exact():
    x = np.arange(-32768, 32768, 7) / 32768.0
    assert np.array_equal(parse_wav(pcm16(x)).samples, x)


def test_float32_round_trip():
    x = np.linspace(-1, 1, 101)
    b = parse_wav(encode_wav(AudioBuffer(x, 22050, 1), float32=True))
    assert b.sample_rate_hz == 22050
    assert np.allclose(b.samples, x.astype(np.float32))


def test_stereo_ramp_downmix_is_sample_exact():
    ramp = np.arange(0, 2000) / 32768.0
    inter = np.repeat(ramp, 2)
    b = parse_wav(pcm16(inter, channels=2))
    assert b.channels == 2
    assert np.array_equal(downmix(b).samples, ramp)


def test_downmix_identity_and_cancellation():
    mono = AudioBuffer(np.linspace(-1, 1, 50), 16000, 1)
    assert downmix(mono) is mono
    x = np.linspace(-0.5, 0.5, 50)
    st_ = AudioBuffer(np.stack([x, -x], axis=1).ravel(), 16000, 2)
    assert np.all(downmix(st_).samples == 0)


@given(st.floats(-2, 2), st.floats(-2, 2), st.integers(0, 1000))
def test_downmix_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.uniform(-1, 1, 64), rng.uniform(-1, 1, 64)
    mk = lambda s: AudioBuffer(s, 16000, 2)
    lhs = downmix(mk(a * x + b * y)).samples
    rhs = a * downmix(mk(x)).samples + b * downmix(mk(y)).samples
    assert np.allclose(lhs, rhs, atol=1e-6)


def test_extensible_and_unknown_chunks():
    payload = (np.array([1000, -1000, 0], dtype="<i2")).tobytes()
    fmt = struct.pack("<HHIIHH", 0xFFFE, 1, 16000, 32000, 2, 16) + struct.pack("<HHIH", 22, 16, 0, 1) + b"\0" * 14
    body = b"WAVE" + b"LIST" + struct.pack("<I", 3) + b"abc\0"
    body += b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(payload)) + payload
    b = parse_wav(b"RIFF" + struct.pack("<I", len(body)) + body)
    assert np.allclose(b.samples, [1000 / 32768, -1000 / 32768, 0])


def test_typed_errors():
    with pytest.raises(NotRiffError):
        parse_wav(b"RIFX" + b"\0" * 40)
    blob = bytearray(pcm16(np.zeros(10)))
    blob[20:22] = struct.pack("<H", 2)  # ADPCM tag
    with pytest.raises(UnsupportedCodecError):
        parse_wav(bytes(blob))
    with pytest.raises(TruncatedWavError):
        parse_wav(b"RIFF\0\0\0\0WAVE")


def test_short_data_chunk_uses_what_is_there(caplog):
    blob = pcm16(np.full(100, 0.25))
    b = parse_wav(blob[:-21])  # cut mid-sample: 89 whole frames remain
    assert b.frames == 89
    assert "shorter" in caplog.text


def test_every_truncation_errors_or_parses():
    blob = pcm16(np.linspace(-1, 1, 64), channels=2)
    for cut in range(len(blob)):
        try:
            b = parse_wav(blob[:cut])
        except WavError:
            continue
        assert b.frames <= 32


@settings(max_examples=200)
@given(st.binary(max_size=120))
def test_garbage_never_crashes(junk):
    try:
        parse_wav(b"RIFF" + junk[:4] + b"WAVE" + junk[4:])
    except WavError:
        pass


def test_resample_lengths_and_identity():
    b = AudioBuffer(np.zeros(48000), 48000, 1)
    assert abs(resample(b, 16000).frames - 16000) <= 1
    same = AudioBuffer(np.ones(10), 16000, 1)
    assert resample(same, 16000) is same
    with pytest.raises(ValueError):
        resample(same, 0)
    for n in (1, 7, 441, 44101):
        out = resample(AudioBuffer(np.zeros(n), 44100, 1), 16000)
        assert abs(out.frames - n * 16000 / 44100) <= 1


def spectrum_db(x: np.ndarray) -> np.ndarray:
    w = np.hanning(len(x))
    p = np.abs(np.fft.rfft(x * w)) ** 2
    return p


def test_sine_48k_to_16k_spectrum():
    rate = 48000
    t = np.arange(rate * 2) / rate
    b = AudioBuffer(0.5 * np.sin(2 * np.pi * 1000 * t), rate, 1)
    out = resample(b, 16000).samples[800:-800]  # drop edge transients
    n = len(out)
    p = spectrum_db(out)
    freqs = np.fft.rfftfreq(n, 1 / 16000)
    peak = int(np.argmax(p))
    bin_hz = 16000 / n
    assert abs(freqs[peak] - 1000) <= bin_hz
    main = np.abs(np.arange(len(p)) - peak) <= 4
    ratio_db = 10 * np.log10(p[~main].sum() / p[main].sum())
    assert ratio_db < -30


def test_aliasing_tone_is_suppressed():
    # 7.5 kHz is below the 8 kHz Nyquist; 10 kHz would alias to 6 kHz
    rate = 48000
    t = np.arange(rate) / rate
    x = np.sin(2 * np.pi * 10000 * t)
    out = resample(AudioBuffer(x, rate, 1), 16000).samples[200:-200]
    assert np.sqrt(np.mean(out ** 2)) < 0.1 * np.sqrt(0.5)


def test_round_trip_keeps_peak_bin():
    rate = 16000
    t = np.arange(rate) / rate
    b = AudioBuffer(np.sin(2 * np.pi * 440 * t), rate, 1)
    back = resample(resample(b, 44100), 16000).samples
    assert int(np.argmax(np.abs(np.fft.rfft(back)))) == int(np.argmax(np.abs(np.fft.rfft(b.samples))))


def test_canonical_form():
    b = AudioBuffer(np.zeros(48000 * 2), 48000, 2)
    c = to_canonical(b)
    assert (c.sample_rate_hz, c.channels) == (16000, 1)


def test_extract_segment():
    b = AudioBuffer(np.arange(16000, dtype=float), 16000, 1)
    assert np.array_equal(extract_segment(b, 0, 1.0).samples, b.samples)
    assert extract_segment(b, 0, 1 / 16000).frames == 1
    with pytest.raises(ValueError):
        extract_segment(b, 0.5, 0.2)


@given(st.lists(st.integers(1, 15999), min_size=1, max_size=6, unique=True))
def test_adjacent_slices_concatenate(cuts):
    b = AudioBuffer(np.arange(16000, dtype=float), 16000, 1)
    edges = [0] + sorted(cuts) + [16000]
    parts = [extract_segment(b, lo / 16000, hi / 16000).samples for lo, hi in zip(edges, edges[1:])]
    assert np.array_equal(np.concatenate(parts), b.samples)
