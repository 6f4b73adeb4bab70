import struct
import wave

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tasnet.dsp import AudioBuffer, StftConfig, frame, num_frames, overlap_add, stft_magnitude
from tasnet.wavio import WavChannelError, WavCodecError, WavTruncatedError, wav_read, wav_write

from oracles import naive_stft_magnitude


def test_frame_counts():
    assert frame(np.arange(32.0), 16, 8).shape == (3, 16)
    assert num_frames(32000, 16, 8) == 3999


def test_frame_partition_when_hop_equals_length():
    x = np.arange(1.0, 30.0)
    rows = frame(x, 8, 8).data
    flat = rows.reshape(-1)
    np.testing.assert_array_equal(flat[: len(x)], x)
    assert not np.any(flat[len(x):])


def test_frame_rejects_empty():
    with pytest.raises(ValueError):
        frame(np.zeros(0), 4, 2)


def test_overlap_add_single_frame():
    row = np.random.default_rng(0).standard_normal((1, 16))
    np.testing.assert_array_equal(overlap_add(row, 8, 16).samples, row[0])


def test_overlap_add_rejects_inconsistent_length():
    with pytest.raises(ValueError):
        overlap_add(np.zeros((3, 16)), 8, 100)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**16), L_exp=st.integers(1, 5), ratio_exp=st.integers(0, 3), T=st.integers(40, 300))
def test_frame_overlap_add_properties(seed, L_exp, ratio_exp, T):
    L = 2**L_exp
    S = max(1, L // 2**ratio_exp)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(T)
    frames = frame(x, L, S).data
    y = overlap_add(frames, S, T).samples
    # constant overlap count L/S on interior samples
    interior = slice(L, T - L)
    np.testing.assert_allclose(y[interior] / (L / S), x[interior], atol=1e-6)
    # adjointness: <frame(x), F> = <x, overlap_add(F)>
    F = rng.standard_normal(frames.shape)
    lhs = np.sum(frames * F)
    rhs = np.dot(x, overlap_add(F, S, T).samples)
    assert abs(lhs - rhs) <= 1e-6 * max(1.0, abs(lhs))


@pytest.mark.parametrize("seed", range(3))
def test_stft_matches_naive_dft(seed):
    x = np.random.default_rng(seed).standard_normal(1024)
    got = stft_magnitude(x, StftConfig()).data
    want = naive_stft_magnitude(x, 256, 128)
    assert got.shape == want.shape
    rel = np.max(np.abs(got - want)) / np.max(np.abs(want))
    assert rel < 1e-6


def test_stft_non_aligned_length_matches_naive_dft():
    x = np.random.default_rng(9).standard_normal(300)
    cfg = StftConfig(64, 16)
    np.testing.assert_allclose(stft_magnitude(x, cfg).data, naive_stft_magnitude(x, 64, 16), rtol=1e-6, atol=1e-9)


def test_stft_zero_signal():
    assert not np.any(stft_magnitude(np.zeros(1024)).data)


def test_stft_impulse_rect_window_is_flat():
    x = np.zeros(1024)
    x[128] = 1.0  # centre of frame 0
    mag = stft_magnitude(x, StftConfig(window="rect")).data
    np.testing.assert_allclose(mag[:, 0], 1.0, atol=1e-12)


def test_stft_config_validation():
    with pytest.raises(ValueError):
        StftConfig(window_length=200)
    with pytest.raises(ValueError):
        StftConfig(window_length=256, hop=300)


def test_audio_buffer_rejects_stereo_and_nan():
    with pytest.raises(ValueError):
        AudioBuffer(np.zeros((2, 10)))
    with pytest.raises(ValueError):
        AudioBuffer(np.array([0.0, np.nan]))


def test_wav_float32_round_trip_bit_exact(tmp_path):
    x = np.random.default_rng(0).uniform(-1, 1, 1001).astype(np.float32)
    wav_write(tmp_path / "a.wav", AudioBuffer(x))
    back = wav_read(tmp_path / "a.wav")
    assert back.sample_rate == 8000
    assert back.samples.dtype == np.float32
    assert back.samples.tobytes() == x.tobytes()


def test_wav_pcm16_round_trip_within_one_lsb(tmp_path):
    x = np.random.default_rng(1).uniform(-1, 0.999, 500)
    wav_write(tmp_path / "p.wav", AudioBuffer(x), encoding="pcm16")
    assert np.max(np.abs(wav_read(tmp_path / "p.wav").samples - x)) <= 1 / 32768


def _stdlib_wav(path, frames: bytes, channels=1, width=2, rate=8000):
    with wave.open(str(path), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(width)
        w.setframerate(rate)
        w.writeframes(frames)


def test_wav_pcm16_scaling(tmp_path):
    _stdlib_wav(tmp_path / "h.wav", struct.pack("<3h", 16384, -32768, 0))
    np.testing.assert_array_equal(wav_read(tmp_path / "h.wav").samples, [0.5, -1.0, 0.0])


def test_wav_stereo_rejected(tmp_path):
    _stdlib_wav(tmp_path / "s.wav", struct.pack("<4h", 1, 2, 3, 4), channels=2)
    with pytest.raises(WavChannelError, match="channels"):
        wav_read(tmp_path / "s.wav")


def test_wav_unsupported_codec_rejected(tmp_path):
    _stdlib_wav(tmp_path / "c.wav", bytes(9), width=3)
    with pytest.raises(WavCodecError):
        wav_read(tmp_path / "c.wav")


def test_wav_truncated_rejected(tmp_path):
    wav_write(tmp_path / "t.wav", AudioBuffer(np.zeros(100, dtype=np.float32)))
    blob = (tmp_path / "t.wav").read_bytes()
    (tmp_path / "t.wav").write_bytes(blob[:-37])
    with pytest.raises(WavTruncatedError):
        wav_read(tmp_path / "t.wav")
