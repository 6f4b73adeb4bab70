"""Framing, overlap-add and STFT magnitudes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor, _col2im, _result

MAG_FLOOR = 1e-8


@dataclass
class AudioBuffer:
    """Mono waveform with its sample rate."""

    samples: np.ndarray
    sample_rate: int = 8000

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if not np.issubdtype(self.samples.dtype, np.floating):
            self.samples = self.samples.astype(np.float32)
        if self.samples.ndim != 1:
            raise ValueError(f"AudioBuffer is mono; got samples of shape {self.samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("AudioBuffer samples must be finite")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class StftConfig:
    window_length: int = 256
    hop: int = 128
    window: str = "hann"  # "rect" is a debugging mode

    def __post_init__(self):
        w = self.window_length
        if w <= 0 or w & (w - 1):
            raise ValueError(f"window_length must be a power of two, got {w}")
        if not 0 < self.hop <= w:
            raise ValueError(f"hop must be in (0, window_length], got {self.hop}")
        if self.window not in ("hann", "rect"):
            raise ValueError(f"unknown window {self.window!r}")

    @property
    def n_bins(self) -> int:
        return self.window_length // 2 + 1

    def window_array(self, dtype=np.float64) -> np.ndarray:
        if self.window == "rect":
            return np.ones(self.window_length, dtype=dtype)
        n = np.arange(self.window_length)
        # periodic Hann
        return (0.5 - 0.5 * np.cos(2 * np.pi * n / self.window_length)).astype(dtype)


def num_frames(T: int, L: int, S: int) -> int:
    """Frame count after end-padding so (T_padded - L) is a multiple of S."""
    if T <= L:
        return 1
    return -(-(T - L) // S) + 1


def _samples(x) -> np.ndarray:
    if isinstance(x, AudioBuffer):
        return x.samples
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x)


def _frame_array(x: np.ndarray, L: int, S: int) -> np.ndarray:
    """[..., T] -> [..., K, L] with end zero-padding."""
    T = x.shape[-1]
    K = num_frames(T, L, S)
    padded = (K - 1) * S + L
    if padded > T:
        x = np.pad(x, [(0, 0)] * (x.ndim - 1) + [(0, padded - T)])
    idx = np.arange(K)[:, None] * S + np.arange(L)[None, :]
    return x[..., idx]


def frame(x, L: int, S: int) -> Tensor:
    """Split a waveform into K overlapping frames of length L and stride S."""
    if L <= 0 or not 0 < S <= L:
        raise ValueError(f"need L > 0 and 0 < S <= L, got L={L}, S={S}")
    samples = _samples(x)
    if samples.size == 0:
        raise ValueError("cannot frame an empty signal")
    return Tensor(_frame_array(samples, L, S))


def overlap_add(frames, S: int, T: int, sample_rate: int = 8000) -> AudioBuffer:
    """Sum shifted rows of a [K, L] frame matrix and truncate to T samples."""
    data = _samples(frames)
    if data.ndim != 2:
        raise ValueError(f"frames must be [K, L], got shape {data.shape}")
    K, L = data.shape
    if T <= 0 or num_frames(T, L, S) != K:
        raise ValueError(f"T={T} is inconsistent with K={K} frames of length {L} at stride {S}")
    out = _col2im(data.T[None, None], (K - 1) * S + L, S, 1)[0, 0]
    return AudioBuffer(out[:T], sample_rate)


def stft_magnitude(x, cfg: StftConfig = StftConfig()) -> Tensor:
    """One-sided STFT magnitude, [..., T] -> [..., F, M]; differentiable for Tensor input.

    Signals shorter than one window are zero-padded to a single frame.
    """
    if isinstance(x, AudioBuffer):
        x = Tensor(x.samples)
    elif not isinstance(x, Tensor):
        x = Tensor(np.asarray(x))
    W, hop = cfg.window_length, cfg.hop
    T = x.shape[-1]
    win = cfg.window_array(x.dtype)
    frames = _frame_array(x.data, W, hop) * win
    spec = np.fft.rfft(frames, axis=-1)
    mag = np.abs(spec)
    out = np.swapaxes(mag, -1, -2).astype(x.dtype)

    def backward(g):
        coef = np.swapaxes(g, -1, -2) / np.maximum(mag, MAG_FLOOR)
        h = coef * spec
        h[..., 0] *= 2
        h[..., -1] *= 2
        gframes = np.fft.irfft(h, n=W, axis=-1) * (W / 2) * win
        K = gframes.shape[-2]
        lead = gframes.shape[:-2]
        flat = gframes.reshape((-1, K, W))
        cols = np.swapaxes(flat, 1, 2)[:, None]  # [b, 1, W, K]
        gx = _col2im(cols, (K - 1) * hop + W, hop, 1)[:, 0, :T]
        return (gx.reshape(lead + (T,)).astype(x.dtype),)

    return _result(out, (x,), backward)

