"""RIFF/WAVE reading and writing for mono PCM16 and IEEE float32."""

from __future__ import annotations

import logging
import os
import struct

import numpy as np

from .dsp import AudioBuffer

log = logging.getLogger(__name__)

EXPECTED_RATE = 8000
_PCM = 1
_FLOAT = 3
_EXTENSIBLE = 0xFFFE


class WavError(ValueError):
    pass


class WavChannelError(WavError):
    pass


class WavCodecError(WavError):
    pass


class WavTruncatedError(WavError):
    pass


def wav_read(path: str | os.PathLike) -> AudioBuffer:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 12:
        raise WavTruncatedError(f"{path}: file too short for a RIFF header ({len(blob)} bytes)")
    riff, _, wave = struct.unpack("<4sI4s", blob[:12])
    if riff != b"RIFF" or wave != b"WAVE":
        raise WavCodecError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(blob):
        cid, size = struct.unpack("<4sI", blob[pos : pos + 8])
        body = blob[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise WavTruncatedError(f"{path}: chunk {cid!r} declares {size} bytes, {len(body)} present")
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or len(fmt) < 16:
        raise WavTruncatedError(f"{path}: missing or short fmt chunk")
    if data is None:
        raise WavTruncatedError(f"{path}: missing data chunk")

    tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", fmt[:16])
    if tag == _EXTENSIBLE and len(fmt) >= 26:
        tag = struct.unpack("<H", fmt[24:26])[0]
    if channels != 1:
        raise WavChannelError(f"{path}: expected mono, file has {channels} channels")
    if tag == _PCM and bits == 16:
        dtype = np.dtype("<i2")
    elif tag == _FLOAT and bits == 32:
        dtype = np.dtype("<f4")
    else:
        raise WavCodecError(f"{path}: unsupported codec (format tag {tag}, {bits} bits)")
    if len(data) % dtype.itemsize:
        raise WavTruncatedError(f"{path}: data chunk is not a whole number of samples")
    if rate != EXPECTED_RATE:
        log.warning("%s: sample rate %d Hz (expected %d); not resampling", path, rate, EXPECTED_RATE)

    raw = np.frombuffer(data, dtype=dtype)
    if dtype.kind == "i":
        samples = raw.astype(np.float32) / 32768.0
    else:
        samples = raw.astype(np.float32)
    return AudioBuffer(samples, rate)


def wav_write(path: str | os.PathLike, audio: AudioBuffer, encoding: str = "float32") -> None:
    """Write ``audio`` as mono ``float32`` or ``pcm16``."""
    if encoding == "float32":
        payload = np.asarray(audio.samples, dtype="<f4").tobytes()
        tag, bits = _FLOAT, 32
    elif encoding == "pcm16":
        q = np.clip(np.round(np.asarray(audio.samples, dtype=np.float64) * 32768.0), -32768, 32767)
        payload = q.astype("<i2").tobytes()
        tag, bits = _PCM, 16
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    block = bits // 8
    fmt = struct.pack("<HHIIHH", tag, 1, int(audio.sample_rate), int(audio.sample_rate) * block, block, bits)
    chunks = b"fmt " + struct.pack("<I", len(fmt)) + fmt
    chunks += b"data" + struct.pack("<I", len(payload)) + payload
    if len(payload) & 1:
        chunks += b"\x00"
    with open(path, "wb") as f:
        f.write(b"RIFF" + struct.pack("<I", 4 + len(chunks)) + b"WAVE" + chunks)
