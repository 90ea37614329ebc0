"""Mono PCM WAV loading/saving and the ``AudioSignal`` container.

Only RIFF/WAVE files with PCM-16 or IEEE float-32 payloads are accepted.
Chunks other than ``fmt `` and ``data`` are skipped.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ChannelError, IoError, ParseError, UnsupportedFormat

CANONICAL_RATE = 48000

WAVE_FORMAT_PCM = 0x0001
WAVE_FORMAT_IEEE_FLOAT = 0x0003
WAVE_FORMAT_EXTENSIBLE = 0xFFFE


@dataclass(frozen=True, eq=False)
class AudioSignal:
    """Mono audio samples (nominally in [-1, 1]) plus their sample rate."""

    samples: np.ndarray
    sample_rate: int = CANONICAL_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError(f"expected 1-D samples, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def is_normalized(self) -> bool:
        s = self.samples
        return bool(np.all(np.isfinite(s)) and (s.size == 0 or np.max(np.abs(s)) <= 1.0))


def _read_chunks(data: bytes):
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise ParseError("not a RIFF/WAVE file")
    pos = 12
    chunks = {}
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            # tolerate a truncated trailing data chunk, reject anything else
            if cid != b"data":
                raise ParseError(f"truncated {cid!r} chunk")
            body = body[: len(body) - len(body) % 2]
        chunks.setdefault(cid, body)
        pos += 8 + size + (size & 1)
    if b"fmt " not in chunks:
        raise ParseError("missing fmt chunk")
    if b"data" not in chunks:
        raise ParseError("missing data chunk")
    return chunks


def load_wav(path, downmix: bool = False) -> AudioSignal:
    """Read a PCM-16 or float-32 WAV file into an :class:`AudioSignal`.

    Integer samples are scaled by 1/32768.  Multichannel files raise
    :class:`ChannelError` unless ``downmix`` is set, in which case the
    channels are averaged.
    """
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise IoError(str(exc)) from exc

    chunks = _read_chunks(data)
    fmt = chunks[b"fmt "]
    if len(fmt) < 16:
        raise ParseError("fmt chunk too short")
    tag, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", fmt[:16])
    if tag == WAVE_FORMAT_EXTENSIBLE and len(fmt) >= 26:
        (tag,) = struct.unpack("<H", fmt[24:26])
    if channels < 1 or rate < 1:
        raise ParseError(f"invalid header: channels={channels} rate={rate}")

    if tag == WAVE_FORMAT_PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedFormat(f"format tag {tag:#x} with {bits} bits")
    if block_align != channels * dtype.itemsize:
        raise ParseError("block_align inconsistent with channels/bit depth")

    raw = chunks[b"data"]
    n = len(raw) // block_align
    frames = np.frombuffer(raw[: n * block_align], dtype=dtype).reshape(n, channels)
    samples = frames.astype(np.float64) * scale
    if channels > 1:
        if not downmix:
            raise ChannelError(f"{channels} channels; pass downmix=True to average")
        samples = samples.mean(axis=1)
    else:
        samples = samples[:, 0]
    if not np.all(np.isfinite(samples)):
        raise ParseError("non-finite samples in data chunk")
    return AudioSignal(np.clip(samples, -1.0, 1.0), int(rate))


def save_wav(signal: AudioSignal, path) -> None:
    """Write ``signal`` as 16-bit PCM mono.

    Samples are rounded to the nearest 1/32768 step; +1.0 saturates at 32767.
    """
    if not signal.is_normalized():
        raise ValueError("samples must be finite and within [-1, 1]")
    pcm = np.clip(np.round(signal.samples * 32768.0), -32768, 32767).astype("<i2")
    payload = pcm.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, WAVE_FORMAT_PCM, 1,
                                    signal.sample_rate, signal.sample_rate * 2, 2, 16)
    header += b"data" + struct.pack("<I", len(payload))
    try:
        with open(os.fspath(path), "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise IoError(str(exc)) from exc
