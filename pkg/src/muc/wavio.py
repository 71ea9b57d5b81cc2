"""RIFF/WAVE reading and writing for 16-bit PCM and 32-bit float."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .dsp import AudioBuffer


class WavFormatError(ValueError):
    pass


def read_wav(path) -> AudioBuffer:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(12)
    if head[:4] != b"RIFF" or head[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a little-endian RIFF/WAVE file")
    rate, data = wavfile.read(path)
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise WavFormatError(f"{path}: unsupported encoding {data.dtype}; need PCM16 or float32")
    channels = 1 if samples.ndim == 1 else samples.shape[1]
    return AudioBuffer(samples.reshape(-1), int(rate), channels)


def write_wav(path, audio: AudioBuffer, encoding: str = "float32") -> None:
    frames = audio.samples.reshape(-1, audio.channels)
    if audio.channels == 1:
        frames = frames[:, 0]
    clipped = np.clip(frames, -1.0, 1.0)
    if encoding == "float32":
        data = clipped.astype(np.float32)
    elif encoding == "pcm16":
        data = np.round(clipped * 32767.0).astype(np.int16)
    else:
        raise WavFormatError(f"unsupported encoding {encoding!r}")
    wavfile.write(Path(path), audio.sample_rate, data)
