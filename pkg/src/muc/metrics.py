"""Objective spectral metrics between a reference and a decoded signal."""
from __future__ import annotations

import numpy as np

from . import dsp

MAG_FLOOR = 1e-5


def _pair(ref, out) -> tuple[np.ndarray, np.ndarray, int]:
    a = ref.mono() if isinstance(ref, dsp.AudioBuffer) else np.asarray(ref, dtype=np.float64)
    b = out.mono() if isinstance(out, dsp.AudioBuffer) else np.asarray(out, dtype=np.float64)
    sr = ref.sample_rate if isinstance(ref, dsp.AudioBuffer) else 24000
    n = min(len(a), len(b))
    if n == 0:
        raise ValueError("empty signal")
    return a[:n], b[:n], sr


def lsd_from_magnitudes(ref_mag: np.ndarray, out_mag: np.ndarray, floor: float = MAG_FLOOR) -> float:
    """Mean over frames of the RMS (over bins) log10-magnitude difference, in dB."""
    d = np.log10(np.maximum(ref_mag, floor)) - np.log10(np.maximum(out_mag, floor))
    return float(np.mean(np.sqrt(np.mean(400.0 * d * d, axis=-1))))


def log_spectral_distance(ref, out) -> float:
    a, b, sr = _pair(ref, out)
    n_fft, hop = dsp.frame_params(sr)
    return lsd_from_magnitudes(np.abs(dsp.stft(a, n_fft, hop)), np.abs(dsp.stft(b, n_fft, hop)))


def mel_distortion(ref, out) -> float:
    """Mean absolute difference of natural-log mel spectrograms."""
    a, b, sr = _pair(ref, out)
    ma = dsp.mel_spectrogram(dsp.AudioBuffer(a, sr)).frames
    mb = dsp.mel_spectrogram(dsp.AudioBuffer(b, sr)).frames
    return float(np.mean(np.abs(ma - mb)))


def latent_mse(ref: np.ndarray, out: np.ndarray) -> float:
    n = min(len(ref), len(out))
    return float(np.mean((np.asarray(ref[:n]) - np.asarray(out[:n])) ** 2))
