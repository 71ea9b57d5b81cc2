"""Spectral front-end and Griffin-Lim back-end.

All transforms are centre-padded (zeros, ``n_fft // 2`` each side), so a
signal of ``n`` samples yields ``n // hop + 1`` frames. Log features share a
single floor, ``LOG_FLOOR``.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np
from scipy import signal

SUPPORTED_RATES = (16000, 24000, 48000)
LOG_FLOOR = 1e-5

# desk defaults at 24 kHz: 100 frames/s
N_FFT = 1024
HOP = 240
N_MELS = 80


@dataclass
class AudioBuffer:
    """Interleaved PCM floats in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int
    channels: int = 1

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.channels not in (1, 2):
            raise ValueError(f"channels must be 1 or 2, got {self.channels}")
        if self.sample_rate not in SUPPORTED_RATES:
            raise ValueError(f"unsupported sample rate {self.sample_rate}; expected one of {SUPPORTED_RATES}")
        if len(self.samples) % self.channels:
            raise ValueError("sample count not divisible by channel count")

    @property
    def n_frames(self) -> int:
        return len(self.samples) // self.channels

    @property
    def duration(self) -> float:
        return self.n_frames / self.sample_rate

    def channel(self, i: int) -> "AudioBuffer":
        return AudioBuffer(self.samples.reshape(-1, self.channels)[:, i].copy(), self.sample_rate, 1)

    def mono(self) -> np.ndarray:
        return self.samples.reshape(-1, self.channels).mean(axis=1)

    @classmethod
    def from_channels(cls, chans: list[np.ndarray], sample_rate: int) -> "AudioBuffer":
        return cls(np.stack(chans, axis=1).reshape(-1), sample_rate, len(chans))


@dataclass
class MelSpec:
    frames: np.ndarray  # (T, n_mels), natural-log magnitudes
    hop: int
    sample_rate: int
    n_mels: int
    n_fft: int = N_FFT


@dataclass
class CqtSpec:
    frames: np.ndarray  # (T, n_bins)
    bins_per_octave: int
    fmin: float

    def center_frequencies(self) -> np.ndarray:
        k = np.arange(self.frames.shape[1])
        return self.fmin * 2.0 ** (k / self.bins_per_octave)


def _as_signal(audio) -> tuple[np.ndarray, int | None]:
    if isinstance(audio, AudioBuffer):
        return audio.mono(), audio.sample_rate
    return np.asarray(audio, dtype=np.float64).reshape(-1), None


def frame_params(sample_rate: int) -> tuple[int, int]:
    """(n_fft, hop) giving 100 frames/s at a supported rate."""
    if sample_rate not in SUPPORTED_RATES:
        raise ValueError(f"unsupported sample rate {sample_rate}")
    return {16000: 1024, 24000: 1024, 48000: 2048}[sample_rate], sample_rate // 100


@lru_cache(maxsize=8)
def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft(audio, n_fft: int = N_FFT, hop: int = HOP, win_length: int | None = None) -> np.ndarray:
    """Centre-padded short-time Fourier transform, shape (frames, n_fft // 2 + 1).

    ``win_length`` < ``n_fft`` centres a shorter Hann window inside each
    zero-padded frame.
    """
    x, _ = _as_signal(audio)
    if x.size == 0:
        raise ValueError("empty audio")
    if n_fft & (n_fft - 1):
        raise ValueError("n_fft must be a power of two")
    if not 0 < hop <= n_fft:
        raise ValueError("hop must be in (0, n_fft]")
    win_length = win_length or n_fft
    w = hann(win_length)
    half = win_length // 2
    xp = np.pad(x, (half, half))
    n_frames = len(x) // hop + 1
    need = (n_frames - 1) * hop + win_length
    if len(xp) < need:
        xp = np.pad(xp, (0, need - len(xp)))
    idx = np.arange(win_length)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = xp[idx] * w
    if win_length < n_fft:
        lead = (n_fft - win_length) // 2
        frames = np.pad(frames, ((0, 0), (lead, n_fft - win_length - lead)))
    return np.fft.rfft(frames, n=n_fft, axis=1)


def istft(spec: np.ndarray, hop: int = HOP, length: int | None = None) -> np.ndarray:
    """Inverse of :func:`stft` (full-length window) by weighted overlap-add."""
    n_fft = 2 * (spec.shape[1] - 1)
    w = hann(n_fft)
    frames = np.fft.irfft(spec, n=n_fft, axis=1) * w
    n_frames = frames.shape[0]
    total = n_fft + hop * (n_frames - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for i in range(n_frames):
        out[i * hop:i * hop + n_fft] += frames[i]
        norm[i * hop:i * hop + n_fft] += w * w
    out = np.where(norm > 1e-8, out / np.maximum(norm, 1e-8), 0.0)
    out = out[n_fft // 2:]
    if length is None:
        length = (n_frames - 1) * hop
    if len(out) < length:
        out = np.pad(out, (0, length - len(out)))
    return out[:length]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int, n_fft: int = N_FFT, n_mels: int = N_MELS,
                   fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular filters on the HTK mel scale, shape (n_mels, n_fft // 2 + 1).

    Each row has unit peak; a row narrower than one FFT bin falls back to
    its nearest bin so no filter is empty.
    """
    fmax = sample_rate / 2 if fmax is None else fmax
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, len(freqs)))
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
        if not fb[m].any():
            fb[m, np.argmin(np.abs(freqs - mid))] = 1.0
    fb.flags.writeable = False
    return fb


def _log(x: np.ndarray) -> np.ndarray:
    return np.log(np.maximum(x, LOG_FLOOR))


def mel_spectrogram(audio: AudioBuffer, n_mels: int = N_MELS) -> MelSpec:
    """Log-magnitude mel spectrogram at 100 frames/s."""
    n_fft, hop = frame_params(audio.sample_rate)
    mag = np.abs(stft(audio, n_fft, hop))
    fb = mel_filterbank(audio.sample_rate, n_fft, n_mels)
    return MelSpec(_log(mag @ fb.T), hop, audio.sample_rate, n_mels, n_fft)


CQT_FMIN = 32.70
CQT_BINS = 84
CQT_BPO = 12


@lru_cache(maxsize=8)
def cqt_filterbank(sample_rate: int, n_fft: int, n_bins: int = CQT_BINS,
                   bins_per_octave: int = CQT_BPO, fmin: float = CQT_FMIN) -> np.ndarray:
    """Unit-sum triangular filters in log-frequency, one semitone-step wide each side."""
    if fmin * 2.0 ** (n_bins / bins_per_octave) > sample_rate / 2:
        raise ValueError("highest CQT bin lies above Nyquist")
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    centers = fmin * 2.0 ** (np.arange(n_bins) / bins_per_octave)
    with np.errstate(divide="ignore"):
        logf = np.log2(np.maximum(freqs, 1e-9))
    fb = np.maximum(0.0, 1.0 - np.abs(logf[None, :] - np.log2(centers)[:, None]) * bins_per_octave)
    for k in range(n_bins):
        if not fb[k].any():
            fb[k, np.argmin(np.abs(freqs - centers[k]))] = 1.0
    fb /= fb.sum(axis=1, keepdims=True)
    fb.flags.writeable = False
    return fb


def cqt(audio: AudioBuffer, n_bins: int = CQT_BINS, bins_per_octave: int = CQT_BPO,
        fmin: float = CQT_FMIN) -> CqtSpec:
    """Pseudo constant-Q transform: log-spaced filters over long zero-padded FFT frames.

    Frames share hop and centring with :func:`mel_spectrogram`.
    """
    _, hop = frame_params(audio.sample_rate)
    win = 4096 * audio.sample_rate // 24000
    n_fft = 2 * 4096 * audio.sample_rate // 24000
    n_fft = 1 << (n_fft - 1).bit_length()
    fb = cqt_filterbank(audio.sample_rate, n_fft, n_bins, bins_per_octave, fmin)
    mag = np.abs(stft(audio, n_fft, hop, win_length=win))
    return CqtSpec(_log(mag @ fb.T), bins_per_octave, fmin)


def spectral_convergence(target_mag: np.ndarray, mag: np.ndarray) -> float:
    return float(np.linalg.norm(target_mag - mag) / max(np.linalg.norm(target_mag), 1e-12))


def griffin_lim(mel: MelSpec, iterations: int = 60, length: int | None = None, seed: int = 0,
                history: list | None = None) -> AudioBuffer:
    """Phase retrieval from a log-mel spectrogram.

    The mel magnitudes are mapped back to linear frequency with the
    filterbank pseudo-inverse (clipped at zero), then refined by alternating
    projections. ``history``, if given, receives per-iteration
    ``(spectral_convergence, mel_distortion)`` pairs.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    fb = mel_filterbank(mel.sample_rate, mel.n_fft, mel.n_mels)
    lin = np.exp(mel.frames)
    lin = np.where(mel.frames <= np.log(LOG_FLOOR) + 1e-9, 0.0, lin)
    mag = np.maximum(lin @ np.linalg.pinv(fb).T, 0.0)
    if length is None:
        length = (mag.shape[0] - 1) * mel.hop
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    for _ in range(iterations):
        y = istft(mag * phase, mel.hop, length)
        rebuilt = stft(y, mel.n_fft, mel.hop)
        if history is not None:
            r = np.abs(rebuilt)
            history.append((spectral_convergence(mag, r),
                            float(np.mean(np.abs(_log(r @ fb.T) - mel.frames)))))
        phase = rebuilt / np.maximum(np.abs(rebuilt), 1e-12)
    y = istft(mag * phase, mel.hop, length)
    return AudioBuffer(np.clip(y, -1.0, 1.0), mel.sample_rate, 1)


def resample(audio: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Polyphase windowed-sinc resampling between supported rates."""
    if target_rate not in SUPPORTED_RATES or audio.sample_rate not in SUPPORTED_RATES:
        raise ValueError(f"unsupported rate pair {audio.sample_rate} -> {target_rate}")
    if target_rate == audio.sample_rate:
        return AudioBuffer(audio.samples.copy(), audio.sample_rate, audio.channels)
    ratio = Fraction(target_rate, audio.sample_rate)
    chans = audio.samples.reshape(-1, audio.channels)
    out = signal.resample_poly(chans, ratio.numerator, ratio.denominator, axis=0, padtype="edge")
    return AudioBuffer(out.reshape(-1), target_rate, audio.channels)


def align_frames(frames: np.ndarray, n_samples: int, hop: int, factor: int = 4) -> np.ndarray:
    """Crop or pad (at the log floor) a frame matrix to ``factor * ceil(n_samples / (hop * factor))`` rows.

    This pins the token count of a clip to ``ceil(n_samples / (hop * factor))``.
    """
    n_tokens = max(1, -(-n_samples // (hop * factor)))
    want = n_tokens * factor
    if frames.shape[0] >= want:
        return frames[:want]
    pad = np.full((want - frames.shape[0], frames.shape[1]), np.log(LOG_FLOOR))
    return np.concatenate([frames, pad], axis=0)
