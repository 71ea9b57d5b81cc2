"""Encode a synthetic clip at both presets, decode it, and score the result.

Needs trained checkpoints, for example from
    muc train corpus/manifest.tsv --ckpt-dir ckpt

Run: python3 demos/codec_roundtrip.py ckpt
"""
from __future__ import annotations

import sys
import tempfile
from pathlib import Path

from muc import bitstream, dataset, metrics, pipeline
from muc.wavio import read_wav, write_wav

ckpt = sys.argv[1] if len(sys.argv) > 1 else "checkpoints"
spec = dataset.random_clip_spec(12345, "mixed")
audio, transcript = dataset.synth_clip(spec)
# The desk models were trained on 16-bit WAVs. A float render keeps bins far below
# the 16-bit noise floor that the encoder never saw, so go through a PCM16 file.
with tempfile.TemporaryDirectory() as tmp:
    write_wav(Path(tmp) / "clip.wav", audio, encoding="pcm16")
    audio = read_wav(Path(tmp) / "clip.wav")
print(f"clip: {audio.n_frames / audio.sample_rate:.2f} s, sung symbols {transcript!r}")

for preset in ("low", "high"):
    codec = pipeline.Codec(pipeline.PipelineConfig(preset=preset, ckpt_dir=ckpt, n_steps=25))
    data, info = codec.encode_audio(audio)
    header, codes = bitstream.decode_stream(data)
    out, _ = codec.decode_bytes(data, seed=0)
    n = min(out.n_frames, audio.n_frames)
    print(f"\n{preset.upper()}: {len(data)} bytes for {header.n_frames} frames ({info['kbps']:.4f} kbps)")
    print(f"  first codes: {codes.codes[:4].tolist()}")
    print(f"  log-spectral distance {metrics.log_spectral_distance(audio.samples[:n], out.samples[:n]):.2f} dB,"
          f" mel distortion {metrics.mel_distortion(audio.samples[:n], out.samples[:n]):.3f}")
