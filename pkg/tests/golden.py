"""Golden-clip fixtures for the stage boundaries.

Small seeded (untrained) models carry one synthetic clip through every stage.
Each recorded array is the output of one stage, so a test can recompute a stage
from the previous recorded array alone.

Regenerate with ``python3 tests/golden.py`` (only after a deliberate change).
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from muc import bitstream, dataset, flowgen, melvae, muencoder, rvq

FIXTURE = Path(__file__).parent / "fixtures" / "golden_clip.npz"
SPEC = dataset.ClipSpec(seed=11, duration_s=2.56, symbols=(0, 3, 7, 3, 12), tempo=125.0, vocal_gain=0.5,
                        background_gain=0.3)
ENC = muencoder.MuEncoderConfig(n_layers=2, model_dim=32, heads=2, conv_kernel=5, tap_layer=2, seed=5)
VAE = melvae.VaeConfig(hidden=32, seed=5)
DIT = flowgen.DitConfig(n_layers=1, heads=2, head_dim=16, norm_groups=8, cond_dim=32, seed=5)
SAMPLER = flowgen.SamplerConfig(n_steps=4, guidance_scale=1.5, seed=9)
RVQ = rvq.RvqConfig(2, 8, 32)


def models():
    flow = flowgen.FlowState(flowgen.Dit(DIT), SAMPLER, np.zeros(DIT.latent_dim), np.ones(DIT.latent_dim))
    return muencoder.MuEncoder(ENC), melvae.MelVae(VAE), flow


def stage_mel(audio: np.ndarray) -> np.ndarray:
    return muencoder.prepare_inputs(audio, 24000, with_cqt=False)[0]


def stage_features(enc, mel: np.ndarray) -> np.ndarray:
    return muencoder.tap(muencoder.encode(mel, enc, n_layers=ENC.tap_layer), ENC.tap_layer).frames


def stage_codes(codewords: np.ndarray, features: np.ndarray) -> np.ndarray:
    codes, _, _ = rvq.quantize(features, rvq.Codebooks(RVQ, codewords))
    return codes.codes


def stage_stream(codes: np.ndarray) -> bytes:
    header = bitstream.header_for(RVQ, len(codes), block_len=4)
    return bitstream.encode_stream(rvq.CodeSeq(codes, RVQ.config_id), header)


def stage_latent(flow, codewords: np.ndarray, codes: np.ndarray) -> np.ndarray:
    cond = rvq.dequantize(codes, rvq.Codebooks(RVQ, codewords))
    return flow.generate(cond)


def stage_decoded_mel(vae, latent: np.ndarray) -> np.ndarray:
    return melvae.vae_decode(vae, latent)


def compute() -> dict[str, np.ndarray]:
    enc, vae, flow = models()
    audio, _ = dataset.synth_clip(SPEC)
    audio = audio.samples
    mel = stage_mel(audio)
    feats = stage_features(enc, mel)
    codewords = rvq.init_codebooks(RVQ, feats, np.random.default_rng(5)).codewords
    codes = stage_codes(codewords, feats)
    stream = stage_stream(codes)
    latent = stage_latent(flow, codewords, codes)
    return {"audio": audio, "mel": mel, "features": feats, "codewords": codewords, "codes": codes,
            "stream": np.frombuffer(stream, dtype=np.uint8), "latent": latent,
            "decoded_mel": stage_decoded_mel(vae, latent)}


if __name__ == "__main__":
    FIXTURE.parent.mkdir(exist_ok=True)
    np.savez_compressed(FIXTURE, **compute())
    print(f"wrote {FIXTURE}")
