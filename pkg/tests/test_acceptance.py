"""Acceptance criteria 1-9. Each test records one pass/fail line (shown in the terminal summary)."""
from __future__ import annotations

import itertools
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import scipy.linalg

from muc import bitstream as B
from muc import dataset as D
from muc import dsp, flowgen, gradcheck, melvae, muencoder, pipeline, rvq
from muc import tensor as T
from muc.ctc import ctc_loss, min_frames

DESK_DIR = Path(os.environ.get("MUC_DESK_DIR", "/root/work/desk"))
DESK_BUDGET_S = 3600.0


# -- 1 ------------------------------------------------------------------------

def test_criterion_1_bitrate_exactness(criterion):
    low, high = rvq.RvqConfig.low(8), rvq.RvqConfig.high(8)
    rng = np.random.default_rng(1)
    n_low = round(35.84 * 25)
    low_bytes = len(B.encode_stream(rvq.CodeSeq(rng.integers(0, 16384, (n_low, 1)), rvq.CONFIG_LOW),
                                    B.header_for(low, n_low))) - B.HEADER_SIZE
    low_kbps = B.achieved_kbps(low_bytes, n_low)
    n_high = 2000
    codes = rvq.CodeSeq(rng.integers(0, 10000, (n_high, 4)), rvq.CONFIG_HIGH)
    b64 = len(B.encode_stream(codes, B.header_for(high, n_high, block_len=64))) - B.HEADER_SIZE
    b1 = len(B.encode_stream(codes, B.header_for(high, n_high, block_len=1))) - B.HEADER_SIZE
    kbps64, kbps1 = B.achieved_kbps(b64, n_high), B.achieved_kbps(b1, n_high)
    ok = (B.bits_per_frame(low).packed == 14 and n_low == 896 and low_bytes == 1568 and low_kbps == 0.35
          and kbps64 <= 1.336 and kbps1 == 1.35)
    criterion(1, ok, f"LOW {low_bytes} B / {low_kbps:.4f} kbps; HIGH block64 {kbps64:.4f} kbps, "
                     f"block1 {kbps1:.4f} kbps")


# -- 2 ------------------------------------------------------------------------

def test_criterion_2_bitstream_roundtrip_and_fuzz(criterion):
    rng = np.random.default_rng(2)
    mismatches = 0
    for name in ("low", "high"):
        config = rvq.RvqConfig.preset(name, 8)
        for _ in range(1000):
            n = int(rng.integers(0, 120))
            channels = int(rng.integers(1, 3))
            block = int(rng.choice([1, 7, 64]))
            c = rvq.CodeSeq(rng.integers(0, config.codebook_size, (n * channels, config.n_codebooks)),
                            config.config_id)
            _, back = B.decode_stream(B.encode_stream(c, B.header_for(config, n, channels=channels,
                                                                     block_len=block)))
            mismatches += back != c
    high = rvq.RvqConfig.high(8)
    base = rvq.CodeSeq(rng.integers(0, 10000, (200, 4)), rvq.CONFIG_HIGH)
    data = B.encode_stream(base, B.header_for(high, 200))
    crashes = detected = changed = 0
    for _ in range(10_000):
        bit = int(rng.integers(0, len(data) * 8))
        flipped = bytearray(data)
        flipped[bit // 8] ^= 1 << (bit % 8)
        try:
            _, out = B.decode_stream(bytes(flipped))
            changed += out != base
        except B.StreamError:
            detected += 1
        except Exception:  # noqa: BLE001 - any other exception is a crash
            crashes += 1
    ok = mismatches == 0 and crashes == 0
    criterion(2, ok, f"2000 round-trips, {mismatches} mismatches; 10000 bit flips: {detected} rejected, "
                     f"{changed} decoded differently, {crashes} crashes")


# -- 3 ------------------------------------------------------------------------

def exhaustive_greedy(x, words):
    codes = np.zeros((len(x), len(words)), dtype=np.int64)
    for i, row in enumerate(x):
        r = row.copy()
        for k, book in enumerate(words):
            d = [float(((r - c) ** 2).sum()) for c in book]
            j = min(range(len(d)), key=lambda m: (d[m], m))
            codes[i, k] = j
            r = r - book[j]
    return codes


def test_criterion_3_rvq_oracle(criterion):
    rng = np.random.default_rng(3)
    bad = 0
    for trial in range(100):
        size = int(rng.integers(2, 33))
        dim = int(rng.integers(1, 9))
        n_cb = int(rng.integers(1, 5))
        if trial % 3 == 0:  # integer grids create exact distance ties
            words = rng.integers(-2, 3, (n_cb, size, dim)).astype(float)
            x = rng.integers(-3, 4, (20, dim)).astype(float)
        else:
            words = rng.standard_normal((n_cb, size, dim))
            x = rng.standard_normal((20, dim))
        books = rvq.Codebooks(rvq.RvqConfig(n_cb, size, dim), words)
        codes, _, _ = rvq.quantize(x, books)
        bad += not np.array_equal(codes.codes, exhaustive_greedy(x, words))
    criterion(3, bad == 0, f"100 instances (codebook<=32, dim<=8, 1/3 tie-heavy): {bad} disagreements")


# -- 4 ------------------------------------------------------------------------

def _collapse(path, blank):
    out, prev = [], None
    for c in path:
        if c != prev and c != blank:
            out.append(c)
        prev = c
    return out


def test_criterion_4_ctc_oracle(criterion):
    rng = np.random.default_rng(4)
    worst, cases = 0.0, 0
    for n_t in range(1, 7):
        for n in range(0, 4):
            for labels in itertools.product(range(2), repeat=n):
                if min_frames(labels) > n_t:
                    continue
                logits = rng.standard_normal((n_t, 3)) * 2
                p = np.exp(logits - logits.max(1, keepdims=True))
                p /= p.sum(1, keepdims=True)
                total = sum(math.prod(p[t, c] for t, c in enumerate(path))
                            for path in itertools.product(range(3), repeat=n_t)
                            if _collapse(path, 2) == list(labels))
                worst = max(worst, abs(ctc_loss(logits, list(labels)).item() + math.log(total)))
                cases += 1
    criterion(4, worst < 1e-9, f"{cases} cases (T<=6, |y|<=3, 2 symbols), max |diff| {worst:.2e}")


# -- 5 ------------------------------------------------------------------------

def test_criterion_5_gradient_integrity(criterion, f64):
    rng = np.random.default_rng(5)
    results = {}
    ecfg = muencoder.MuEncoderConfig(n_layers=2, model_dim=16, heads=2, conv_kernel=3, tap_layer=1, n_mels=8,
                                     n_cqt=6, head_hidden=8, mlm_vocab=8, mlm_dim=4, mask_span=2)
    enc, heads = muencoder.MuEncoder(ecfg), muencoder.Heads(ecfg)
    targets = muencoder.MlmTargets.create(ecfg)
    mel = rng.standard_normal((2, 24, 8))
    mask = muencoder.sample_mask(rng, 2, 6, 2, 0.3)
    noise = rng.normal(0, 0.1, mel.shape)
    results["mlm"] = gradcheck.check_params(
        lambda: muencoder.mlm_loss(enc, heads, mel, targets, mask, noise),
        enc.parameters() + heads.mlm.parameters(), n=12, rng=rng)
    batch = muencoder.Stage2Batch.from_transcripts(mel, rng.standard_normal((2, 24, 6)), ["ab", ""])
    results["stage2"] = gradcheck.check_params(
        lambda: muencoder.stage2_loss(enc, heads, batch)[0],
        enc.parameters() + heads.mel.parameters() + heads.cqt.parameters() + heads.ctc.parameters(), n=12, rng=rng)
    vae = melvae.MelVae(melvae.VaeConfig(n_mels=8, latent=4, hidden=16))
    eps = rng.standard_normal((2, 6, 4))
    results["vae"] = gradcheck.check_params(lambda: melvae.vae_loss(vae, mel, eps)[0], vae.parameters(),
                                            n=12, rng=rng)
    dit = flowgen.Dit(flowgen.DitConfig(n_layers=1, heads=2, head_dim=4, norm_groups=4, latent_dim=3, cond_dim=5))
    x1 = rng.standard_normal((2, 6, 3))
    fb = flowgen.FlowBatch(x1, rng.standard_normal(x1.shape), rng.uniform(size=2),
                           rng.standard_normal((2, 6, 5)), np.array([False, True]))
    results["flow"] = gradcheck.check_params(lambda: flowgen.fm_loss(fb, dit), dit.parameters(), n=12, rng=rng)
    worst = {k: max(v) for k, v in results.items()}
    ok = all(len(v) >= 10 for v in results.values()) and all(w < 1e-4 for w in worst.values())
    criterion(5, ok, "max rel. err " + ", ".join(f"{k} {w:.1e}" for k, w in worst.items()) + " (12 params each)")


# -- 6 ------------------------------------------------------------------------

class _Field:
    def __init__(self, cond_fn, uncond_fn):
        self.cond_fn, self.uncond_fn = cond_fn, uncond_fn

    def velocity(self, x, t, cond, uncond):
        return (self.uncond_fn if uncond else self.cond_fn)(x, t)


def test_criterion_6_flow_analytics(criterion):
    rng = np.random.default_rng(6)
    x0 = rng.standard_normal((64, 3))
    field = _Field(lambda x, t: np.sin(x) + t, lambda x, t: x * t - 1)
    s1 = flowgen.sample_euler_cfg(None, flowgen.SamplerConfig(50, 1.0), field, x0=x0)
    s1_ref = flowgen.sample_euler_cfg(None, flowgen.SamplerConfig(50, 1.0), _Field(field.cond_fn, None), x0=x0)
    s0 = flowgen.sample_euler_cfg(None, flowgen.SamplerConfig(50, 0.0), field, x0=x0)
    s0_ref = flowgen.sample_euler_cfg(None, flowgen.SamplerConfig(50, 1.0), _Field(field.uncond_fn, None), x0=x0)
    cfg_ok = np.array_equal(s1, s1_ref) and np.array_equal(s0, s0_ref)
    c = np.array([1.5, -0.25, 3.0])
    shift = flowgen.sample_euler_cfg(None, flowgen.SamplerConfig(50, 1.5),
                                     _Field(lambda x, t: np.broadcast_to(c, x.shape),
                                            lambda x, t: np.broadcast_to(c, x.shape)), x0=x0)
    shift_err = float(np.max(np.abs(shift - (x0 + c))))
    a = 2.5
    u = lambda x, t: (a - 1) * x / ((1 - t) + t * a)  # noqa: E731
    z0 = rng.standard_normal((20000, 1))
    oracle = z0.copy()
    for k in range(100_000):
        oracle *= 1 + (a - 1) / ((1 - k / 1e5) + (k / 1e5) * a) / 1e5
    out = flowgen.sample_euler_cfg(None, flowgen.SamplerConfig(50, 1.5), _Field(u, u), x0=z0)
    rel = abs(out.std() - oracle.std()) / oracle.std()
    ok = cfg_ok and shift_err < 1e-12 and rel < 0.02
    criterion(6, ok, f"CFG s=0/1 exact: {cfg_ok}; constant shift max err {shift_err:.1e}; "
                     f"1-D scaling a={a} terminal std rel. err {rel:.4f} at 50 steps")


# -- 7 ------------------------------------------------------------------------

def _ensure_desk():
    """Build (or reuse) the 100-clip corpus and the desk checkpoints; returns (cfg, timings)."""
    corpus = DESK_DIR / "corpus"
    if not (corpus / "manifest.tsv").is_file():
        D.build_corpus(corpus, 70, 15, 15, seed=2024)
    cfg_path = DESK_DIR / "desk.cfg"
    if not cfg_path.is_file():
        cfg_path.write_text(f"ckpt_dir = {DESK_DIR / 'ckpt'}\nablation = true\n")
    cfg, tcfg = pipeline.load_config(cfg_path)
    pipeline.train_all(corpus / "manifest.tsv", cfg, tcfg, echo=None)
    timings = json.loads((Path(cfg.ckpt_dir) / "timings.json").read_text())
    return cfg, timings


@pytest.fixture(scope="module")
def desk_trained():
    return _ensure_desk()


@pytest.fixture(scope="module")
def desk(desk_trained):
    cfg, timings = desk_trained
    report_path = DESK_DIR / "eval_test.jsonl"
    report = pipeline.evaluate(DESK_DIR / "corpus" / "manifest.tsv", "test", cfg, report_path, baseline=True)
    return cfg, timings, report


def _probe_error(train_x, train_y, test_x, test_y, n_classes=D.N_SYMBOLS + 1, lam=1.0):
    """Ridge regression onto one-hot labels; returns the token error rate on the held-out clips."""
    mean, std = train_x.mean(0), train_x.std(0) + 1e-8
    xs = np.hstack([(train_x - mean) / std, np.ones((len(train_x), 1))])
    onehot = np.eye(n_classes)[train_y]
    w = scipy.linalg.solve(xs.T @ xs + lam * np.eye(xs.shape[1]), xs.T @ onehot, assume_a="pos")
    pred = (np.hstack([(test_x - mean) / std, np.ones((len(test_x), 1))]) @ w).argmax(1)
    return float(np.mean(pred != test_y))


def _pcm16(x):
    # same quantisation as a write_wav(pcm16) / read_wav round-trip, so the
    # probe sees the 16-bit input distribution the desk models were trained on
    return np.round(np.clip(x, -1.0, 1.0) * 32767.0) / 32768.0


def _probe_data(model, specs):
    xs, ys = [], []
    for spec in specs:
        audio, _ = D.synth_clip(spec)
        feats = muencoder.extract(model, _pcm16(audio.samples), 24000, model.cfg.tap_layer)
        xs.append(feats)
        ys.append(D.segment_token_labels(spec, 0.0, len(feats)))
    return np.concatenate(xs), np.concatenate(ys)


@pytest.mark.slow
def test_criterion_7_desk_end_to_end(criterion, desk):
    cfg, timings, report = desk
    total = sum(timings.values())
    clips = {}
    for rec in report.records:
        clips.setdefault(rec["preset"], []).append(rec)
    beats = {p: float(np.mean([r["mel_distortion"] < r["mel_distortion_random"] for r in recs]))
             for p, recs in clips.items()}
    mse = {p: float(np.mean([r["latent_mse"] for r in recs])) for p, recs in clips.items()}
    ok_a = all(b >= 0.9 for b in beats.values())
    ok_b = mse["high"] < mse["low"]

    ckpt = Path(cfg.ckpt_dir)
    with_ctc, _, _, _ = muencoder.load(ckpt / "muencoder.ckpt")
    no_ctc, _, _, _ = muencoder.load(ckpt / "muencoder_noctc.ckpt")
    specs = [D.random_clip_spec(90_000 + i, "vocal" if i % 2 else "mixed") for i in range(40)]
    errs = {}
    for name, model in (("ctc", with_ctc), ("no_ctc", no_ctc)):
        train_x, train_y = _probe_data(model, specs[:30])
        test_x, test_y = _probe_data(model, specs[30:])
        errs[name] = _probe_error(train_x, train_y, test_x, test_y)
    ok_c = errs["ctc"] < errs["no_ctc"]
    ok_t = total <= DESK_BUDGET_S
    detail = (f"train {total / 60:.1f} min on {os.cpu_count()} core(s) (budget 60); "
              f"(a) beats random: low {beats['low']:.2f}, high {beats['high']:.2f}; "
              f"(b) latent MSE high {mse['high']:.4f} < low {mse['low']:.4f}: {ok_b}; "
              f"(c) probe token error ctc {errs['ctc']:.3f} vs no-ctc {errs['no_ctc']:.3f}")
    criterion(7, ok_t and ok_a and ok_b and ok_c, detail)


# -- 8 ------------------------------------------------------------------------

def test_criterion_8_layer_taps(criterion):
    cfg = muencoder.MuEncoderConfig.reference()
    model = muencoder.MuEncoder(cfg)
    rng = np.random.default_rng(8)
    x = 0.1 * rng.standard_normal(24000)
    feats = muencoder.encode(muencoder.prepare_inputs(x, 24000, with_cqt=False)[0], model)
    taps = {k: muencoder.tap(feats, k).frames for k in (3, 7, 11)}
    same_shape = len({v.shape for v in taps.values()}) == 1
    distinct = all(np.linalg.norm(taps[a] - taps[b]) > 0 for a, b in itertools.combinations(taps, 2))
    ok = same_shape and distinct and cfg.tap_layer == 7 and len(feats) == 13
    criterion(8, ok, f"reference depth {len(feats)}, taps 3/7/11 shape {taps[7].shape}, "
                     f"distinct {distinct}, default tap {cfg.tap_layer}")


# -- 9 ------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_9_determinism(criterion, desk_trained, tmp_path):
    manifest = D.load_manifest(DESK_DIR / "corpus" / "manifest.tsv")
    wav = manifest.root / manifest.split("test")[0].path
    outputs = []
    for run in range(2):
        run_cfg, _ = pipeline.load_config(DESK_DIR / "desk.cfg", seed=7)
        for preset in ("low", "high"):
            run_cfg.preset = preset
            muc = tmp_path / f"{run}_{preset}.muc"
            out = tmp_path / f"{run}_{preset}.wav"
            pipeline.encode_file(wav, muc, run_cfg)
            pipeline.decode_file(muc, out, run_cfg)
            outputs.append((muc.read_bytes(), out.read_bytes()))
    same = outputs[:2] == outputs[2:]
    criterion(9, same, f"two independent encode+decode runs (low, high, seed 7): "
                       f"{'byte-identical' if same else 'different'} .muc and WAV")
