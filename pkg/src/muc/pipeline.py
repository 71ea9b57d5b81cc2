"""Codec pipeline: training stages, file encode/decode and objective evaluation."""
from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from . import bitstream, dsp, flowgen, melvae, metrics, muencoder, rvq
from .dataset import CorpusManifest, load_manifest
from .wavio import read_wav, write_wav

MODEL_RATE = 24000
STAGES = ("stage1", "stage2", "ablation", "rvq", "vae", "flowgen")
DEPENDS = {"stage1": (), "stage2": ("stage1",), "ablation": ("stage1",), "rvq": ("stage2",),
           "vae": (), "flowgen": ("stage2", "rvq", "vae")}
FILES = {"stage1": ("muencoder_stage1.ckpt",), "stage2": ("muencoder.ckpt",),
         "ablation": ("muencoder_noctc.ckpt",), "rvq": ("rvq_low.mucb", "rvq_high.mucb"),
         "vae": ("melvae.ckpt",), "flowgen": ("flowgen.ckpt",)}
PRESET_BITRATE_KBPS = {"low": 0.35, "high": 1.33}


class PipelineError(RuntimeError):
    """An error tagged with the pipeline stage that raised it."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class DependencyError(PipelineError):
    pass


@dataclass
class PipelineConfig:
    preset: str = "low"
    sample_rate: int = MODEL_RATE
    tap_layer: int = 0  # 0: the encoder's configured tap
    ckpt_dir: str = "checkpoints"
    muencoder: str = ""
    rvq: str = ""
    vae: str = ""
    flowgen: str = ""
    block_len: int = bitstream.DEFAULT_BLOCK_LEN
    n_steps: int = 0  # 0: checkpoint default
    guidance_scale: float = -1.0  # negative: checkpoint default
    seed: int = 0
    gla_iters: int = 60
    wav_encoding: str = "float32"

    def __post_init__(self):
        if self.preset not in ("low", "high", "custom"):
            raise ValueError(f"preset must be low, high or custom, got {self.preset!r}")

    def path(self, name: str) -> Path:
        explicit = getattr(self, name, "") if name in ("muencoder", "rvq", "vae", "flowgen") else ""
        if explicit:
            return Path(explicit)
        default = {"muencoder": "muencoder.ckpt", "vae": "melvae.ckpt", "flowgen": "flowgen.ckpt",
                   "rvq": f"rvq_{self.preset}.mucb"}[name]
        return Path(self.ckpt_dir) / default

    def sampler(self, base: flowgen.SamplerConfig, seed: int | None = None) -> flowgen.SamplerConfig:
        return flowgen.SamplerConfig(self.n_steps or base.n_steps,
                                     base.guidance_scale if self.guidance_scale < 0 else self.guidance_scale,
                                     self.seed if seed is None else seed)


@dataclass
class TrainConfig:
    seed: int = 0
    batch: int = 4
    segment_frames: int = 512
    warmup: int = 20
    stage1_steps: int = 300
    stage1_lr: float = 5e-4
    stage2_steps: int = 1200
    stage2_lr: float = 1e-3
    ablation: bool = False
    rvq_steps: int = 100
    rvq_batch: int = 1024
    rvq_reseed_every: int = 10
    vae_steps: int = 600
    vae_batch: int = 8
    vae_lr: float = 1e-3
    flow_steps: int = 1000
    flow_batch: int = 16
    flow_seg: int = 64
    flow_lr: float = 5e-4
    cond_drop: float = 0.1
    n_layers: int = 6
    model_dim: int = 192
    heads: int = 4
    tap_layer: int = 4


def _convert(value: str, default):
    if isinstance(default, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    return type(default)(value)


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = value
    return out


def load_config(path=None, **overrides) -> tuple[PipelineConfig, TrainConfig]:
    """Read a key=value file shared by both config dataclasses; unknown keys are errors."""
    values = parse_config_text(Path(path).read_text(encoding="utf-8")) if path else {}
    values.update({k: str(v) for k, v in overrides.items() if v is not None})
    pipe, train = PipelineConfig(), TrainConfig()
    known: dict[str, list] = {}
    for obj in (pipe, train):
        for f in fields(obj):
            known.setdefault(f.name, []).append(obj)  # shared keys such as seed go to both
    for key, value in values.items():
        if key not in known:
            raise ValueError(f"unknown config key {key!r}")
        for obj in known[key]:
            setattr(obj, key, _convert(value, getattr(obj, key)))
    pipe.__post_init__()
    return pipe, train


# -- inference ---------------------------------------------------------------

class Codec:
    """Loaded checkpoints plus encode/decode of audio buffers and streams."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        for name in ("muencoder", "vae", "flowgen"):
            if not cfg.path(name).is_file():
                raise PipelineError(name, f"missing checkpoint {cfg.path(name)}")
        self.encoder, _, _, enc_meta = muencoder.load(cfg.path("muencoder"))
        self.vae, _ = melvae.load(cfg.path("vae"))
        self.flow, flow_meta = flowgen.load(cfg.path("flowgen"))
        trained_tap = flow_meta.get("tap_layer", self.encoder.cfg.tap_layer)
        self.tap_layer = cfg.tap_layer or trained_tap
        if self.tap_layer != trained_tap:
            raise PipelineError("flowgen", f"tap_layer {self.tap_layer} differs from trained tap {trained_tap}")
        if self.flow.model.cfg.cond_dim != self.encoder.cfg.model_dim:
            raise PipelineError("flowgen", "condition dim does not match encoder width")
        if self.flow.model.cfg.latent_dim != self.vae.cfg.latent:
            raise PipelineError("flowgen", "latent dim does not match the VAE")
        self._books: dict[int, rvq.Codebooks] = {}

    def books(self, config_id: int | None = None) -> rvq.Codebooks:
        if config_id is None:
            config_id = {"low": rvq.CONFIG_LOW, "high": rvq.CONFIG_HIGH}.get(self.cfg.preset, rvq.CONFIG_CUSTOM)
        if config_id not in self._books:
            if self.cfg.rvq:
                path = Path(self.cfg.rvq)
            else:
                name = {rvq.CONFIG_LOW: "low", rvq.CONFIG_HIGH: "high"}.get(config_id)
                if name is None:
                    raise PipelineError("rvq", "custom streams need an explicit rvq path")
                path = Path(self.cfg.ckpt_dir) / f"rvq_{name}.mucb"
            if not path.is_file():
                raise PipelineError("rvq", f"missing codebooks {path}")
            books = rvq.load(path)
            if books.config.dim != self.encoder.cfg.model_dim:
                raise PipelineError("rvq", f"codebook dim {books.config.dim} != encoder width")
            self._books[config_id] = books
        return self._books[config_id]

    def features(self, x: np.ndarray) -> np.ndarray:
        return muencoder.extract(self.encoder, x, MODEL_RATE, self.tap_layer)

    def encode_audio(self, audio: dsp.AudioBuffer, config_id: int | None = None) -> tuple[bytes, dict]:
        books = self.books(config_id)
        model_audio = dsp.resample(audio, MODEL_RATE) if audio.sample_rate != MODEL_RATE else audio
        rows, stats = [], []
        for ch in range(audio.channels):
            try:
                feats = self.features(model_audio.channel(ch).samples)
            except ValueError as exc:
                raise PipelineError("muencoder", str(exc)) from exc
            codes, _, _ = rvq.quantize(feats, books)
            rows.append(codes.codes)
            stats.append(rvq.codebook_stats(codes, books.config))
        n_frames = len(rows[0])
        header = bitstream.header_for(books.config, n_frames, audio.sample_rate, audio.channels,
                                      25, self.cfg.block_len)
        data = bitstream.encode_stream(rvq.CodeSeq(np.concatenate(rows), books.config.config_id), header)
        info = {"n_frames": n_frames, "payload_bytes": len(data) - bitstream.HEADER_SIZE,
                "kbps": bitstream.achieved_kbps(len(data) - bitstream.HEADER_SIZE, n_frames * audio.channels),
                "codebook_stats": stats[0]}
        return data, info

    def decode_codes(self, codes: np.ndarray, books: rvq.Codebooks, seed: int | None = None
                     ) -> tuple[np.ndarray, np.ndarray]:
        """Mono 24 kHz signal and generated latent for one channel's codes."""
        cond = rvq.dequantize(codes, books)
        sampler = self.cfg.sampler(self.flow.sampler, seed)
        z = self.flow.generate(cond, sampler)
        mel_n = melvae.vae_decode(self.vae, z)
        frames = muencoder.denormalize_mel(mel_n)
        # the STFT of n samples has n // hop + 1 frames; repeat the last one
        frames = np.concatenate([frames, frames[-1:]], axis=0)
        mel = dsp.MelSpec(frames, dsp.HOP, MODEL_RATE, mel_n.shape[1])
        y = dsp.griffin_lim(mel, self.cfg.gla_iters, length=len(codes) * 4 * dsp.HOP, seed=sampler.seed)
        return y.samples, z

    def decode_bytes(self, data: bytes, seed: int | None = None) -> tuple[dsp.AudioBuffer, dict]:
        header, codes = bitstream.decode_stream(data)
        books = self.books(header.config_id)
        if (books.config.n_codebooks, books.config.codebook_size) != (header.n_codebooks, header.codebook_size):
            raise PipelineError("rvq", "stream codebook shape does not match loaded codebooks")
        seed = self.cfg.seed if seed is None else seed
        chans = []
        for ch in range(header.channels):
            part = codes.codes[ch * header.n_frames:(ch + 1) * header.n_frames]
            y, _ = self.decode_codes(part, books, seed + ch)
            chans.append(y)
        out = dsp.AudioBuffer.from_channels(chans, MODEL_RATE)
        if header.sample_rate != MODEL_RATE:
            out = dsp.resample(out, header.sample_rate)
        sampler = self.cfg.sampler(self.flow.sampler, seed)
        return out, {"n_steps": sampler.n_steps, "guidance_scale": sampler.guidance_scale, "seed": seed}


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def encode_file(wav_path, out_path, cfg: PipelineConfig, codec: Codec | None = None) -> dict:
    try:
        audio = read_wav(wav_path)
    except (OSError, ValueError) as exc:
        raise PipelineError("read", str(exc)) from exc
    codec = codec or Codec(cfg)
    data, info = codec.encode_audio(audio)
    _atomic_write(Path(out_path), data)
    return info


def decode_file(muc_path, out_path, cfg: PipelineConfig, seed: int | None = None,
                codec: Codec | None = None) -> dict:
    try:
        data = Path(muc_path).read_bytes()
    except OSError as exc:
        raise PipelineError("read", str(exc)) from exc
    codec = codec or Codec(cfg)
    try:
        audio, info = codec.decode_bytes(data, seed)
    except bitstream.StreamError as exc:
        raise PipelineError("bitstream", str(exc)) from exc
    out_path = Path(out_path)
    tmp = out_path.with_name(out_path.name + ".tmp.wav")
    write_wav(tmp, audio, cfg.wav_encoding)
    os.replace(tmp, out_path)
    return info


# -- training ----------------------------------------------------------------

@dataclass
class ClipData:
    clip_id: str
    x: np.ndarray
    mel: np.ndarray  # normalised, whole tokens
    cqt: np.ndarray
    transcript: str


def load_clips(manifest: CorpusManifest, split: str) -> list[ClipData]:
    rows = manifest.split(split)
    if not rows:
        raise ValueError(f"split {split!r} is empty")
    out = []
    for r in rows:
        audio = read_wav(manifest.root / r.path)
        if audio.sample_rate != MODEL_RATE:
            audio = dsp.resample(audio, MODEL_RATE)
        x = audio.mono()
        mel, cqt = muencoder.prepare_inputs(x, MODEL_RATE)
        out.append(ClipData(r.clip_id, x, mel, cqt, r.transcript))
    return out


def _crops(clips: list[ClipData], rng: np.random.Generator, batch: int, frames: int, factor: int = 4):
    picks = rng.integers(0, len(clips), batch)
    mel, cqt, texts = [], [], []
    for i in picks:
        c = clips[i]
        n = min(frames, len(c.mel))
        off = factor * int(rng.integers(0, (len(c.mel) - n) // factor + 1))
        mel.append(c.mel[off:off + n])
        cqt.append(c.cqt[off:off + n])
        texts.append(c.transcript)
    n = min(len(m) for m in mel)
    return np.stack([m[:n] for m in mel]), np.stack([q[:n] for q in cqt]), texts


def _lr(step: int, base: float, warmup: int) -> float:
    return base * min(1.0, (step + 1) / max(warmup, 1))


class StageLog:
    def __init__(self, path: Path, echo: Callable[[str], None] | None):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = open(path, "w", encoding="utf-8")
        self.echo = echo
        self.name = path.stem

    def __call__(self, record: dict) -> None:
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")
        self.fh.flush()
        if self.echo and record.get("step", 0) % 50 == 0:
            shown = ", ".join(f"{k} {v:.4f}" for k, v in record.items()
                              if k != "step" and isinstance(v, float))
            self.echo(f"{self.name} step {record.get('step')}: {shown}")

    def close(self) -> None:
        self.fh.close()


class TrainLock:
    def __init__(self, directory: Path):
        self.path = directory / ".train.lock"

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            if not self._stale():
                raise PipelineError("train", f"checkpoint directory is locked by {self.path}") from None
            # owner died without cleaning up
            self.path.unlink(missing_ok=True)
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def _stale(self) -> bool:
        try:
            pid = int(self.path.read_text().strip())
        except (OSError, ValueError):
            return False
        if pid == os.getpid():
            return False
        try:
            os.kill(pid, 0)
        except ProcessLookupError:
            return True
        except PermissionError:
            return False
        return False

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def stage_done(ckpt_dir: Path, stage: str) -> bool:
    return all((ckpt_dir / f).is_file() for f in FILES[stage])


def plan_stages(ckpt_dir: Path, stages: Iterable[str] | None, overwrite: bool, ablation: bool) -> list[str]:
    if stages is None:
        stages = [s for s in STAGES if s != "ablation" or ablation]
    stages = list(stages)
    for s in stages:
        if s not in STAGES:
            raise ValueError(f"unknown stage {s!r}; expected one of {', '.join(STAGES)}")
    ordered = [s for s in STAGES if s in stages]
    will_have = set()
    run = []
    for s in ordered:
        for dep in DEPENDS[s]:
            if dep not in will_have and not stage_done(ckpt_dir, dep):
                raise DependencyError(s, f"requires the {dep} stage checkpoint ({', '.join(FILES[dep])})")
        if overwrite or not stage_done(ckpt_dir, s):
            run.append(s)
        will_have.add(s)
    return run


def _encoder_config(t: TrainConfig) -> muencoder.MuEncoderConfig:
    return muencoder.MuEncoderConfig(n_layers=t.n_layers, model_dim=t.model_dim, heads=t.heads,
                                     tap_layer=t.tap_layer, seed=t.seed)


def _train_stage1(clips, t: TrainConfig, out: Path, log) -> None:
    cfg = _encoder_config(t)
    model, heads = muencoder.MuEncoder(cfg), muencoder.Heads(cfg)
    targets = muencoder.MlmTargets.create(cfg)
    opt = muencoder.make_optimizer(model, heads, ("mlm",), t.stage1_lr)
    rng = np.random.default_rng([t.seed, 1])
    for step in range(t.stage1_steps):
        mel, _, _ = _crops(clips, rng, t.batch, t.segment_frames)
        cfg_mask = muencoder.sample_mask(rng, mel.shape[0], mel.shape[1] // cfg.downsample,
                                         cfg.mask_span, cfg.mask_coverage)
        noise = rng.normal(0.0, 0.1, mel.shape)
        opt.zero_grad()
        loss = muencoder.mlm_loss(model, heads, mel, targets, cfg_mask, noise)
        loss.backward()
        muencoder.clip_grad_norm(opt.params, 1.0)
        opt.step(_lr(step, t.stage1_lr, t.warmup))
        log({"step": step, "loss": loss.item()})
    muencoder.save(out, model, heads, targets, "stage1")


def _train_stage2(clips, t: TrainConfig, init: Path, out: Path, log, ctc_weight: float | None = None) -> None:
    model, heads, targets, _ = muencoder.load(init)
    opt = muencoder.make_optimizer(model, heads, ("mel", "cqt", "ctc"), t.stage2_lr)
    rng = np.random.default_rng([t.seed, 2])
    weights = (model.cfg.recon_weight, model.cfg.ctc_weight if ctc_weight is None else ctc_weight)
    for step in range(t.stage2_steps):
        mel, cqt, texts = _crops(clips, rng, t.batch, t.segment_frames)
        batch = muencoder.Stage2Batch.from_transcripts(mel, cqt, texts)
        opt.zero_grad()
        loss, parts = muencoder.stage2_loss(model, heads, batch, weights)
        loss.backward()
        muencoder.clip_grad_norm(opt.params, 1.0)
        opt.step(_lr(step, t.stage2_lr, t.warmup))
        log({"step": step, "loss": parts["total"], **parts})
    muencoder.save(out, model, heads, targets, "stage2", {"ctc_weight": weights[1]})


def _tap_features(model, clips) -> list[np.ndarray]:
    return [muencoder.tap(muencoder.encode(c.mel, model, model.cfg.tap_layer), model.cfg.tap_layer).frames
            for c in clips]


def _rvq_pool(model, clips, t: TrainConfig, n_crops: int = 4) -> np.ndarray:
    """Full-clip tap features plus features of random crops, which see different context."""
    rng = np.random.default_rng([t.seed, 3])
    feats = _tap_features(model, clips)
    layer = model.cfg.tap_layer
    for _ in range(n_crops):
        for c in clips:
            n = min(t.segment_frames, len(c.mel))
            off = 4 * int(rng.integers(0, (len(c.mel) - n) // 4 + 1))
            feats.append(muencoder.encode(c.mel[off:off + n], model, layer)[layer - 1].frames)
    return np.concatenate(feats)


def _train_rvq(pool: np.ndarray, t: TrainConfig, ckpt_dir: Path, log_for) -> None:
    dim = pool.shape[1]
    for name in ("low", "high"):
        cfg = rvq.RvqConfig.preset(name, dim)
        cfg = rvq.RvqConfig(cfg.n_codebooks, cfg.codebook_size, dim, cfg.ema_decay,
                            0.1 / cfg.codebook_size, cfg.config_id)
        log = log_for(f"rvq_{name}")
        books = rvq.train(cfg, pool, t.rvq_steps, t.rvq_batch, t.rvq_reseed_every, t.seed, log)
        _, _, energies = rvq.quantize(pool, books)
        log({"step": t.rvq_steps, "final_energy": energies[-1], "feature_energy": float((pool ** 2).sum(1).mean())})
        rvq.save(ckpt_dir / f"rvq_{name}.mucb", books)


def _train_vae(clips, t: TrainConfig, out: Path, log) -> None:
    model = melvae.MelVae(melvae.VaeConfig(seed=t.seed))
    opt = melvae.make_optimizer(model, t.vae_lr)
    rng = np.random.default_rng([t.seed, 4])
    for step in range(t.vae_steps):
        mel, _, _ = _crops(clips, rng, t.vae_batch, t.segment_frames)
        parts = melvae.vae_train_step(mel, model, opt, rng)
        log({"step": step, **parts})
    melvae.save(out, model)


def _train_flow(clips, t: TrainConfig, ckpt_dir: Path, log) -> None:
    model, _, _, _ = muencoder.load(ckpt_dir / FILES["stage2"][0])
    vae, _ = melvae.load(ckpt_dir / FILES["vae"][0])
    books = [rvq.load(ckpt_dir / f) for f in FILES["rvq"]]
    feats = _tap_features(model, clips)
    conds = [[rvq.quantize(f, b)[1] for b in books] for f in feats]
    latents = [melvae.vae_encode(vae, c.mel)[0] for c in clips]
    cfg = flowgen.DitConfig(latent_dim=vae.cfg.latent, cond_dim=model.cfg.model_dim, seed=t.seed)
    out = ckpt_dir / FILES["flowgen"][0]
    state = flowgen.fm_train(latents, conds, cfg, t.flow_steps, t.flow_batch, t.flow_seg, t.flow_lr,
                             t.cond_drop, t.seed, log=log)
    flowgen.save(out, state, {"tap_layer": model.cfg.tap_layer, "steps": t.flow_steps})


def train_all(manifest_path, cfg: PipelineConfig, t: TrainConfig, stages: Iterable[str] | None = None,
              overwrite: bool = False, echo: Callable[[str], None] | None = print) -> dict[str, float]:
    """Run the requested stages in dependency order; returns wall time per stage."""
    ckpt = Path(cfg.ckpt_dir)
    run = plan_stages(ckpt, stages, overwrite, t.ablation)
    manifest = load_manifest(manifest_path)
    timings = {}
    with TrainLock(ckpt):
        clips = load_clips(manifest, "train") if run else []
        logs = ckpt / "logs"
        for stage in run:
            start = time.time()
            if echo:
                echo(f"== {stage}")
            # rvq writes one log per preset instead
            log = StageLog(logs / f"{stage}.jsonl", echo) if stage != "rvq" else None
            try:
                if stage == "stage1":
                    _train_stage1(clips, t, ckpt / FILES["stage1"][0], log)
                elif stage == "stage2":
                    _train_stage2(clips, t, ckpt / FILES["stage1"][0], ckpt / FILES["stage2"][0], log)
                elif stage == "ablation":
                    _train_stage2(clips, t, ckpt / FILES["stage1"][0], ckpt / FILES["ablation"][0], log, 0.0)
                elif stage == "rvq":
                    model, _, _, _ = muencoder.load(ckpt / FILES["stage2"][0])
                    _train_rvq(_rvq_pool(model, clips, t), t, ckpt,
                               lambda name: StageLog(logs / f"{name}.jsonl", echo))
                elif stage == "vae":
                    _train_vae(clips, t, ckpt / FILES["vae"][0], log)
                elif stage == "flowgen":
                    _train_flow(clips, t, ckpt, log)
            except FloatingPointError as exc:
                raise PipelineError(stage, str(exc)) from exc
            finally:
                if log:
                    log.close()
            timings[stage] = time.time() - start
            _record_timing(ckpt / "timings.json", stage, timings[stage])
        (ckpt / "train_config.json").write_text(json.dumps(asdict(t), indent=1, sort_keys=True))
    return timings


def _record_timing(path: Path, stage: str, seconds: float) -> None:
    # written after every stage so an interrupted run keeps the finished ones
    recorded = json.loads(path.read_text()) if path.is_file() else {}
    recorded[stage] = seconds
    path.write_text(json.dumps(recorded, indent=1, sort_keys=True))


# -- evaluation ---------------------------------------------------------------

@dataclass
class EvalReport:
    records: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)


def random_codes(n_frames: int, config: rvq.RvqConfig, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 5])
    return rng.integers(0, config.codebook_size, (n_frames, config.n_codebooks))


def evaluate(manifest_path, split: str, cfg: PipelineConfig, report_path=None,
             presets: tuple[str, ...] = ("low", "high"), baseline: bool = False,
             limit: int | None = None, echo: Callable[[str], None] | None = None) -> EvalReport:
    """Encode and decode every clip of ``split`` per preset and score against the input."""
    manifest = load_manifest(manifest_path)
    rows = manifest.split(split)[:limit]
    if not rows:
        raise PipelineError("eval", f"split {split!r} is empty")
    codec = Codec(cfg)
    ids = {"low": rvq.CONFIG_LOW, "high": rvq.CONFIG_HIGH}
    report = EvalReport()
    for r in rows:
        audio = read_wav(manifest.root / r.path)
        ref = dsp.resample(audio, MODEL_RATE).mono() if audio.sample_rate != MODEL_RATE else audio.mono()
        mel_ref, _ = muencoder.prepare_inputs(ref, MODEL_RATE, with_cqt=False)
        z_ref = melvae.vae_encode(codec.vae, mel_ref)[0]
        for name in presets:
            data, info = codec.encode_audio(dsp.AudioBuffer(ref, MODEL_RATE), ids[name])
            header, codes = bitstream.decode_stream(data)
            books = codec.books(ids[name])
            y, z = codec.decode_codes(codes.codes, books, cfg.seed)
            rec = {"clip_id": r.clip_id, "preset": name, "n_frames": header.n_frames,
                   "lsd_db": metrics.log_spectral_distance(ref, y),
                   "mel_distortion": metrics.mel_distortion(ref, y),
                   "latent_mse": metrics.latent_mse(z_ref, z),
                   "utilization": [s["utilization"] for s in info["codebook_stats"]],
                   "perplexity": [s["perplexity"] for s in info["codebook_stats"]],
                   "kbps": info["kbps"]}
            if baseline:
                rc = random_codes(header.n_frames, books.config, cfg.seed)
                yb, zb = codec.decode_codes(rc, books, cfg.seed)
                rec["mel_distortion_random"] = metrics.mel_distortion(ref, yb)
                rec["latent_mse_random"] = metrics.latent_mse(z_ref, zb)
            report.records.append(rec)
            if echo:
                echo(json.dumps(rec, sort_keys=True))
    for name in presets:
        recs = [x for x in report.records if x["preset"] == name]
        agg = {k: float(np.mean([x[k] for x in recs]))
               for k in ("lsd_db", "mel_distortion", "latent_mse", "kbps") if recs}
        if baseline and recs:
            agg["mel_distortion_random"] = float(np.mean([x["mel_distortion_random"] for x in recs]))
            agg["beats_random_fraction"] = float(np.mean([x["mel_distortion"] < x["mel_distortion_random"]
                                                          for x in recs]))
        report.aggregate[name] = agg
    if report_path is not None:
        lines = [json.dumps({"kind": "clip", **x}, sort_keys=True) for x in report.records]
        lines += [json.dumps({"kind": "aggregate", "preset": k, **v}, sort_keys=True)
                  for k, v in report.aggregate.items()]
        Path(report_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return report
