"""Conformer feature extractor with masked-prediction and reconstruction/CTC training.

Stage 1 predicts, at masked token positions, the label a frozen random
projection quantizer assigns to the unmasked input. Stage 2 reconstructs the
mel and CQT frames from a chosen intermediate layer while a CTC head on the
last layer recognises the symbol sequence.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from . import dsp
from . import nn
from . import tensor as T
from .ctc import ctc_loss
from .dataset import N_SYMBOLS, SYMBOLS, encode_transcript
from .optim import Adam, clip_grad_norm
from .tensor import Tensor

VOCAB = SYMBOLS
BLANK = N_SYMBOLS

# fixed input scaling of natural-log features
MEL_SHIFT, MEL_SCALE = 4.0, 4.0
CQT_SHIFT, CQT_SCALE = 1.0, 4.0


@dataclass
class MuEncoderConfig:
    n_layers: int = 6
    model_dim: int = 192
    heads: int = 4
    conv_kernel: int = 15
    downsample: int = 4
    tap_layer: int = 4
    n_mels: int = 80
    n_cqt: int = 84
    ff_mult: int = 4
    head_hidden: int = 256
    mlm_vocab: int = 64
    mlm_dim: int = 16
    mask_span: int = 10
    mask_coverage: float = 0.3
    recon_weight: float = 1.0
    ctc_weight: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.tap_layer <= self.n_layers:
            raise ValueError(f"tap_layer {self.tap_layer} outside 1..{self.n_layers}")
        if self.downsample < 1 or self.downsample & (self.downsample - 1):
            raise ValueError("downsample must be a power of two")
        if self.model_dim % self.heads:
            raise ValueError("model_dim must be divisible by heads")

    @property
    def token_rate(self) -> float:
        return 100.0 / self.downsample

    @classmethod
    def desk(cls, **kw) -> "MuEncoderConfig":
        return cls(**kw)

    @classmethod
    def reference(cls, **kw) -> "MuEncoderConfig":
        """13 layers tapped at 7; width, heads and kernel are assumed values."""
        base = dict(n_layers=13, model_dim=512, heads=8, conv_kernel=31, tap_layer=7, head_hidden=512)
        base.update(kw)
        return cls(**base)


@dataclass
class FeatureSeq:
    frames: np.ndarray  # (T, D) at token rate
    token_rate_hz: float = 25.0

    def __len__(self) -> int:
        return self.frames.shape[0]


def normalize_mel(frames: np.ndarray) -> np.ndarray:
    return (frames + MEL_SHIFT) / MEL_SCALE


def denormalize_mel(frames: np.ndarray) -> np.ndarray:
    return frames * MEL_SCALE - MEL_SHIFT


def normalize_cqt(frames: np.ndarray) -> np.ndarray:
    return (frames + CQT_SHIFT) / CQT_SCALE


def prepare_inputs(x: np.ndarray, sample_rate: int = 24000, factor: int = 4, with_cqt: bool = True):
    """Normalised (mel, cqt) frames of a mono signal, cropped to whole tokens."""
    audio = dsp.AudioBuffer(x, sample_rate)
    mel = dsp.mel_spectrogram(audio)
    mel_n = normalize_mel(dsp.align_frames(mel.frames, len(x), mel.hop, factor))
    if not with_cqt:
        return mel_n, None
    cq = dsp.cqt(audio)
    return mel_n, normalize_cqt(dsp.align_frames(cq.frames, len(x), mel.hop, factor))


class ConvModule(nn.Module):
    def __init__(self, dim: int, kernel: int, rng):
        self.norm = nn.LayerNorm(dim)
        self.pw1 = nn.Linear(dim, 2 * dim, rng)
        self.dw = nn.DepthwiseConv1d(dim, kernel, rng)
        self.norm2 = nn.LayerNorm(dim)
        self.pw2 = nn.Linear(dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        a, b = T.split(self.pw1(self.norm(x)), 2, axis=-1)
        h = self.dw(a * T.sigmoid(b))
        return self.pw2(T.silu(self.norm2(h)))


class ConformerBlock(nn.Module):
    """Macaron feed-forward halves around self-attention and a convolution module."""

    def __init__(self, dim: int, heads: int, kernel: int, ff_mult: int, rng):
        self.ff1_norm = nn.LayerNorm(dim)
        self.ff1 = nn.FeedForward(dim, ff_mult * dim, rng)
        self.att_norm = nn.LayerNorm(dim)
        self.att = nn.MultiHeadAttention(dim, heads, rng)
        self.conv = ConvModule(dim, kernel, rng)
        self.ff2_norm = nn.LayerNorm(dim)
        self.ff2 = nn.FeedForward(dim, ff_mult * dim, rng)
        self.out_norm = nn.LayerNorm(dim)

    def forward(self, x: Tensor) -> Tensor:
        x = x + 0.5 * self.ff1(self.ff1_norm(x))
        x = x + self.att(self.att_norm(x))
        x = x + self.conv(x)
        x = x + 0.5 * self.ff2(self.ff2_norm(x))
        return self.out_norm(x)


class Stem(nn.Module):
    """Strided convolutions taking mel rate to token rate."""

    def __init__(self, n_mels: int, dim: int, downsample: int, rng):
        n = int(math.log2(downsample))
        self.convs = [nn.Conv1d(n_mels if i == 0 else dim, dim, 3, rng, stride=2) for i in range(n)]
        self.proj = nn.Linear(dim if n else n_mels, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = T.silu(conv(x))
        return self.proj(x)


class MuEncoder(nn.Module):
    def __init__(self, cfg: MuEncoderConfig):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        self.stem = Stem(cfg.n_mels, cfg.model_dim, cfg.downsample, rng)
        self.blocks = [ConformerBlock(cfg.model_dim, cfg.heads, cfg.conv_kernel, cfg.ff_mult, rng)
                       for _ in range(cfg.n_layers)]

    def forward(self, mel: Tensor, n_layers: int | None = None) -> list[Tensor]:
        """All block outputs for normalised mel input (B, T_mel, n_mels)."""
        if mel.shape[1] < self.cfg.downsample:
            raise ValueError(f"need at least {self.cfg.downsample} mel frames, got {mel.shape[1]}")
        h = self.stem(mel)
        h = h + np.asarray(nn.sinusoid_table(h.shape[1], self.cfg.model_dim), dtype=h.dtype)
        outs = []
        for block in self.blocks[:n_layers]:
            h = block(h)
            outs.append(h)
        return outs


class MlpHead(nn.Module):
    def __init__(self, d_in: int, hidden: int, d_out: int, rng):
        self.fc1 = nn.Linear(d_in, hidden, rng)
        self.fc2 = nn.Linear(hidden, d_out, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.silu(self.fc1(x)))


class Heads(nn.Module):
    """Prediction heads for both training stages."""

    def __init__(self, cfg: MuEncoderConfig):
        rng = np.random.default_rng(cfg.seed + 1)
        self.mlm = nn.Linear(cfg.model_dim, cfg.mlm_vocab, rng)
        self.mel = MlpHead(cfg.model_dim, cfg.head_hidden, cfg.n_mels, rng)
        self.cqt = MlpHead(cfg.model_dim, cfg.head_hidden, cfg.n_cqt, rng)
        self.ctc = nn.Linear(cfg.model_dim, N_SYMBOLS + 1, rng)


@dataclass
class MlmTargets:
    """Frozen random-projection quantizer producing masked-prediction labels."""

    projection: np.ndarray  # (downsample * n_mels, mlm_dim)
    codebook: np.ndarray  # (mlm_vocab, mlm_dim), unit rows
    stack: int = 4

    @classmethod
    def create(cls, cfg: MuEncoderConfig, seed: int | None = None) -> "MlmTargets":
        rng = np.random.default_rng([cfg.seed if seed is None else seed, 99])
        d_in = cfg.downsample * cfg.n_mels
        proj = rng.standard_normal((d_in, cfg.mlm_dim)) * math.sqrt(2.0 / (d_in + cfg.mlm_dim))
        book = rng.standard_normal((cfg.mlm_vocab, cfg.mlm_dim))
        book /= np.linalg.norm(book, axis=1, keepdims=True)
        return cls(proj, book, cfg.downsample)

    def labels(self, mel: np.ndarray) -> np.ndarray:
        """(B, T_mel, n_mels) normalised mel -> (B, T_tok) integer labels."""
        B, n, m = mel.shape
        stacked = mel.reshape(B, n // self.stack, self.stack * m)
        stacked = (stacked - stacked.mean(-1, keepdims=True)) / (stacked.std(-1, keepdims=True) + 1e-5)
        z = stacked @ self.projection
        z /= np.linalg.norm(z, axis=-1, keepdims=True) + 1e-12
        return np.argmax(z @ self.codebook.T, axis=-1)


def sample_mask(rng: np.random.Generator, batch: int, n_tokens: int, span: int, coverage: float) -> np.ndarray:
    """Boolean (batch, n_tokens) mask of non-overlapping spans covering about ``coverage``."""
    if not 0.0 < coverage < 1.0:
        raise ValueError(f"mask coverage must be in (0, 1), got {coverage}")
    span = max(1, min(span, n_tokens))
    slots = n_tokens // span
    n_spans = min(slots, max(1, round(coverage * n_tokens / span)))
    mask = np.zeros((batch, n_tokens), dtype=bool)
    for b in range(batch):
        shift = int(rng.integers(0, n_tokens - slots * span + 1))
        for s in rng.choice(slots, n_spans, replace=False):
            mask[b, shift + s * span: shift + (s + 1) * span] = True
    return mask


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under rows of ``logits``."""
    lp = T.log_softmax(logits, axis=-1)
    return -lp[np.arange(len(labels)), labels].mean()


def mlm_loss(model: MuEncoder, heads: Heads, mel: np.ndarray, targets: MlmTargets,
             mask: np.ndarray, noise: np.ndarray) -> Tensor:
    """Masked prediction loss; masked mel frames are replaced by ``noise``."""
    if not mask.any():
        raise ValueError("empty mask set")
    labels = targets.labels(mel)
    frame_mask = np.repeat(mask, model.cfg.downsample, axis=1)[..., None]
    corrupted = np.where(frame_mask, noise, mel)
    final = model(Tensor(corrupted, dtype=T.default_dtype()))[-1]
    logits = heads.mlm(final)
    sel = np.nonzero(mask)
    return cross_entropy(logits[sel], labels[sel])


def l1(pred: Tensor, target) -> Tensor:
    return T.tabs(pred - target).mean()


@dataclass
class Stage2Batch:
    mel: np.ndarray  # (B, T_mel, n_mels), normalised
    cqt: np.ndarray  # (B, T_mel, n_cqt), normalised
    labels: list[list[int]] = field(default_factory=list)

    @classmethod
    def from_transcripts(cls, mel, cqt, transcripts: list[str]) -> "Stage2Batch":
        return cls(mel, cqt, [encode_transcript(t) for t in transcripts])


def stage2_loss(model: MuEncoder, heads: Heads, batch: Stage2Batch,
                weights: tuple[float, float] | None = None) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of L1 mel/CQT reconstruction (from the tap layer) and per-frame CTC (last layer)."""
    cfg = model.cfg
    w_recon, w_ctc = weights or (cfg.recon_weight, cfg.ctc_weight)
    layers = model(Tensor(batch.mel, dtype=T.default_dtype()))
    tapped = layers[cfg.tap_layer - 1]
    r = cfg.downsample
    mel_rec = l1(T.repeat(heads.mel(tapped), r, axis=1), batch.mel)
    cqt_rec = l1(T.repeat(heads.cqt(tapped), r, axis=1), batch.cqt)
    total = w_recon * (mel_rec + cqt_rec)
    parts = {"mel_recon": mel_rec.item(), "cqt_recon": cqt_rec.item()}
    if w_ctc > 0:
        logits = heads.ctc(layers[-1])
        # per-clip NLL over label length (at least 1), averaged over the batch
        ctc = sum(ctc_loss(logits[b], lab) * (1.0 / max(1, len(lab)))
                  for b, lab in enumerate(batch.labels)) * (1.0 / len(batch.labels))
        total = total + w_ctc * ctc
        parts["ctc"] = ctc.item()
    else:
        parts["ctc"] = 0.0
    parts["total"] = total.item()
    return total, parts


def tap(features_per_layer: list, tap_layer: int):
    """Select the output of block ``tap_layer`` (1-based)."""
    if not 1 <= tap_layer <= len(features_per_layer):
        raise ValueError(f"tap layer {tap_layer} outside 1..{len(features_per_layer)}")
    return features_per_layer[tap_layer - 1]


def encode(mel: dsp.MelSpec | np.ndarray, model: MuEncoder, n_layers: int | None = None) -> list[FeatureSeq]:
    """Per-layer features of one utterance; input frames are normalised log-mel if a raw array."""
    frames = normalize_mel(mel.frames) if isinstance(mel, dsp.MelSpec) else np.asarray(mel)
    with T.no_grad():
        outs = model(Tensor(frames[None], dtype=T.default_dtype()), n_layers)
    return [FeatureSeq(o.data[0].astype(np.float64), model.cfg.token_rate) for o in outs]


def extract(model: MuEncoder, x: np.ndarray, sample_rate: int = 24000, layer: int | None = None) -> np.ndarray:
    """Tapped features (T_tok, D) for a mono signal at the model's configured tap layer."""
    layer = layer or model.cfg.tap_layer
    mel_n, _ = prepare_inputs(x, sample_rate, model.cfg.downsample, with_cqt=False)
    return tap(encode(mel_n, model, n_layers=layer), layer).frames


# -- training ---------------------------------------------------------------

def make_optimizer(model: MuEncoder, heads: Heads, which: tuple[str, ...], lr: float) -> Adam:
    named = [(f"encoder.{n}", p) for n, p in model.named_parameters()]
    for w in which:
        named += [(f"heads.{w}.{n}", p) for n, p in getattr(heads, w).named_parameters()]
    return Adam([p for _, p in named], lr=lr, names=[n for n, _ in named])


def mlm_pretrain_step(mel: np.ndarray, model: MuEncoder, heads: Heads, targets: MlmTargets,
                      opt: Adam, rng: np.random.Generator, clip: float = 1.0) -> float:
    cfg = model.cfg
    mask = sample_mask(rng, mel.shape[0], mel.shape[1] // cfg.downsample, cfg.mask_span, cfg.mask_coverage)
    noise = rng.normal(0.0, 0.1, mel.shape)
    opt.zero_grad()
    loss = mlm_loss(model, heads, mel, targets, mask, noise)
    loss.backward()
    clip_grad_norm(opt.params, clip)
    opt.step()
    return loss.item()


def stage2_step(batch: Stage2Batch, model: MuEncoder, heads: Heads, opt: Adam,
                weights: tuple[float, float] | None = None, clip: float = 1.0) -> dict[str, float]:
    opt.zero_grad()
    loss, parts = stage2_loss(model, heads, batch, weights)
    loss.backward()
    clip_grad_norm(opt.params, clip)
    opt.step()
    return parts


def save(path, model: MuEncoder, heads: Heads, targets: MlmTargets, stage: str, extra: dict | None = None) -> None:
    tensors = {f"encoder.{k}": v for k, v in model.state_dict().items()}
    tensors.update({f"heads.{k}": v for k, v in heads.state_dict().items()})
    tensors["mlm.projection"] = targets.projection
    tensors["mlm.codebook"] = targets.codebook
    meta = {"kind": "muencoder", "config": asdict(model.cfg), "stage": stage, **(extra or {})}
    checkpoint.save(path, tensors, meta)


def load(path) -> tuple[MuEncoder, Heads, MlmTargets, dict]:
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "muencoder":
        raise checkpoint.CheckpointError(f"{path}: not a muencoder checkpoint")
    cfg = MuEncoderConfig(**meta["config"])
    model, heads = MuEncoder(cfg), Heads(cfg)
    model.load_state_dict({k[8:]: v for k, v in tensors.items() if k.startswith("encoder.")})
    heads.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("heads.")})
    targets = MlmTargets(tensors["mlm.projection"], tensors["mlm.codebook"], cfg.downsample)
    return model, heads, targets, meta
