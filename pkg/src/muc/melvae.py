"""Small convolutional VAE over normalised log-mel frames, 4x time compression."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import checkpoint
from . import nn
from . import tensor as T
from .optim import Adam, clip_grad_norm
from .tensor import Tensor

FACTOR = 4


@dataclass
class VaeConfig:
    n_mels: int = 80
    latent: int = 16
    hidden: int = 128
    beta: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")


class MelVae(nn.Module):
    def __init__(self, cfg: VaeConfig):
        rng = np.random.default_rng([cfg.seed, 7])
        h = cfg.hidden
        self.cfg = cfg
        self.enc = [nn.Conv1d(cfg.n_mels, h, 5, rng), nn.Conv1d(h, h, 3, rng, stride=2),
                    nn.Conv1d(h, h, 3, rng, stride=2)]
        self.enc_out = nn.Conv1d(h, 2 * cfg.latent, 3, rng)
        self.dec_in = nn.Conv1d(cfg.latent, h, 3, rng)
        self.dec = [nn.Conv1d(h, h, 3, rng), nn.Conv1d(h, h, 3, rng)]
        self.dec_out = nn.Conv1d(h, cfg.n_mels, 5, rng)

    def encode(self, x: Tensor) -> tuple[Tensor, Tensor]:
        for conv in self.enc:
            x = T.silu(conv(x))
        mu, logvar = T.split(self.enc_out(x), 2, axis=-1)
        return mu, logvar

    def decode(self, z: Tensor) -> Tensor:
        h = T.silu(self.dec_in(z))
        for conv in self.dec:
            h = T.silu(conv(T.repeat(h, 2, axis=1)))
        return self.dec_out(h)


def _batch(mel) -> tuple[np.ndarray, bool]:
    x = np.asarray(mel)
    single = x.ndim == 2
    x = x[None] if single else x
    if x.shape[1] == 0:
        raise ValueError("empty mel input")
    if x.shape[1] % FACTOR:
        raise ValueError(f"mel frames ({x.shape[1]}) must be a multiple of {FACTOR}")
    return x, single


def vae_encode(model: MelVae, mel: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(T, n_mels) or (B, T, n_mels) normalised mel -> (mu, logvar) with T/4 frames."""
    x, single = _batch(mel)
    with T.no_grad():
        mu, lv = model.encode(Tensor(x, dtype=T.default_dtype()))
    mu, lv = mu.data.astype(np.float64), lv.data.astype(np.float64)
    return (mu[0], lv[0]) if single else (mu, lv)


def vae_decode(model: MelVae, z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    if not np.all(np.isfinite(z)):
        raise ValueError("latent contains non-finite values")
    single = z.ndim == 2
    with T.no_grad():
        out = model.decode(Tensor(z[None] if single else z, dtype=T.default_dtype())).data
    out = out.astype(np.float64)
    return out[0] if single else out


def kl_divergence(mu, logvar):
    """KL(N(mu, exp(logvar)) || N(0, 1)) summed over channels, averaged over the rest."""
    if isinstance(mu, Tensor) or isinstance(logvar, Tensor):
        per = 0.5 * (mu * mu + T.exp(logvar) - 1.0 - logvar)
        return per.sum(axis=-1).mean()
    mu, logvar = np.asarray(mu, dtype=np.float64), np.asarray(logvar, dtype=np.float64)
    return float((0.5 * (mu ** 2 + np.exp(logvar) - 1.0 - logvar)).sum(-1).mean())


def vae_loss(model: MelVae, mel: np.ndarray, eps: np.ndarray) -> tuple[Tensor, dict[str, float]]:
    """L1 reconstruction from a reparameterised sample plus beta-weighted KL."""
    x, _ = _batch(mel)
    xt = Tensor(x, dtype=T.default_dtype())
    mu, logvar = model.encode(xt)
    z = mu + T.exp(0.5 * logvar) * eps
    recon = T.tabs(model.decode(z) - xt).mean()
    kl = kl_divergence(mu, logvar)
    loss = recon + model.cfg.beta * kl
    return loss, {"recon_l1": recon.item(), "kl": kl.item(), "loss": loss.item()}


def vae_train_step(mel: np.ndarray, model: MelVae, opt: Adam, rng: np.random.Generator,
                   clip: float = 1.0) -> dict[str, float]:
    x, _ = _batch(mel)
    eps = rng.standard_normal((x.shape[0], x.shape[1] // FACTOR, model.cfg.latent))
    opt.zero_grad()
    loss, parts = vae_loss(model, x, eps)
    if not np.isfinite(parts["loss"]):
        raise FloatingPointError(f"non-finite VAE loss: {parts}")
    loss.backward()
    clip_grad_norm(opt.params, clip)
    opt.step()
    return parts


def make_optimizer(model: MelVae, lr: float = 1e-3) -> Adam:
    named = list(model.named_parameters())
    return Adam([p for _, p in named], lr=lr, names=[n for n, _ in named])


def save(path, model: MelVae, extra: dict | None = None) -> None:
    checkpoint.save(path, model.state_dict(), {"kind": "melvae", "config": asdict(model.cfg), **(extra or {})})


def load(path) -> tuple[MelVae, dict]:
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "melvae":
        raise checkpoint.CheckpointError(f"{path}: not a melvae checkpoint")
    model = MelVae(VaeConfig(**meta["config"]))
    model.load_state_dict(tensors)
    return model, meta
