"""Conditional flow matching over VAE latents with a DiT velocity model.

Path convention: noise ``x0`` at t=0, data ``x1`` at t=1, ``x_t = (1-t) x0 + t x1``,
target velocity ``x1 - x0``. Sampling integrates with forward Euler at
``t_k = k / n_steps`` and classifier-free guidance.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Protocol

import numpy as np

from . import checkpoint
from . import nn
from . import tensor as T
from .optim import Adam, clip_grad_norm
from .tensor import Tensor

N_TIMESTEPS = 1000


@dataclass
class DitConfig:
    n_layers: int = 6
    heads: int = 4
    head_dim: int = 32
    norm_eps: float = 1e-6
    norm_groups: int = 32
    n_timesteps: int = N_TIMESTEPS
    latent_dim: int = 16
    cond_dim: int = 192
    ff_mult: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.model_dim % self.norm_groups:
            raise ValueError(f"model_dim {self.model_dim} not divisible by {self.norm_groups} groups")

    @property
    def model_dim(self) -> int:
        return self.heads * self.head_dim

    @classmethod
    def reference(cls, **kw) -> "DitConfig":
        """24 layers of head_dim 72; the head count is an assumed value."""
        base = dict(n_layers=24, heads=16, head_dim=72)
        base.update(kw)
        return cls(**base)


@dataclass
class SamplerConfig:
    n_steps: int = 50
    guidance_scale: float = 1.5
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.guidance_scale < 0:
            raise ValueError("guidance_scale must be >= 0")


@dataclass
class FlowBatch:
    x1: np.ndarray  # (B, T, C) data latents
    x0: np.ndarray  # (B, T, C) standard normal
    t: np.ndarray  # (B,) in [0, 1]
    cond: np.ndarray  # (B, T, cond_dim)
    drop: np.ndarray  # (B,) bool, condition replaced by the null embedding

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=np.float64)
        self.drop = np.asarray(self.drop, dtype=bool)
        if np.any(self.t < 0) or np.any(self.t > 1):
            raise ValueError("t outside [0, 1]")
        if self.x0.shape != self.x1.shape:
            raise ValueError(f"noise shape {self.x0.shape} != data shape {self.x1.shape}")

    @classmethod
    def sample(cls, x1: np.ndarray, cond: np.ndarray, rng: np.random.Generator,
               cond_drop: float = 0.1) -> "FlowBatch":
        B = x1.shape[0]
        return cls(x1, rng.standard_normal(x1.shape), rng.uniform(0.0, 1.0, B), cond,
                   rng.uniform(size=B) < cond_drop)

    def interpolate(self) -> np.ndarray:
        t = self.t[:, None, None]
        return (1.0 - t) * self.x0 + t * self.x1


def timestep_index(t, n: int = N_TIMESTEPS) -> np.ndarray:
    return np.clip(np.floor(np.asarray(t, dtype=np.float64) * (n - 1)), 0, n - 1).astype(np.int64)


def guided_velocity(v_cond, v_uncond, scale: float):
    """Equivalent to v_uncond + s (v_cond - v_uncond), written so s=0 and s=1 are exact."""
    if scale == 1.0:
        return v_cond
    if scale == 0.0:
        return v_uncond
    return scale * v_cond + (1.0 - scale) * v_uncond


class DitBlock(nn.Module):
    def __init__(self, dim: int, heads: int, ff_mult: int, eps: float, rng):
        self.norm1 = nn.LayerNorm(dim, eps, affine=False)
        self.att = nn.MultiHeadAttention(dim, heads, rng)
        self.norm2 = nn.LayerNorm(dim, eps, affine=False)
        self.ff = nn.FeedForward(dim, ff_mult * dim, rng, act="gelu")
        self.scale_shift_table = nn.parameter(rng.standard_normal((6, dim)) / math.sqrt(dim))

    def forward(self, x: Tensor, t_mod: Tensor) -> Tensor:
        B, D = t_mod.shape[0], x.shape[-1]
        mod = t_mod.reshape(B, 6, D) + self.scale_shift_table
        sh1, sc1, g1, sh2, sc2, g2 = (mod[:, i:i + 1, :] for i in range(6))
        x = x + g1 * self.att(self.norm1(x) * (1.0 + sc1) + sh1)
        return x + g2 * self.ff(self.norm2(x) * (1.0 + sc2) + sh2)


class Dit(nn.Module):
    """Latent tokens plus projected condition frames, modulated by a shared timestep projection."""

    def __init__(self, cfg: DitConfig):
        rng = np.random.default_rng([cfg.seed, 11])
        D = cfg.model_dim
        self.cfg = cfg
        self.proj_in = nn.Linear(cfg.latent_dim, D, rng)
        self.norm_in = nn.GroupNorm(cfg.norm_groups, D, cfg.norm_eps)
        self.cond_proj = nn.Linear(cfg.cond_dim, D, rng)
        self.null_cond = nn.parameter(rng.standard_normal(cfg.cond_dim) * 0.1)
        self.t_fc1 = nn.Linear(D, D, rng)
        self.t_fc2 = nn.Linear(D, D, rng)
        self.t_mod = nn.Linear(D, 6 * D, rng, scale=0.1)
        self.blocks = [DitBlock(D, cfg.heads, cfg.ff_mult, cfg.norm_eps, rng) for _ in range(cfg.n_layers)]
        self.norm_out = nn.LayerNorm(D, cfg.norm_eps, affine=False)
        self.out_table = nn.parameter(rng.standard_normal((2, D)) / math.sqrt(D))
        self.proj_out = nn.Linear(D, cfg.latent_dim, rng, scale=0.1)

    def forward(self, x: Tensor, t_index: np.ndarray, cond: np.ndarray, drop: np.ndarray) -> Tensor:
        cfg = self.cfg
        B, n, _ = x.shape
        cond = np.asarray(cond)
        if cond.shape[:2] != (B, n):
            raise ValueError(f"condition frames {cond.shape[:2]} != latent frames {(B, n)}")
        if cond.shape[2] != cfg.cond_dim:
            raise ValueError(f"condition dim {cond.shape[2]} != model cond_dim {cfg.cond_dim}")
        t_index = np.asarray(t_index, dtype=np.int64)
        if t_index.min() < 0 or t_index.max() >= cfg.n_timesteps:
            raise ValueError("timestep index out of range")
        dt = T.default_dtype()
        c = T.where(np.asarray(drop, dtype=bool)[:, None, None], self.null_cond, Tensor(cond, dtype=dt))
        h = self.norm_in(self.proj_in(x)) + self.cond_proj(c)
        h = h + np.asarray(nn.sinusoid_table(n, cfg.model_dim), dtype=dt)
        temb = Tensor(nn.sinusoid_table(cfg.n_timesteps, cfg.model_dim)[t_index], dtype=dt)
        temb = self.t_fc2(T.silu(self.t_fc1(temb)))
        t_mod = self.t_mod(T.silu(temb))
        for block in self.blocks:
            h = block(h, t_mod)
        mod = temb.reshape(B, 1, cfg.model_dim)
        shift = mod + self.out_table[0]
        scale = mod + self.out_table[1]
        return self.proj_out(self.norm_out(h) * (1.0 + scale) + shift)

    def velocity(self, x: np.ndarray, t: float, cond: np.ndarray, uncond: bool) -> np.ndarray:
        B = x.shape[0]
        with T.no_grad():
            v = self(Tensor(x, dtype=T.default_dtype()), np.full(B, timestep_index(t)), cond,
                     np.full(B, uncond))
        return v.data.astype(np.float64)


def dit_forward(model: Dit, x_t, t_index, condition, drop=None) -> Tensor:
    x = x_t if isinstance(x_t, Tensor) else Tensor(x_t, dtype=T.default_dtype())
    drop = np.zeros(x.shape[0], dtype=bool) if drop is None else drop
    return model(x, t_index, condition, drop)


def fm_loss(batch: FlowBatch, model) -> Tensor:
    """Mean squared error between the predicted velocity at x_t and x1 - x0."""
    dt = T.default_dtype()
    target = batch.x1 - batch.x0
    v = model(Tensor(batch.interpolate(), dtype=dt), timestep_index(batch.t), batch.cond, batch.drop)
    diff = v - Tensor(target, dtype=dt)
    return (diff * diff).mean()


class VelocityModel(Protocol):
    def velocity(self, x: np.ndarray, t: float, cond, uncond: bool) -> np.ndarray: ...


def sample_euler_cfg(condition, sampler: SamplerConfig, model: VelocityModel,
                     shape: tuple[int, ...] | None = None, x0: np.ndarray | None = None,
                     trajectory: list | None = None) -> np.ndarray:
    """Euler integration from seeded noise with classifier-free guidance."""
    if x0 is None:
        if shape is None:
            cond = np.asarray(condition)
            shape = cond.shape[:-1] + (model.cfg.latent_dim,)
        x0 = np.random.default_rng(sampler.seed).standard_normal(shape)
    x = np.array(x0, dtype=np.float64)
    n, s = sampler.n_steps, sampler.guidance_scale
    h = 1.0 / n
    for k in range(n):
        t = k / n
        v_c = model.velocity(x, t, condition, False) if s != 0.0 else None
        v_u = model.velocity(x, t, condition, True) if s != 1.0 else None
        x = x + h * guided_velocity(v_c, v_u, s)
        if trajectory is not None:
            trajectory.append(x.copy())
    return x


class ToyVelocity(nn.Module):
    """Small MLP velocity field on flat vectors, for low-dimensional checks."""

    def __init__(self, dim: int = 2, hidden: int = 128, seed: int = 0, n_freq: int = 8):
        rng = np.random.default_rng([seed, 13])
        self.dim, self.n_freq = dim, n_freq
        self.fc1 = nn.Linear(dim + 2 * n_freq, hidden, rng)
        self.fc2 = nn.Linear(hidden, hidden, rng)
        self.fc3 = nn.Linear(hidden, dim, rng)

    def _features(self, t: np.ndarray) -> np.ndarray:
        ang = np.asarray(t, dtype=np.float64)[:, None] * np.pi * (2.0 ** np.arange(self.n_freq))[None] / 8
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    def forward(self, x: Tensor, t: np.ndarray) -> Tensor:
        tf = Tensor(self._features(t), dtype=x.dtype)
        h = T.silu(self.fc1(T.concat([x, tf], axis=-1)))
        return self.fc3(T.silu(self.fc2(h)))

    def velocity(self, x: np.ndarray, t: float, cond=None, uncond: bool = True) -> np.ndarray:
        with T.no_grad():
            return self(Tensor(x, dtype=T.default_dtype()), np.full(len(x), t)).data.astype(np.float64)


def toy_fm_loss(model: ToyVelocity, x1: np.ndarray, x0: np.ndarray, t: np.ndarray) -> Tensor:
    xt = (1 - t[:, None]) * x0 + t[:, None] * x1
    diff = model(Tensor(xt, dtype=T.default_dtype()), t) - Tensor(x1 - x0, dtype=T.default_dtype())
    return (diff * diff).mean()


def make_optimizer(model: nn.Module, lr: float = 1e-3) -> Adam:
    named = list(model.named_parameters())
    return Adam([p for _, p in named], lr=lr, names=[n for n, _ in named])


@dataclass
class FlowState:
    """A trained DiT with the latent standardisation it was trained under."""

    model: Dit
    sampler: SamplerConfig
    latent_mean: np.ndarray
    latent_std: np.ndarray

    def standardize(self, z: np.ndarray) -> np.ndarray:
        return (z - self.latent_mean) / self.latent_std

    def destandardize(self, z: np.ndarray) -> np.ndarray:
        return z * self.latent_std + self.latent_mean

    def check_condition(self, cond_dim: int) -> None:
        if cond_dim != self.model.cfg.cond_dim:
            raise ValueError(f"condition dim {cond_dim} != flow model cond_dim {self.model.cfg.cond_dim}")

    def generate(self, condition: np.ndarray, sampler: SamplerConfig | None = None) -> np.ndarray:
        """Latent frames (T, C) in VAE units for one (T, cond_dim) condition."""
        cond = np.asarray(condition)
        self.check_condition(cond.shape[-1])
        z = sample_euler_cfg(cond[None], sampler or self.sampler, self.model)
        return self.destandardize(z[0])


def save(path, state: FlowState, extra: dict | None = None) -> None:
    tensors = dict(state.model.state_dict())
    tensors["latent.mean"] = np.asarray(state.latent_mean, dtype=np.float64)
    tensors["latent.std"] = np.asarray(state.latent_std, dtype=np.float64)
    meta = {"kind": "flowgen", "config": asdict(state.model.cfg), "sampler": asdict(state.sampler),
            "cond_dim": state.model.cfg.cond_dim, **(extra or {})}
    checkpoint.save(path, tensors, meta)


def load(path) -> tuple[FlowState, dict]:
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "flowgen":
        raise checkpoint.CheckpointError(f"{path}: not a flowgen checkpoint")
    model = Dit(DitConfig(**meta["config"]))
    mean, std = tensors.pop("latent.mean"), tensors.pop("latent.std")
    model.load_state_dict(tensors)
    return FlowState(model, SamplerConfig(**meta["sampler"]), mean, std), meta


def fm_train(latents: list[np.ndarray], conds: list[np.ndarray], cfg: DitConfig, steps: int = 1000,
             batch: int = 16, seg_len: int = 64, lr: float = 1e-3, cond_drop: float = 0.1,
             seed: int = 0, sampler: SamplerConfig | None = None,
             log: Callable[[dict], None] | None = None, checkpoint_path=None,
             save_every: int = 100) -> FlowState:
    """Train on random aligned crops of (latent, condition) pairs.

    ``conds[i]`` may be a list of alternative conditions for clip ``i``; one is
    drawn per example. A non-finite loss aborts with the last good checkpoint
    left on disk.
    """
    rng = np.random.default_rng(seed)
    allz = np.concatenate(latents)
    state = FlowState(Dit(cfg), sampler or SamplerConfig(), allz.mean(0), allz.std(0) + 1e-6)
    zs = [state.standardize(z) for z in latents]
    opt = make_optimizer(state.model, lr)
    for step in range(steps):
        xb, cb = [], []
        for _ in range(batch):
            i = int(rng.integers(len(zs)))
            alts = conds[i] if isinstance(conds[i], list) else [conds[i]]
            c = alts[int(rng.integers(len(alts)))]
            n = min(seg_len, len(zs[i]))
            s = int(rng.integers(0, len(zs[i]) - n + 1))
            xb.append(zs[i][s:s + n])
            cb.append(c[s:s + n])
        n = min(len(x) for x in xb)
        fb = FlowBatch.sample(np.stack([x[:n] for x in xb]), np.stack([c[:n] for c in cb]), rng, cond_drop)
        opt.zero_grad()
        loss = fm_loss(fb, state.model)
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"flow-matching loss diverged at step {step}; last good checkpoint kept")
        loss.backward()
        clip_grad_norm(opt.params, 1.0)
        opt.step()
        if log is not None:
            log({"step": step, "loss": loss.item()})
        if checkpoint_path is not None and (step + 1) % save_every == 0:
            save(checkpoint_path, state, {"step": step + 1})
    if checkpoint_path is not None:
        save(checkpoint_path, state, {"step": steps})
    return state
