from __future__ import annotations

import numpy as np
import pytest

from muc import flowgen as F
from muc import gradcheck
from muc import tensor as T


def tiny_cfg(**kw):
    base = dict(n_layers=1, heads=2, head_dim=4, norm_groups=4, latent_dim=3, cond_dim=5)
    base.update(kw)
    return F.DitConfig(**base)


def tiny_batch(rng, B=2, n=6, cfg=None, drop=None):
    cfg = cfg or tiny_cfg()
    x1 = rng.standard_normal((B, n, cfg.latent_dim))
    cond = rng.standard_normal((B, n, cfg.cond_dim))
    drop = np.array([False, True][:B]) if drop is None else drop
    return F.FlowBatch(x1, rng.standard_normal(x1.shape), rng.uniform(size=B), cond, drop)


class Oracle:
    """Returns the true target regardless of input."""

    def __init__(self, batch):
        self.target = batch.x1 - batch.x0

    def __call__(self, x, t_index, cond, drop):
        return T.Tensor(self.target, dtype=T.default_dtype())


class Field:
    """Velocity given by a function of (x, t); separate conditional and unconditional parts."""

    def __init__(self, cond_fn, uncond_fn=None):
        self.cond_fn, self.uncond_fn = cond_fn, uncond_fn or cond_fn
        self.calls = {True: 0, False: 0}

    def velocity(self, x, t, cond, uncond):
        self.calls[uncond] += 1
        return (self.uncond_fn if uncond else self.cond_fn)(x, t)


def test_config_and_sampler_validation():
    assert F.DitConfig.reference().model_dim == 16 * 72
    assert F.DitConfig.reference().n_layers == 24 and F.DitConfig.reference().norm_eps == 1e-6
    assert (F.SamplerConfig().n_steps, F.SamplerConfig().guidance_scale) == (50, 1.5)
    with pytest.raises(ValueError):
        F.DitConfig(heads=3, head_dim=5)
    with pytest.raises(ValueError):
        F.SamplerConfig(n_steps=0)
    with pytest.raises(ValueError):
        F.SamplerConfig(guidance_scale=-0.1)


def test_oracle_model_has_zero_loss():
    batch = tiny_batch(np.random.default_rng(0))
    assert F.fm_loss(batch, Oracle(batch)).item() == 0.0


def test_path_endpoints_and_t_range():
    rng = np.random.default_rng(1)
    b = tiny_batch(rng)
    b.t = np.array([0.0, 1.0])
    xt = b.interpolate()
    assert np.array_equal(xt[0], b.x0[0]) and np.array_equal(xt[1], b.x1[1])
    with pytest.raises(ValueError):
        F.FlowBatch(b.x1, b.x0, np.array([0.5, 1.5]), b.cond, b.drop)
    with pytest.raises(ValueError):
        F.FlowBatch(b.x1, b.x0[:, :3], np.array([0.5, 0.5]), b.cond, b.drop)


def test_timestep_index_endpoints():
    assert F.timestep_index(0.0) == 0
    assert F.timestep_index(1.0) == 999
    assert F.timestep_index(0.5) == 499


def test_dit_output_shape_and_condition_errors():
    model = F.Dit(F.DitConfig())
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 128, 16))
    cond = rng.standard_normal((1, 128, 192))
    with T.no_grad():
        out = F.dit_forward(model, x, np.array([500]), cond)
    assert out.shape == (1, 128, 16)
    with pytest.raises(ValueError):
        F.dit_forward(model, x, np.array([5]), cond[:, :100])
    with pytest.raises(ValueError):
        F.dit_forward(model, x, np.array([5]), cond[..., :64])
    with pytest.raises(ValueError):
        F.dit_forward(model, x, np.array([1000]), cond)


def test_null_condition_ignores_condition_values():
    model = F.Dit(tiny_cfg())
    rng = np.random.default_rng(2)
    x = rng.standard_normal((1, 6, 3))
    c1, c2 = rng.standard_normal((2, 1, 6, 5))
    assert np.array_equal(model.velocity(x, 0.3, c1, True), model.velocity(x, 0.3, c2, True))
    assert np.linalg.norm(model.velocity(x, 0.3, c1, False) - model.velocity(x, 0.3, c2, False)) > 0


def test_cfg_identities_exact():
    rng = np.random.default_rng(3)
    vc, vu = rng.standard_normal((2, 4, 3))
    assert F.guided_velocity(vc, vu, 1.0) is vc
    assert F.guided_velocity(vc, vu, 0.0) is vu
    assert np.allclose(F.guided_velocity(vc, vu, 1.5), vu + 1.5 * (vc - vu))
    cond_only = Field(lambda x, t: -x, lambda x, t: np.full_like(x, np.nan))
    x0 = rng.standard_normal((1, 4, 3))
    out = F.sample_euler_cfg(None, F.SamplerConfig(10, 1.0), cond_only, x0=x0)
    assert np.array_equal(out, F.sample_euler_cfg(None, F.SamplerConfig(10, 1.0), Field(lambda x, t: -x), x0=x0))
    assert cond_only.calls[True] == 0
    uncond_only = Field(lambda x, t: np.full_like(x, np.nan), lambda x, t: 2 * x)
    out0 = F.sample_euler_cfg(None, F.SamplerConfig(10, 0.0), uncond_only, x0=x0)
    assert np.array_equal(out0, F.sample_euler_cfg(None, F.SamplerConfig(10, 1.0), Field(lambda x, t: 2 * x), x0=x0))


@pytest.mark.parametrize("n_steps", [1, 3, 50])
def test_constant_field_is_exact(n_steps):
    c = np.array([0.5, -1.0, 2.0])
    x0 = np.random.default_rng(4).standard_normal((7, 3))
    out = F.sample_euler_cfg(None, F.SamplerConfig(n_steps, 1.5), Field(lambda x, t: np.broadcast_to(c, x.shape)),
                             x0=x0)
    assert np.allclose(out, x0 + c, atol=1e-12)


def scaling_field(a):
    return lambda x, t: (a - 1) * x / ((1 - t) + t * a)


def euler_scalar(x0, a, n):
    # Euler on the linear field is a product of per-step factors
    x = np.array(x0, dtype=np.float64)
    for k in range(n):
        t = k / n
        x = x * (1 + (a - 1) / ((1 - t) + t * a) / n)
    return x


@pytest.mark.parametrize("a", [0.5, 2.0, 3.0])
def test_linear_scaling_terminal_std(a):
    x0 = np.random.default_rng(5).standard_normal((20000, 1))
    oracle = euler_scalar(x0, a, 100_000).std()
    assert oracle == pytest.approx(a * x0.std(), rel=1e-4)
    field = Field(scaling_field(a))
    out50 = F.sample_euler_cfg(None, F.SamplerConfig(50, 1.5), field, x0=x0)
    out25 = F.sample_euler_cfg(None, F.SamplerConfig(25, 1.5), field, x0=x0)
    assert abs(out50.std() - oracle) / oracle < 0.02
    assert abs(out50.std() - oracle) <= abs(out25.std() - oracle)


def test_sampler_is_seeded():
    model = F.Dit(tiny_cfg())
    cond = np.random.default_rng(0).standard_normal((1, 6, 5))
    a = F.sample_euler_cfg(cond, F.SamplerConfig(3, 1.5, seed=9), model)
    b = F.sample_euler_cfg(cond, F.SamplerConfig(3, 1.5, seed=9), model)
    c = F.sample_euler_cfg(cond, F.SamplerConfig(3, 1.5, seed=10), model)
    assert a.tobytes() == b.tobytes() and not np.array_equal(a, c)
    traj = []
    F.sample_euler_cfg(cond, F.SamplerConfig(4, 1.5, seed=9), model, trajectory=traj)
    assert len(traj) == 4


def test_fm_gradients_match_finite_differences(f64):
    model = F.Dit(tiny_cfg())
    batch = tiny_batch(np.random.default_rng(6))
    errs = gradcheck.check_params(lambda: F.fm_loss(batch, model), model.parameters(), n=20,
                                  rng=np.random.default_rng(7))
    assert max(errs) < 1e-4


def test_null_embedding_gradient_zero_without_dropout():
    model = F.Dit(tiny_cfg())
    batch = tiny_batch(np.random.default_rng(8), drop=np.array([False, False]))
    T.backward(F.fm_loss(batch, model))
    assert model.null_cond.grad is None or not np.any(model.null_cond.grad)
    model.null_cond.grad = None
    batch = tiny_batch(np.random.default_rng(8), drop=np.array([True, False]))
    T.backward(F.fm_loss(batch, model))
    assert np.any(model.null_cond.grad)


def mixture(rng, n, weights=(0.7, 0.3)):
    centres = np.array([[-2.0, 0.0], [2.0, 0.5]])
    k = rng.choice(2, n, p=weights)
    return centres[k] + 0.3 * rng.standard_normal((n, 2)), centres


def test_toy_mixture_proportions():
    rng = np.random.default_rng(0)
    model = F.ToyVelocity(2, 64, seed=0)
    opt = F.make_optimizer(model, 3e-3)
    for _ in range(1500):
        x1, _ = mixture(rng, 256)
        opt.zero_grad()
        loss = F.toy_fm_loss(model, x1, rng.standard_normal(x1.shape), rng.uniform(size=256))
        loss.backward()
        opt.step()
    out = F.sample_euler_cfg(None, F.SamplerConfig(50, 1.0, seed=1), model, shape=(1000, 2))
    _, centres = mixture(rng, 1)
    assign = ((out[:, None, :] - centres[None]) ** 2).sum(-1).argmin(1)
    frac = np.bincount(assign, minlength=2) / 1000
    assert abs(frac[0] - 0.7) <= 0.1 and abs(frac[1] - 0.3) <= 0.1


def test_fm_train_checkpoint_and_condition_check(tmp_path):
    rng = np.random.default_rng(9)
    cfg = tiny_cfg()
    latents = [rng.standard_normal((20, 3)) * 2 + 1 for _ in range(4)]
    conds = [[rng.standard_normal((20, 5)), rng.standard_normal((20, 5))] for _ in range(4)]
    losses = []
    state = F.fm_train(latents, conds, cfg, steps=6, batch=4, seg_len=8, seed=0,
                       log=lambda r: losses.append(r["loss"]), checkpoint_path=tmp_path / "f.ckpt",
                       save_every=3, sampler=F.SamplerConfig(5, 1.5))
    assert len(losses) == 6 and all(np.isfinite(losses))
    allz = np.concatenate(latents)
    assert np.allclose(state.latent_mean, allz.mean(0))
    loaded, meta = F.load(tmp_path / "f.ckpt")
    assert meta["step"] == 6 and meta["cond_dim"] == 5 and loaded.sampler.n_steps == 5
    cond = rng.standard_normal((8, 5))
    assert np.array_equal(loaded.generate(cond), state.generate(cond))
    assert loaded.generate(cond).shape == (8, 3)
    with pytest.raises(ValueError):
        loaded.generate(rng.standard_normal((8, 4)))
    z = rng.standard_normal((5, 3))
    assert np.allclose(state.destandardize(state.standardize(z)), z)
