import numpy as np
import pytest
import torch

from foleylab.codec import LatentSequence
from foleylab.denoiser import Denoiser, DenoiserConfig
from foleylab.diffusion import (
    ConditionBundle,
    GuidanceSpec,
    NoiseSchedule,
    TrainingExample,
    add_noise,
    cfg_combine,
    ddim_step,
    ddim_timesteps,
    sample,
    training_loss,
)
from foleylab.encoders import Caption

TINY = DenoiserConfig(
    layers=1, hidden_dim=32, heads=2, ffn_dim=48,
    audio_proj_dim=16, video_proj_dim=16,
    latent_dim=8, text_dim=24, video_dim=12, max_len=64,
)


@pytest.fixture(scope="module")
def sched():
    return NoiseSchedule.cosine()


@pytest.fixture(scope="module")
def tiny_denoiser():
    torch.manual_seed(0)
    return Denoiser(TINY)


# ------------------------------------------------------------------ schedule


def test_cosine_schedule_invariants(sched):
    ab = sched.alpha_bar
    assert ab[0] == 1.0
    assert np.all(np.diff(ab) < 0)
    assert ab[1] >= 0.99
    assert ab[-1] <= 0.01
    assert ab[-1] > 0.0


def test_schedule_validation_rejects_bad():
    with pytest.raises(ValueError):
        NoiseSchedule(np.array([1.0, 0.5, 0.6, 0.001]))  # not monotone
    with pytest.raises(ValueError):
        NoiseSchedule(np.array([1.0, 0.5, 0.001]))  # alpha_bar[1] too low


def test_timestep_sampler_uniform(sched):
    rng = np.random.Generator(np.random.PCG64(0))
    ts = sched.sample_timesteps(20000, rng)
    assert ts.min() >= 1 and ts.max() <= 1000
    assert abs(ts.mean() - 500.5) < 10


# ----------------------------------------------------------------- add_noise


def test_add_noise_endpoints(sched):
    rng = np.random.Generator(np.random.PCG64(1))
    z0 = rng.standard_normal((16, 4))
    eps = rng.standard_normal((16, 4))
    z1 = add_noise(z0, 1, eps, sched)
    assert np.linalg.norm(z1 - z0) / np.linalg.norm(z0) < 0.02
    zT = add_noise(z0, sched.num_steps, eps, sched)
    assert np.linalg.norm(zT - eps) / np.linalg.norm(eps) < 0.01


def test_add_noise_rejects_bad_t(sched):
    z = np.zeros((4, 2))
    with pytest.raises(ValueError):
        add_noise(z, 0, z, sched)
    with pytest.raises(ValueError):
        add_noise(z, 1001, z, sched)


def test_add_noise_variance_monte_carlo(sched):
    """Brute-force sampling oracle: Var(z_t) = ab_t Var(z0) + (1 - ab_t)."""
    rng = np.random.Generator(np.random.PCG64(7))
    n = 10_000
    sigma0 = 1.3
    for t in (100, 500, 900):
        z0 = rng.standard_normal((n, 4)) * sigma0
        eps = rng.standard_normal((n, 4))
        z_t = add_noise(z0, t, eps, sched)
        expected = sched.alpha_bar[t] * sigma0**2 + (1 - sched.alpha_bar[t])
        got = z_t.var(axis=0)
        assert np.all(np.abs(got - expected) / expected <= 0.05)


# --------------------------------------------------------------- cfg_combine


def test_cfg_gamma_zero_identity():
    rng = np.random.Generator(np.random.PCG64(2))
    a, b = rng.standard_normal((2, 5, 3))
    assert np.array_equal(cfg_combine(a, b, 0.0), a)


def test_cfg_equal_branches_identity():
    rng = np.random.Generator(np.random.PCG64(3))
    a = rng.standard_normal((5, 3))
    for gamma in (0.0, 1.0, 3.0, 7.5):
        assert np.allclose(cfg_combine(a, a, gamma), a, atol=1e-12)


def test_cfg_arithmetic():
    assert cfg_combine(np.array(1.0), np.array(0.0), 3.0) == 4.0


def test_cfg_affine_property():
    rng = np.random.Generator(np.random.PCG64(4))
    a, b, c, d = rng.standard_normal((4, 6))
    gamma = 2.5
    left = cfg_combine(a, b, gamma) + cfg_combine(c, d, gamma)
    right = cfg_combine(a + c, b + d, gamma)
    assert np.allclose(left, right, atol=1e-9)


def test_cfg_rejects_negative_gamma():
    with pytest.raises(ValueError):
        cfg_combine(np.zeros(2), np.zeros(2), -0.5)


# ----------------------------------------------------------------- ddim_step


def test_ddim_perfect_eps_inversion(sched):
    rng = np.random.Generator(np.random.PCG64(5))
    z0 = rng.standard_normal((8, 4))  # float64
    eps = rng.standard_normal((8, 4))
    for t in (1, 10, 250, 500, 750, 999, 1000):
        z_t = add_noise(z0, t, eps, sched)
        back = ddim_step(z_t, eps, t, 0, sched)
        assert np.abs(back - z0).max() < 1e-5, t


def test_ddim_identity_at_equal_t(sched):
    rng = np.random.Generator(np.random.PCG64(6))
    z = rng.standard_normal((8, 4))
    eps = rng.standard_normal((8, 4))
    assert np.allclose(ddim_step(z, eps, 400, 400, sched), z)


def test_ddim_rejects_increasing_t(sched):
    z = np.zeros((2, 2))
    with pytest.raises(ValueError):
        ddim_step(z, z, 10, 20, sched)


def test_ddim_timesteps_spacing(sched):
    ts = ddim_timesteps(sched, 100)
    assert ts[0] == 1000 and ts[-1] == 0
    assert len(ts) == 101
    assert all(a > b for a, b in zip(ts, ts[1:]))


# ------------------------------------------------------------- training loss


def _example(seq=16, dim=8, mask_span=None, seed=0, video=False, cfg=TINY):
    rng = np.random.Generator(np.random.PCG64(seed))
    z0 = rng.standard_normal((seq, dim)).astype(np.float32)
    mask = None
    cond = None
    if mask_span is not None:
        mask = np.zeros(seq, dtype=bool)
        mask[mask_span[0] : mask_span[0] + mask_span[1]] = True
        cond = LatentSequence(z0[mask])
    vid = rng.standard_normal((seq, cfg.video_dim)).astype(np.float32) if video else None
    return TrainingExample(
        latents=z0,
        bundle=ConditionBundle(text=None, video=vid, cond_latents=cond, cond_mask=mask),
    )


class _ZeroDenoiser:
    cfg = TINY

    def __call__(self, latents, *args, **kwargs):
        return torch.zeros_like(latents)


def test_zero_denoiser_loss_matches_expectation(sched):
    """With eps_hat = 0 the expected loss is E||eps||^2 = C_z per position."""
    batch = [_example(seq=64, dim=8, seed=i) for i in range(8)]
    loss, _ = training_loss(batch, _ZeroDenoiser(), sched, seed=123)
    assert abs(float(loss) - 8.0) / 8.0 < 0.10


def test_masked_positions_contribute_zero(sched, tiny_denoiser):
    batch = [_example(mask_span=(2, 6), seed=3)]
    loss, per_pos = training_loss(batch, tiny_denoiser, sched, seed=0)
    assert per_pos.shape == (1, 16)
    assert np.all(per_pos[0, 2:8] == 0.0)
    assert np.all(per_pos[0, :2] > 0)
    assert np.all(per_pos[0, 8:] > 0)


def test_all_false_mask_equals_plain_mse(sched, tiny_denoiser):
    ex_nomask = _example(seed=4)
    ex_empty = _example(seed=4)
    ex_empty.bundle.cond_mask = np.zeros(16, dtype=bool)
    l1, m1 = training_loss([ex_nomask], tiny_denoiser, sched, seed=9)
    l2, m2 = training_loss([ex_empty], tiny_denoiser, sched, seed=9)
    assert float(l1) == float(l2)
    assert np.array_equal(m1, m2)


def test_all_conditional_example_skipped_with_warning(sched, tiny_denoiser):
    full = _example(mask_span=(0, 16), seed=5)
    ok = _example(seed=6)
    with pytest.warns(UserWarning):
        loss, per_pos = training_loss([full, ok], tiny_denoiser, sched, seed=0)
    assert per_pos.shape[0] == 1
    with pytest.raises(ValueError):
        with pytest.warns(UserWarning):
            training_loss([full], tiny_denoiser, sched, seed=0)


def test_loss_gradient_zero_at_conditional_positions(sched):
    """Analytic gradient w.r.t. the denoiser output vanishes on the mask."""
    torch.manual_seed(1)
    net = Denoiser(TINY)
    captured = {}
    orig_forward = net.forward

    def capture(latents, *a, **k):
        out = orig_forward(latents, *a, **k)
        out.retain_grad()
        captured["out"] = out
        return out

    net.forward = capture
    batch = [_example(mask_span=(3, 5), seed=7)]
    loss, _ = training_loss(batch, net, sched, seed=11)
    loss.backward()
    grad = captured["out"].grad[0]
    assert float(grad[3:8].abs().max()) <= 1e-8
    assert float(grad[:3].abs().max()) > 0


def test_loss_gradient_finite_difference_at_conditional(sched):
    """Perturbing the output on conditional positions leaves the loss fixed."""
    batch = [_example(mask_span=(3, 5), seed=8)]

    class Fixed:
        cfg = TINY

        def __init__(self):
            gen = torch.Generator().manual_seed(2)
            self.base = torch.randn(1, 16, 8, generator=gen)
            self.delta = torch.zeros(1, 16, 8)

        def __call__(self, latents, *a, **k):
            return self.base + self.delta

    net = Fixed()
    l0, _ = training_loss(batch, net, sched, seed=13)
    net.delta[0, 4, 2] = 1e-3  # conditional position
    l1, _ = training_loss(batch, net, sched, seed=13)
    assert abs(float(l1) - float(l0)) <= 1e-8
    net.delta[0, 4, 2] = 0.0
    net.delta[0, 0, 2] = 1e-3  # non-conditional position
    l2, _ = training_loss(batch, net, sched, seed=13)
    assert abs(float(l2) - float(l0)) > 1e-8


# ------------------------------------------------------------------ sampling


def _bundle(seq=16, cond_frames=0, seed=0, cfg=TINY):
    rng = np.random.Generator(np.random.PCG64(seed))
    video = rng.standard_normal((seq, cfg.video_dim)).astype(np.float32)
    cond = mask = None
    if cond_frames:
        mask = np.zeros(seq, dtype=bool)
        mask[:cond_frames] = True
        cond = LatentSequence(rng.standard_normal((cond_frames, cfg.latent_dim)).astype(np.float32))
    return ConditionBundle(text=None, video=video, cond_latents=cond, cond_mask=mask)


def test_sample_deterministic_bitwise(sched, tiny_denoiser):
    spec = GuidanceSpec(mode="text_negative", gamma=3.0, pos_caption=Caption("tone-a", "low"))
    bundle = _bundle()
    z1 = sample(spec, bundle, tiny_denoiser, sched, steps=100, seed=42)
    z2 = sample(spec, bundle, tiny_denoiser, sched, steps=100, seed=42)
    assert np.array_equal(z1.frames, z2.frames)
    assert np.all(np.isfinite(z1.frames))


def test_sample_gamma_zero_skips_negative_branch(sched):
    torch.manual_seed(0)
    net = Denoiser(TINY)
    calls = {"n": 0}
    orig = net.forward

    def counting(*a, **k):
        calls["n"] += 1
        return orig(*a, **k)

    net.forward = counting
    spec = GuidanceSpec(mode="text_negative", gamma=0.0, pos_caption=Caption("x", "low"))
    sample(spec, _bundle(), net, sched, steps=10, seed=0)
    assert calls["n"] == 10  # one branch per step, negative never evaluated


def test_sample_gamma_zero_matches_single_branch(sched, tiny_denoiser):
    """gamma=0 trajectory equals conditional-only sampling with any negative."""
    pos = Caption("tone-a", "low")
    z_a = sample(
        GuidanceSpec("text_negative", 0.0, pos, Caption("tone-b", "none")),
        _bundle(), tiny_denoiser, sched, steps=20, seed=5,
    )
    z_b = sample(
        GuidanceSpec("text_negative", 0.0, pos, None),
        _bundle(), tiny_denoiser, sched, steps=20, seed=5,
    )
    assert np.array_equal(z_a.frames, z_b.frames)


def test_sample_gamma_changes_output(sched, tiny_denoiser):
    spec3 = GuidanceSpec("text_negative", 3.0, Caption("tone-a", "low"))
    spec5 = GuidanceSpec("text_negative", 5.0, Caption("tone-a", "low"))
    z3 = sample(spec3, _bundle(), tiny_denoiser, sched, steps=25, seed=7)
    z5 = sample(spec5, _bundle(), tiny_denoiser, sched, steps=25, seed=7)
    assert not np.array_equal(z3.frames, z5.frames)
    assert np.all(np.isfinite(z3.frames)) and np.all(np.isfinite(z5.frames))


def test_extension_conditional_frames_bitwise(sched, tiny_denoiser):
    bundle = _bundle(cond_frames=6, seed=9)
    spec = GuidanceSpec(mode="extension", gamma=3.0)
    z = sample(spec, bundle, tiny_denoiser, sched, steps=20, seed=1)
    assert np.array_equal(z.frames[:6], bundle.cond_latents.frames)
    assert not np.array_equal(z.frames[6:12], bundle.cond_latents.frames)


def test_extension_requires_cond_latents(sched, tiny_denoiser):
    with pytest.raises(ValueError):
        sample(GuidanceSpec(mode="extension"), _bundle(), tiny_denoiser, sched, steps=5)


def test_quality_mode_caption_resolution():
    spec = GuidanceSpec(mode="quality", pos_caption=Caption("tone-a", "none"))
    pos, neg = spec.resolved_captions()
    assert pos.render() == "tone-a, high quality"
    assert neg.render() == "low quality"
    spec = GuidanceSpec(mode="quality", pos_caption=None, use_null_negative=True)
    pos, neg = spec.resolved_captions()
    assert pos.render() == "high quality"
    assert neg is None


def test_guidance_spec_validation():
    with pytest.raises(ValueError):
        GuidanceSpec(mode="bogus")
    with pytest.raises(ValueError):
        GuidanceSpec(mode="quality", gamma=-1.0)
    with pytest.raises(ValueError):
        GuidanceSpec(mode="quality", gamma=float("nan"))


def test_condition_bundle_validation():
    with pytest.raises(ValueError):
        ConditionBundle(cond_latents=LatentSequence(np.zeros((4, 8), dtype=np.float32)))
    with pytest.raises(ValueError):
        ConditionBundle(
            cond_latents=LatentSequence(np.zeros((4, 8), dtype=np.float32)),
            cond_mask=np.zeros(16, dtype=bool),
        )
