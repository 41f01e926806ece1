import warnings

import numpy as np
import pytest

from i2vtoy.conditioning import GuidanceConfig, SemanticCondition, split_model_input
from i2vtoy.sampler import (
    ZSNR_PRIOR_WARNING,
    GenerationJob,
    SamplerConfig,
    ddim_step,
    generate_long_video,
    initial_noise,
    long_video_clip_passes,
    long_video_iterations,
    noisy_prior_baseline,
    predict_continuation,
    sample,
    sample_i2v,
)
from i2vtoy.schedule import Prediction, build_linear_schedule, make_schedule
from i2vtoy.tensor import ConfigError, Rng

SCHED = make_schedule(1000, 1e-4, 0.02, zsnr=True)
COND = SemanticCondition(np.linspace(0, 1, 8).astype(np.float32))


def oracle_for(x0, sched):
    """Predicts the exact v-target of a known clean latent."""
    def model(input9, t, cond):
        x_t = split_model_input(input9)[0].astype(np.float64)
        return (sched.alpha(t) * x_t - x0) / sched.sigma(t)
    return model


class Recorder:
    def __init__(self, value=0.0):
        self.calls = []
        self.value = value

    def __call__(self, input9, t, cond):
        self.calls.append((input9.copy(), t, cond))
        x_t = split_model_input(input9)[0]
        # depends on the tokens so CFG branches differ
        return np.full_like(x_t, self.value) + 0.01 * float(np.sum(cond.vector)) + 0.1 * x_t


def test_initial_noise_statistics():
    a = initial_noise(8, 16, 16, Rng(1))
    b = initial_noise(8, 16, 16, Rng(2))
    assert a.shape == (8, 4, 16, 16) and a.dtype == np.float32
    assert abs(np.corrcoef(a.ravel(), b.ravel())[0, 1]) < 0.05
    big = initial_noise(16, 16, 16, Rng(3))
    assert big.size >= 10_000 and abs(big.mean()) < 0.02


def test_ddim_final_step_and_determinism(np_rng):
    x = np_rng.normal(size=(2, 4, 3, 3)).astype(np.float32)
    v = Prediction("v", np_rng.normal(size=x.shape).astype(np.float32))
    from i2vtoy.schedule import x0_from_v
    assert np.array_equal(ddim_step(x, v, 20, 0, SCHED), x0_from_v(x, v, 20, SCHED).value)
    assert np.array_equal(ddim_step(x, v, 500, 480, SCHED), ddim_step(x, v, 500, 480, SCHED))
    with pytest.raises(ConfigError):
        ddim_step(x, v, 10, 10, SCHED)
    with pytest.raises(ConfigError):
        ddim_step(x, v, 500, 480, SCHED, eta=0.5)
    noisy = ddim_step(x, v, 500, 480, SCHED, eta=1.0, rng=Rng(0))
    assert not np.array_equal(noisy, ddim_step(x, v, 500, 480, SCHED))


@pytest.mark.parametrize("K", [1000, 50, 7])
def test_oracle_reconstruction(K, np_rng):
    x0 = np_rng.normal(size=(3, 4, 4, 4)) * 2
    job = GenerationJob(oracle_for(x0, SCHED), SCHED, {0: x0[0]}, COND, 3, 4, 4)
    out = sample(job, SamplerConfig(K=K, guidance=GuidanceConfig(w=1.0), seed=3)).latents
    assert np.max(np.abs(out - x0)) < 1e-4


def test_initial_state_ignores_reference(np_rng):
    rec = Recorder()
    imgs = np_rng.random((2, 1, 8, 8)).astype(np.float32)
    cfg = SamplerConfig(K=3, seed=11)
    a = sample_i2v(rec, SCHED, imgs[0], COND, 4, cfg)
    b = sample_i2v(rec, SCHED, imgs[1], COND, 4, cfg)
    assert np.array_equal(a.initial_noise, b.initial_noise)
    assert np.array_equal(a.initial_noise, initial_noise(4, 4, 4, Rng(11).derive(0)))


def test_branches_share_input_and_w1_is_single_branch(np_rng):
    img = np_rng.random((1, 8, 8)).astype(np.float32)
    rec = Recorder()
    guided = sample_i2v(rec, SCHED, img, COND, 4, SamplerConfig(K=5, guidance=GuidanceConfig(w=3.0)))
    assert len(rec.calls) == 10
    for (in_c, t_c, c_c), (in_u, t_u, c_u) in zip(rec.calls[0::2], rec.calls[1::2]):
        assert np.array_equal(in_c, in_u) and t_c == t_u
        assert c_u.is_null and not c_c.is_null

    single = Recorder()
    one = sample_i2v(single, SCHED, img, COND, 4, SamplerConfig(K=5, guidance=GuidanceConfig(w=1.0)))
    assert len(single.calls) == 5
    both = Recorder()
    # w=1 with an identity rescale still evaluates both branches
    two = sample_i2v(both, SCHED, img, COND, 4, SamplerConfig(K=5, guidance=GuidanceConfig(w=1.0, rescale_phi=0.0)))
    assert len(both.calls) == 10
    assert np.max(np.abs(one.latents - two.latents)) < 1e-6
    assert not np.allclose(guided.latents, one.latents)


def test_sampling_is_deterministic(np_rng):
    img = np_rng.random((1, 8, 8)).astype(np.float32)
    cfg = SamplerConfig(K=4, eta=0.5, seed=2)
    a = sample_i2v(Recorder(), SCHED, img, COND, 3, cfg)
    b = sample_i2v(Recorder(), SCHED, img, COND, 3, cfg)
    assert np.array_equal(a.frames, b.frames)


def test_latent_replacement_restores_reference(np_rng):
    img = np_rng.random((1, 8, 8)).astype(np.float32)
    from i2vtoy.codec import encode
    out = sample_i2v(Recorder(), SCHED, img, COND, 3, SamplerConfig(K=4, latent_replacement=True), latent_scale=4.0)
    np.testing.assert_allclose(out.latents[0], encode(img), atol=1e-6)


def test_noisy_prior_baseline(np_rng):
    ref = np_rng.normal(size=(4, 4, 4)).astype(np.float32)
    lin = build_linear_schedule(200, 1e-4, 0.02)
    zero = noisy_prior_baseline(ref, 0.0, 5, Rng(4), lin)
    assert np.array_equal(zero, initial_noise(5, 4, 4, Rng(4)))
    full = noisy_prior_baseline(ref, 1.0, 5, Rng(4), lin)
    eps = initial_noise(5, 4, 4, Rng(4))
    shared = full - np.float32(lin.sigma(200)) * eps
    for f in shared:
        np.testing.assert_allclose(f, lin.alpha(200) * ref, atol=1e-5)
    with pytest.warns(UserWarning, match="zero-terminal-SNR"):
        noisy_prior_baseline(ref, 1.0, 5, Rng(4), SCHED)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        noisy_prior_baseline(ref, 1.0, 5, Rng(4), lin)
    with pytest.raises(ConfigError):
        noisy_prior_baseline(ref, 1.5, 5, Rng(4), lin)
    assert ZSNR_PRIOR_WARNING.startswith("noisy prior")


def test_sampler_uses_linear_prior_schedule_by_default(np_rng):
    img = np_rng.random((1, 8, 8)).astype(np.float32)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        res = sample_i2v(Recorder(), SCHED, img, COND, 3, SamplerConfig(K=2, noisy_prior=1.0))
    assert not np.array_equal(res.initial_noise, initial_noise(3, 4, 4, Rng(0).derive(0)))
    with pytest.warns(UserWarning, match="zero-terminal-SNR"):
        sample_i2v(Recorder(), SCHED, img, COND, 3, SamplerConfig(K=2, noisy_prior=1.0, prior_schedule="model"))


def test_iteration_count():
    # 40 frames at T_clip=24, L=8: one I2V clip plus one prediction pass, two clip passes in total
    assert long_video_iterations(40, 24, 8) == 1
    assert long_video_clip_passes(40, 24, 8) == 2
    assert long_video_iterations(24, 24, 8) == 0
    assert long_video_clip_passes(24, 24, 8) == 1
    assert long_video_iterations(41, 24, 8) == 2
    assert long_video_iterations(56, 24, 8) == 2
    with pytest.raises(ConfigError):
        long_video_iterations(40, 24, 24)


def test_continuation_arity(np_rng):
    ctx = [np_rng.normal(size=(4, 2, 2)).astype(np.float32) for _ in range(2)]
    assert predict_continuation(Recorder(), SCHED, ctx, COND, 8, SamplerConfig(K=2)).shape == (6, 4, 2, 2)
    ctx = [np_rng.normal(size=(4, 2, 2)).astype(np.float32) for _ in range(8)]
    assert predict_continuation(Recorder(), SCHED, ctx, COND, 24, SamplerConfig(K=1)).shape == (16, 4, 2, 2)
    with pytest.raises(ConfigError):
        predict_continuation(Recorder(), SCHED, ctx, COND, 8, SamplerConfig(K=1))


@pytest.mark.parametrize("N", [5, 8, 13, 20])
def test_long_video_length(N, np_rng):
    img = np_rng.random((1, 4, 4)).astype(np.float32)
    rec = Recorder()
    out = generate_long_video(rec, SCHED, img, COND, N, 8, 3, SamplerConfig(K=2, guidance=GuidanceConfig(w=1.0)))
    assert out.latents.shape == (N, 4, 2, 2) and out.frames.shape == (N, 1, 4, 4)
    assert len(rec.calls) == 2 * (1 + long_video_iterations(N, 8, 3))


def test_long_video_conditions_on_previous_frames(np_rng):
    x_true = np_rng.normal(size=(16, 4, 2, 2))
    seen = []

    def model(input9, t, cond):
        _, m, f = split_model_input(input9)
        seen.append((m[:, 0, 0, 0].copy(), f.copy()))
        return np.zeros_like(f)

    img = np_rng.random((1, 4, 4)).astype(np.float32)
    out = generate_long_video(model, SCHED, img, COND, 12, 8, 3, SamplerConfig(K=1, guidance=GuidanceConfig(w=1.0)))
    mask2, f2 = seen[-1]
    assert list(mask2) == [1, 1, 1, 0, 0, 0, 0, 0]
    np.testing.assert_allclose(f2[:3], out.latents[5:8], atol=1e-6)
    assert x_true.shape[0] == 16


def test_context_start(np_rng):
    ctx = [np_rng.normal(size=(4, 2, 2)).astype(np.float32) for _ in range(3)]
    out = generate_long_video(Recorder(), SCHED, None, COND, 8, 8, 3, SamplerConfig(K=1), context=ctx)
    assert out.latents.shape[0] == 8
    with pytest.raises(ConfigError):
        generate_long_video(Recorder(), SCHED, None, COND, 8, 8, 3, SamplerConfig(K=1))


def test_config_validation():
    with pytest.raises(ConfigError):
        SamplerConfig(K=0)
    with pytest.raises(ConfigError):
        SamplerConfig(eta=1.5)
    with pytest.raises(ConfigError):
        GenerationJob(Recorder(), SCHED, {5: np.zeros((4, 2, 2))}, COND, 3, 2, 2)
