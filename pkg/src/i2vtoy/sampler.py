"""Reverse process: DDIM with v-prediction and CFG, frame prediction, long videos.

Sampling always starts from i.i.d. Gaussian noise that depends only on the
seed and the clip shape.  The reference image enters solely through the
frame mask / condition-latent channels and the semantic tokens.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping

import numpy as np

from . import codec
from .conditioning import (
    GuidanceConfig,
    SemanticCondition,
    assemble_model_input,
    build_conditions,
    cfg_combine,
)
from .denoiser import Denoiser, denoise
from .schedule import (
    NoiseSchedule,
    Prediction,
    build_linear_schedule,
    eps_from_v,
    q_sample,
    timesteps,
    x0_from_v,
)
from .tensor import ConfigError, Rng, no_grad

ZSNR_PRIOR_WARNING = (
    "noisy prior requested at t=T on a zero-terminal-SNR schedule: "
    "the signal coefficient is zero, so the reference prior has no effect"
)


@dataclass(frozen=True)
class SamplerConfig:
    K: int = 50
    eta: float = 0.0
    guidance: GuidanceConfig = field(default_factory=lambda: GuidanceConfig(w=1.0))
    seed: int = 0
    latent_replacement: bool = False
    spacing: str = "trailing"
    noisy_prior: float | None = None
    prior_schedule: str = "linear"  # "linear": un-rescaled betas; "model": the sampling schedule

    def __post_init__(self):
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must lie in [0, 1], got {self.eta}")
        if self.noisy_prior is not None and not 0.0 <= self.noisy_prior <= 1.0:
            raise ConfigError(f"noisy prior strength must lie in [0, 1], got {self.noisy_prior}")
        if self.prior_schedule not in ("linear", "model"):
            raise ConfigError(f"prior_schedule must be 'linear' or 'model', got {self.prior_schedule!r}")


# A v-predictor is either a trained Denoiser or any callable
# (input9 [T, 9, h, w], t, SemanticCondition) -> v [T, 4, h, w].
VPredictor = Denoiser | Callable[[np.ndarray, int, SemanticCondition], np.ndarray]


@dataclass
class GenerationJob:
    model: VPredictor
    schedule: NoiseSchedule
    references: Mapping[int, np.ndarray]  # frame index -> codec latent (4 x h x w)
    condition: SemanticCondition
    T_clip: int
    h: int
    w: int
    latent_scale: float = 1.0

    def __post_init__(self):
        bad = [i for i in self.references if not 0 <= i < self.T_clip]
        if bad:
            raise ConfigError(f"reference frames {bad} outside clip of {self.T_clip}")


@dataclass
class SampleResult:
    latents: np.ndarray  # codec latents, T x 4 x h x w
    frames: np.ndarray  # decoded, T x 1 x H x W, unclamped
    initial_noise: np.ndarray


def initial_noise(T_clip: int, h: int, w: int, rng: Rng, dtype=np.float32) -> np.ndarray:
    return rng.normal((T_clip, 4, h, w), dtype)


def noisy_prior_baseline(
    x0_ref: np.ndarray, strength: float, T_clip: int, rng: Rng, prior_schedule: NoiseSchedule
) -> np.ndarray:
    """Initial state carrying the same reference component in every frame.

    Each frame is ``sqrt(1 - l^2) * eps_f + l * (a_T * x0_ref + s_T * eps_f)``
    where ``(a_T, s_T)`` come from ``prior_schedule`` at its final step.  With
    ``l = 0`` this is exactly :func:`initial_noise` for the same stream.
    """
    if not 0.0 <= strength <= 1.0:
        raise ConfigError(f"prior strength must lie in [0, 1], got {strength}")
    x0_ref = np.asarray(x0_ref, dtype=np.float32)
    eps = initial_noise(T_clip, x0_ref.shape[-2], x0_ref.shape[-1], rng)
    if strength == 0.0:
        return eps
    if prior_schedule.zsnr_applied:
        warnings.warn(ZSNR_PRIOR_WARNING, stacklevel=2)
    T = prior_schedule.T
    a_T = np.float32(prior_schedule.alpha(T))
    s_T = np.float32(prior_schedule.sigma(T))
    lam = np.float32(strength)
    prior = a_T * x0_ref[None] + s_T * eps
    return np.sqrt(np.float32(1.0) - lam * lam) * eps + lam * prior


def ddim_step(x_t, v_hat, t: int, t_prev: int, sched: NoiseSchedule, eta: float = 0.0, rng: Rng | None = None):
    if not t > t_prev >= 0:
        raise ConfigError(f"timesteps must decrease: t={t}, t_prev={t_prev}")
    x0_hat = x0_from_v(x_t, v_hat, t, sched).value
    if t_prev == 0:
        return x0_hat
    eps_hat = eps_from_v(x_t, v_hat, t, sched).value
    a_t, s_t = float(sched.alpha(t)), float(sched.sigma(t))
    a_p, s_p = float(sched.alpha(t_prev)), float(sched.sigma(t_prev))
    sigma = 0.0
    if eta > 0:
        sigma = eta * math.sqrt((s_p * s_p) / (s_t * s_t) * (1.0 - (a_t * a_t) / (a_p * a_p)))
    dir_coef = math.sqrt(max(s_p * s_p - sigma * sigma, 0.0))
    dt = x_t.dtype.type
    out = dt(a_p) * x0_hat + dt(dir_coef) * eps_hat
    if sigma > 0:
        if rng is None:
            raise ConfigError("eta > 0 requires an rng")
        out = out + dt(sigma) * rng.normal(x_t.shape, x_t.dtype)
    return out


def predict_v(model: VPredictor, input9: np.ndarray, t: int, cond: SemanticCondition) -> np.ndarray:
    if isinstance(model, Denoiser):
        with no_grad():
            tokens = model.tokens(np.asarray(cond.vector)[None])
            return denoise(model, input9, t, tokens).data.astype(input9.dtype, copy=False)
    return np.asarray(model(input9, t, cond), dtype=input9.dtype)


def sample(job: GenerationJob, cfg: SamplerConfig) -> SampleResult:
    sched = job.schedule
    if not sched.zsnr_applied:
        warnings.warn("sampling with a schedule lacking zero terminal SNR", stacklevel=2)
    scale = np.float32(job.latent_scale)
    refs = {i: np.asarray(z, dtype=np.float32) * scale for i, z in job.references.items()}
    mask, cond_latent = build_conditions(refs, job.T_clip, job.h, job.w)

    rng = Rng(cfg.seed)
    noise_rng = rng.derive(0)
    step_rng = rng.derive(1)
    if cfg.noisy_prior is not None and cfg.noisy_prior > 0:
        if 0 not in refs:
            raise ConfigError("noisy prior needs a reference latent for frame 0")
        if cfg.prior_schedule == "model":
            prior_sched = sched
        else:
            prior_sched = build_linear_schedule(sched.T, *(sched.betas or (1e-4, 0.02)))
        x = noisy_prior_baseline(refs[0], cfg.noisy_prior, job.T_clip, noise_rng, prior_sched)
    else:
        x = initial_noise(job.T_clip, job.h, job.w, noise_rng)
    x0_state = x.copy()

    null = SemanticCondition.null(len(job.condition.vector))
    g = cfg.guidance
    single_branch = g.w == 1.0 and g.rescale_phi is None
    ts = timesteps(sched.T, cfg.K, cfg.spacing)
    for i, t in enumerate(ts):
        t_prev = ts[i + 1] if i + 1 < len(ts) else 0
        inp = assemble_model_input(x, mask, cond_latent)
        v_cond = predict_v(job.model, inp, t, job.condition)
        if single_branch:
            v = Prediction("v", v_cond)
        else:
            # both branches see the identical 9-channel input; only the tokens differ
            v_unc = predict_v(job.model, inp, t, null)
            v = cfg_combine(Prediction("v", v_unc), Prediction("v", v_cond), g)
        x = ddim_step(x, v, t, t_prev, sched, cfg.eta, step_rng)
        if cfg.latent_replacement and refs:
            for j, z in refs.items():
                if t_prev == 0:
                    x[j] = z
                else:
                    x[j] = q_sample(z, t_prev, step_rng.normal(z.shape), sched)
    latents = x / scale
    return SampleResult(latents, codec.decode_video(latents), x0_state)


def sample_i2v(
    model: VPredictor, sched: NoiseSchedule, image: np.ndarray, cond: SemanticCondition,
    T_clip: int, cfg: SamplerConfig, latent_scale: float = 1.0,
) -> SampleResult:
    """Image-to-video: condition frame 0 on ``image`` (a ``1 x H x W`` frame)."""
    z = codec.encode(image)
    job = GenerationJob(model, sched, {0: z}, cond, T_clip, z.shape[1], z.shape[2], latent_scale)
    return sample(job, cfg)


def predict_continuation(
    model: VPredictor, sched: NoiseSchedule, context, cond: SemanticCondition,
    T_clip: int, cfg: SamplerConfig, latent_scale: float = 1.0,
) -> np.ndarray:
    """Generate frames ``L..T_clip-1`` given ``L`` context latents."""
    context = [np.asarray(z) for z in context]
    L = len(context)
    if not 1 <= L < T_clip:
        raise ConfigError(f"context length {L} must satisfy 1 <= L < {T_clip}")
    h, w = context[0].shape[-2:]
    job = GenerationJob(model, sched, dict(enumerate(context)), cond, T_clip, h, w, latent_scale)
    return sample(job, cfg).latents[L:]


def long_video_iterations(N: int, T_clip: int, L_overlap: int) -> int:
    if not 1 <= L_overlap < T_clip:
        raise ConfigError(f"overlap {L_overlap} must satisfy 1 <= L < {T_clip}")
    if N <= T_clip:
        return 0
    return math.ceil((N - T_clip) / (T_clip - L_overlap))


def long_video_clip_passes(N: int, T_clip: int, L_overlap: int) -> int:
    """Sampler runs needed for ``N`` frames: the first clip plus every continuation."""
    return 1 + long_video_iterations(N, T_clip, L_overlap)


def generate_long_video(
    model: VPredictor, sched: NoiseSchedule, init_image: np.ndarray | None, cond: SemanticCondition,
    N: int, T_clip: int, L_overlap: int, cfg: SamplerConfig, latent_scale: float = 1.0,
    context=None,
) -> SampleResult:
    """First clip, then repeated continuation conditioned on the last ``L_overlap`` frames.

    The first clip is image-to-video from ``init_image`` or, when ``context``
    latents are given instead, a prediction clip conditioned on all of them.
    """
    if N < 1:
        raise ConfigError(f"total frames must be positive, got {N}")
    iterations = long_video_iterations(N, T_clip, L_overlap)
    if context is not None:
        context = [np.asarray(z) for z in context]
        if not 1 <= len(context) < T_clip:
            raise ConfigError(f"context length {len(context)} must satisfy 1 <= L < {T_clip}")
        h, w = context[0].shape[-2:]
        job = GenerationJob(model, sched, dict(enumerate(context)), cond, T_clip, h, w, latent_scale)
        first = sample(job, cfg)
    elif init_image is not None:
        first = sample_i2v(model, sched, init_image, cond, T_clip, cfg, latent_scale)
    else:
        raise ConfigError("either an initial image or context latents are required")
    latents = list(first.latents)
    for it in range(iterations):
        step_cfg = replace(cfg, seed=_iteration_seed(cfg.seed, it + 1), noisy_prior=None)
        new = predict_continuation(model, sched, latents[-L_overlap:], cond, T_clip, step_cfg, latent_scale)
        latents.extend(new)
    out = np.stack(latents[:N])
    return SampleResult(out, codec.decode_video(out), first.initial_noise)


def _iteration_seed(seed: int, it: int) -> int:
    return int(np.random.SeedSequence([seed, it]).generate_state(1, np.uint64)[0] >> 1)
