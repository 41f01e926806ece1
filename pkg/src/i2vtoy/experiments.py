"""Held-out evaluation and the noisy-prior motion A/B experiment."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import metrics as M
from .sampler import SamplerConfig, VPredictor, sample_i2v
from .schedule import NoiseSchedule
from .toydata import ClipSample, make_clip


def held_out_clips(n: int, T_clip: int, H: int, W: int, seed: int) -> list[ClipSample]:
    """Clips from a stream disjoint from training data generated with ``seed``."""
    return [make_clip(seed + 1_000_003, i, T_clip, H, W) for i in range(n)]


def generate_for(model: VPredictor, sched: NoiseSchedule, clips, cfg: SamplerConfig, latent_scale: float) -> list[np.ndarray]:
    out = []
    for i, clip in enumerate(clips):
        run = replace(cfg, seed=cfg.seed + i)
        out.append(sample_i2v(model, sched, clip.frames[0], clip.condition, len(clip.frames), run, latent_scale).frames)
    return out


def evaluate_i2v(model, sched, clips, cfg: SamplerConfig, latent_scale: float) -> M.MetricsReport:
    videos = generate_for(model, sched, clips, cfg, latent_scale)
    return M.evaluate([np.clip(v, 0, 1) for v in videos], [c.frames[0] for c in clips])


def sign_test_p(wins: int, n: int) -> float:
    """One-sided exact sign test: P(X >= wins) for X ~ Binomial(n, 1/2)."""
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2.0**n


@dataclass
class ABResult:
    motion_noise: list[float]
    motion_prior: list[float]
    ssim_noise: list[float]
    ssim_prior: list[float]

    @property
    def n(self) -> int:
        return len(self.motion_noise)

    @property
    def wins(self) -> int:
        # a "win" for the claim: the prior run moves strictly less than the pure-noise run
        return sum(p < q for p, q in zip(self.motion_prior, self.motion_noise))

    @property
    def p_value(self) -> float:
        return sign_test_p(self.wins, self.n)

    def summary(self) -> dict:
        return {
            "n": self.n,
            "mean_motion_noise": float(np.mean(self.motion_noise)),
            "mean_motion_prior": float(np.mean(self.motion_prior)),
            "mean_ssim_noise": float(np.mean(self.ssim_noise)),
            "mean_ssim_prior": float(np.mean(self.ssim_prior)),
            "wins": self.wins,
            "sign_test_p": self.p_value,
        }


def noisy_prior_ab(model, sched, clips, cfg: SamplerConfig, latent_scale: float, strength: float = 1.0) -> ABResult:
    """Paired runs per clip and seed: pure Gaussian start vs. noisy reference prior."""
    base = replace(cfg, noisy_prior=None)
    prior = replace(cfg, noisy_prior=strength)
    res = ABResult([], [], [], [])
    for i, clip in enumerate(clips):
        T = len(clip.frames)
        for run, mo, ss in ((base, res.motion_noise, res.ssim_noise), (prior, res.motion_prior, res.ssim_prior)):
            video = np.clip(sample_i2v(model, sched, clip.frames[0], clip.condition, T,
                                       replace(run, seed=cfg.seed + i), latent_scale).frames, 0, 1)
            mo.append(M.motion_intensity(video))
            ss.append(M.ssim(video[0], clip.frames[0]))
    return res
