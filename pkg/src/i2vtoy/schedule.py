"""Noise schedules, zero-terminal-SNR rescaling and v-parameterisation.

Timesteps are 1-based: ``t`` runs over ``1..T`` and ``a[t-1]`` is the signal
coefficient ``sqrt(alpha_bar_t)``.  ``t = 0`` is accepted by the coefficient
accessors as the clean endpoint (``a = 1``, ``s = 0``) so that the last
sampling step can target it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ConfigError, ShapeError

KINDS = ("v", "epsilon", "x0")


class TimestepError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    a: np.ndarray  # signal coefficient per t (index t-1), float64
    s: np.ndarray  # noise coefficient per t (index t-1), float64
    zsnr_applied: bool = False
    betas: tuple[float, float] | None = field(default=None, compare=False)

    def check_t(self, t, allow_zero: bool = False) -> np.ndarray:
        arr = np.asarray(t)
        if arr.dtype.kind not in "iu":
            if not np.all(arr == np.round(arr)):
                raise TimestepError(f"timestep must be integral, got {t}")
            arr = arr.astype(np.int64)
        lo = 0 if allow_zero else 1
        if np.any(arr < lo) or np.any(arr > self.T):
            raise TimestepError(f"timestep {t} outside [{lo}, {self.T}]")
        return arr

    def alpha(self, t) -> np.ndarray:
        """Signal coefficient a_t; a_0 = 1."""
        t = self.check_t(t, allow_zero=True)
        table = np.concatenate([[1.0], self.a])
        return table[t]

    def sigma(self, t) -> np.ndarray:
        """Noise coefficient s_t; s_0 = 0."""
        t = self.check_t(t, allow_zero=True)
        table = np.concatenate([[0.0], self.s])
        return table[t]

    def snr(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return (self.a / self.s) ** 2


@dataclass
class Prediction:
    kind: str
    value: np.ndarray

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown prediction kind {self.kind!r}")


def build_linear_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 2:
        raise ConfigError(f"T must be >= 2, got {T}")
    if not 0 < beta_start < beta_end < 1:
        raise ConfigError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - betas)
    a = np.sqrt(alpha_bar)
    s = np.sqrt(1.0 - alpha_bar)
    return NoiseSchedule(T=T, a=a, s=s, zsnr_applied=False, betas=(beta_start, beta_end))


def enforce_zero_terminal_snr(sched: NoiseSchedule) -> NoiseSchedule:
    """Shift and rescale the signal coefficients so that ``a_T == 0`` exactly.

    ``a_1`` is the fixed point of the affine map, so the low-noise end of the
    schedule is untouched.
    """
    a = np.asarray(sched.a, dtype=np.float64)
    a_first, a_last = a[0], a[-1]
    if not a_first > a_last:
        raise ConfigError("degenerate schedule: a_1 must exceed a_T")
    if a_last < 0:
        raise ConfigError("a_T must be non-negative")
    a_new = (a - a_last) * (a_first / (a_first - a_last))
    a_new[-1] = 0.0
    s_new = np.sqrt(1.0 - a_new * a_new)
    return NoiseSchedule(T=sched.T, a=a_new, s=s_new, zsnr_applied=True, betas=sched.betas)


def make_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02, zsnr: bool = True) -> NoiseSchedule:
    sched = build_linear_schedule(T, beta_start, beta_end)
    return enforce_zero_terminal_snr(sched) if zsnr else sched


def _coef(values: np.ndarray, like: np.ndarray) -> np.ndarray:
    """Broadcast per-sample coefficients over the trailing axes of ``like``."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return values.astype(like.dtype)
    if values.shape[0] != like.shape[0]:
        raise ShapeError(f"{values.shape[0]} timesteps for leading extent {like.shape[0]}")
    return values.reshape((-1,) + (1,) * (like.ndim - 1)).astype(like.dtype)


def q_sample(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Forward process: ``x_t = a_t * x0 + s_t * eps``."""
    if x0.shape != eps.shape:
        raise ShapeError(f"x0 {x0.shape} and eps {eps.shape} differ")
    sched.check_t(t)
    return _coef(sched.alpha(t), x0) * x0 + _coef(sched.sigma(t), x0) * eps


def v_from(x0: np.ndarray, eps: np.ndarray, t, sched: NoiseSchedule) -> Prediction:
    sched.check_t(t)
    return Prediction("v", _coef(sched.alpha(t), x0) * eps - _coef(sched.sigma(t), x0) * x0)


def _v_value(v) -> np.ndarray:
    if isinstance(v, Prediction):
        if v.kind != "v":
            raise ValueError(f"expected a v prediction, got {v.kind}")
        return v.value
    return np.asarray(v)


def x0_from_v(x_t: np.ndarray, v, t, sched: NoiseSchedule) -> Prediction:
    sched.check_t(t)
    v = _v_value(v)
    return Prediction("x0", _coef(sched.alpha(t), x_t) * x_t - _coef(sched.sigma(t), x_t) * v)


def eps_from_v(x_t: np.ndarray, v, t, sched: NoiseSchedule) -> Prediction:
    sched.check_t(t)
    v = _v_value(v)
    return Prediction("epsilon", _coef(sched.sigma(t), x_t) * x_t + _coef(sched.alpha(t), x_t) * v)


def trailing_timesteps(T: int, K: int) -> list[int]:
    """``K`` descending timesteps starting exactly at ``T``."""
    if not 1 <= K <= T:
        raise ConfigError(f"need 1 <= K <= T, got K={K}, T={T}")
    return [int(math.floor(T - i * T / K + 0.5)) for i in range(K)]


def leading_timesteps(T: int, K: int) -> list[int]:
    """Classic DDIM spacing; never visits ``T`` unless ``K == T``."""
    if not 1 <= K <= T:
        raise ConfigError(f"need 1 <= K <= T, got K={K}, T={T}")
    step = T // K
    return [1 + i * step for i in range(K)][::-1]


def linspace_timesteps(T: int, K: int) -> list[int]:
    if not 1 <= K <= T:
        raise ConfigError(f"need 1 <= K <= T, got K={K}, T={T}")
    ts = np.floor(np.linspace(1, T, K) + 0.5).astype(int)
    return [int(t) for t in ts[::-1]]


SPACINGS = {"trailing": trailing_timesteps, "leading": leading_timesteps, "linspace": linspace_timesteps}


def timesteps(T: int, K: int, spacing: str = "trailing") -> list[int]:
    try:
        return SPACINGS[spacing](T, K)
    except KeyError:
        raise ConfigError(f"unknown spacing {spacing!r}") from None
