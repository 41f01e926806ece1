"""Image conditioning: frame mask, condition latents, semantic tokens, CFG."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .schedule import Prediction
from .tensor import ConfigError, Rng, ShapeError, Tensor

SEMANTIC_WIDTH = 8
MODEL_CHANNELS = 9  # [x_t (4) | mask (1) | condition latent (4)]


@dataclass(frozen=True)
class SemanticCondition:
    vector: np.ndarray
    is_null: bool = False

    @classmethod
    def null(cls, width: int = SEMANTIC_WIDTH) -> "SemanticCondition":
        return cls(np.zeros(width, dtype=np.float32), is_null=True)

    def __eq__(self, other):
        return (
            isinstance(other, SemanticCondition)
            and self.is_null == other.is_null
            and np.array_equal(self.vector, other.vector)
        )

    __hash__ = None


@dataclass(frozen=True)
class FrameMask:
    data: np.ndarray  # T x 1 x h x w, values in {0, 1}
    conditioned_frames: frozenset[int] = field(default_factory=frozenset)


@dataclass(frozen=True)
class ImageConditionLatent:
    data: np.ndarray  # T x 4 x h x w, zero on unconditioned frames
    conditioned_frames: frozenset[int] = field(default_factory=frozenset)


@dataclass(frozen=True)
class GuidanceConfig:
    w: float = 1.0
    rescale_phi: float | None = None

    def __post_init__(self):
        if self.w < 0:
            raise ConfigError(f"guidance scale must be >= 0, got {self.w}")
        if self.rescale_phi is not None and not 0.0 <= self.rescale_phi <= 1.0:
            raise ConfigError(f"rescale_phi must lie in [0, 1], got {self.rescale_phi}")


def build_frame_mask(T_clip: int, conditioned, h: int, w: int, dtype=np.float32) -> FrameMask:
    conditioned = frozenset(int(i) for i in conditioned)
    bad = [i for i in conditioned if not 0 <= i < T_clip]
    if bad:
        raise ConfigError(f"conditioned frames {sorted(bad)} outside clip of {T_clip}")
    if len(conditioned) == T_clip:
        raise ConfigError("every frame is conditioned; nothing left to generate")
    data = np.zeros((T_clip, 1, h, w), dtype=dtype)
    for i in conditioned:
        data[i] = 1.0
    return FrameMask(data, conditioned)


def build_image_condition_latent(
    latents: Mapping[int, np.ndarray], T_clip: int, h: int | None = None, w: int | None = None, dtype=np.float32
) -> ImageConditionLatent:
    if latents:
        first = np.asarray(next(iter(latents.values())))
        h, w = first.shape[-2:]
    if h is None or w is None:
        raise ConfigError("latent extents unknown: pass h and w when no frames are conditioned")
    data = np.zeros((T_clip, 4, h, w), dtype=dtype)
    for i, z in latents.items():
        if not 0 <= i < T_clip:
            raise ConfigError(f"condition frame {i} outside clip of {T_clip}")
        z = np.asarray(z)
        if z.shape != (4, h, w):
            raise ShapeError(f"condition latent for frame {i} has shape {z.shape}, expected {(4, h, w)}")
        data[i] = z
    return ImageConditionLatent(data, frozenset(latents))


def build_conditions(latents: Mapping[int, np.ndarray], T_clip: int, h: int, w: int, dtype=np.float32):
    """Mask and condition latent for the same conditioned-frame set."""
    return (
        build_frame_mask(T_clip, latents.keys(), h, w, dtype),
        build_image_condition_latent(latents, T_clip, h, w, dtype),
    )


def assemble_model_input(x_t: np.ndarray, mask: FrameMask, cond: ImageConditionLatent) -> np.ndarray:
    m = mask.data if isinstance(mask, FrameMask) else np.asarray(mask)
    f = cond.data if isinstance(cond, ImageConditionLatent) else np.asarray(cond)
    x_t = np.asarray(x_t)
    if x_t.ndim != 4 or x_t.shape[1] != 4:
        raise ShapeError(f"noisy latent must be T x 4 x h x w, got {x_t.shape}")
    t_clip, _, h, w = x_t.shape
    if m.shape != (t_clip, 1, h, w) or f.shape != (t_clip, 4, h, w):
        raise ShapeError(f"condition shapes {m.shape}, {f.shape} do not match latent {x_t.shape}")
    return np.concatenate([x_t, m.astype(x_t.dtype, copy=False), f.astype(x_t.dtype, copy=False)], axis=1)


def split_model_input(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if x.shape[-3] != MODEL_CHANNELS:
        raise ShapeError(f"expected {MODEL_CHANNELS} channels, got {x.shape}")
    return x[..., 0:4, :, :], x[..., 4:5, :, :], x[..., 5:9, :, :]


def semantic_tokens(cond: SemanticCondition, model) -> Tensor:
    """Project a condition vector to ``n_tokens x d_model`` cross-attention tokens."""
    return model.tokens(np.asarray(cond.vector)[None])[0]


def drop_condition(cond: SemanticCondition, p_drop: float, rng: Rng) -> SemanticCondition:
    if not 0.0 <= p_drop < 1.0:
        raise ConfigError(f"p_drop must lie in [0, 1), got {p_drop}")
    # always consume one draw so the stream does not depend on p_drop
    if rng.random() < p_drop:
        return SemanticCondition.null(len(cond.vector))
    return cond


def cfg_combine(pred_uncond: Prediction, pred_cond: Prediction, g: GuidanceConfig) -> Prediction:
    if pred_uncond.kind != pred_cond.kind:
        raise ValueError(f"prediction kinds differ: {pred_uncond.kind} vs {pred_cond.kind}")
    u, c = np.asarray(pred_uncond.value), np.asarray(pred_cond.value)
    if u.shape != c.shape:
        raise ShapeError(f"prediction shapes differ: {u.shape} vs {c.shape}")
    if g.w == 1.0:
        out = c.copy()
    else:
        out = u + c.dtype.type(g.w) * (c - u)
    if g.rescale_phi is not None and out.ndim >= 2:
        axes = tuple(range(1, out.ndim))
        std_c = c.std(axis=axes, keepdims=True)
        std_o = out.std(axis=axes, keepdims=True)
        ratio = np.where(std_o > 0, std_c / np.where(std_o > 0, std_o, 1), 1.0)
        phi = g.rescale_phi
        out = (phi * (out * ratio) + (1 - phi) * out).astype(c.dtype, copy=False)
    return Prediction(pred_cond.kind, out)
