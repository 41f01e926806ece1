"""Procedural grayscale clips of a single bouncing square or disc."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import codec
from .conditioning import SemanticCondition
from .tensor import Rng, ShapeError

SHAPES = ("square", "disc")
RADIUS_RANGE = (0.1, 0.25)
INTENSITY_RANGE = (0.5, 1.0)
MAX_SPEED = 0.06  # fraction of width per frame


@dataclass(frozen=True)
class SceneSpec:
    shape_class: str
    center: tuple[float, float]
    velocity: tuple[float, float]
    radius: float
    intensity: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(d["shape_class"], tuple(d["center"]), tuple(d["velocity"]), float(d["radius"]), float(d["intensity"]))


def generate_scene(rng: Rng) -> SceneSpec:
    shape = SHAPES[int(rng.integers(0, 2))]
    radius = float(rng.uniform(*RADIUS_RANGE))
    # centres are drawn where the whole shape is visible
    cx, cy = (float(v) for v in rng.uniform(radius, 1.0 - radius, size=2))
    vx, vy = (float(v) for v in rng.uniform(-MAX_SPEED, MAX_SPEED, size=2))
    intensity = float(rng.uniform(*INTENSITY_RANGE))
    return SceneSpec(shape, (cx, cy), (vx, vy), radius, intensity)


def scene_condition(scene: SceneSpec) -> SemanticCondition:
    onehot = [1.0, 0.0] if scene.shape_class == "square" else [0.0, 1.0]
    vec = onehot + [
        scene.center[0], scene.center[1],
        scene.velocity[0] * 10, scene.velocity[1] * 10,
        scene.radius, scene.intensity,
    ]
    return SemanticCondition(np.asarray(vec, dtype=np.float32))


def _fold(u: float, lo: float, hi: float) -> float:
    """Elastic reflection of an unconstrained coordinate into ``[lo, hi]``."""
    span = hi - lo
    if span <= 0:
        return lo
    m = (u - lo) % (2 * span)
    return lo + (m if m <= span else 2 * span - m)


def position(scene: SceneSpec, k: int, H: int, W: int) -> tuple[float, float]:
    """Centre of frame ``k`` as fractions of (width, height)."""
    rx = scene.radius
    ry = scene.radius * W / H
    x = _fold(scene.center[0] + k * scene.velocity[0], rx, 1.0 - rx)
    y = _fold(scene.center[1] + k * scene.velocity[1], ry, 1.0 - ry)
    return x, y


def is_wall_free(scene: SceneSpec, T_clip: int, H: int, W: int) -> bool:
    rx, ry = scene.radius, scene.radius * W / H
    for k in range(T_clip):
        x = scene.center[0] + k * scene.velocity[0]
        y = scene.center[1] + k * scene.velocity[1]
        if not (rx <= x <= 1 - rx and ry <= y <= 1 - ry):
            return False
    return True


def render_frame(shape_class: str, cx_px: float, cy_px: float, r_px: float, intensity: float, H: int, W: int) -> np.ndarray:
    xs = np.arange(W, dtype=np.float64)
    ys = np.arange(H, dtype=np.float64)
    if shape_class == "square":
        # exact box-filter coverage of each unit pixel by the axis-aligned square
        cov_x = np.clip(np.minimum(xs + 1, cx_px + r_px) - np.maximum(xs, cx_px - r_px), 0, 1)
        cov_y = np.clip(np.minimum(ys + 1, cy_px + r_px) - np.maximum(ys, cy_px - r_px), 0, 1)
        cov = cov_y[:, None] * cov_x[None, :]
    else:
        dx = xs[None, :] + 0.5 - cx_px
        dy = ys[:, None] + 0.5 - cy_px
        cov = np.clip(r_px - np.sqrt(dx * dx + dy * dy) + 0.5, 0, 1)
    return (intensity * cov)[None].astype(np.float32)


def render_video(scene: SceneSpec, T_clip: int, H: int, W: int) -> np.ndarray:
    """``T x 1 x H x W`` frames in ``[0, 1]``."""
    if H % 2 or W % 2:
        raise ShapeError(f"frame extents must be even, got {H}x{W}")
    frames = []
    for k in range(T_clip):
        x, y = position(scene, k, H, W)
        frames.append(render_frame(scene.shape_class, x * W, y * H, scene.radius * W, scene.intensity, H, W))
    return np.stack(frames)


@dataclass
class ClipSample:
    frames: np.ndarray
    latents: np.ndarray
    condition: SemanticCondition
    scene: SceneSpec
    seed: int


class ToyDataset:
    """Deterministic collection of clips; clip ``i`` uses stream ``(seed, i)``."""

    def __init__(self, frames, latents, conditions, scenes, seed: int):
        self.frames = frames
        self.latents = latents
        self.conditions = conditions
        self.scenes = scenes
        self.seed = seed
        n = len(frames)
        n_train = int(round(n * 0.9))
        self.train_idx = np.arange(n_train)
        self.val_idx = np.arange(n_train, n)

    def __len__(self) -> int:
        return len(self.frames)

    def __getitem__(self, i: int) -> ClipSample:
        return ClipSample(self.frames[i], self.latents[i], SemanticCondition(self.conditions[i]), self.scenes[i], i)

    @property
    def shape(self) -> tuple[int, int, int]:
        _, t, _, h, w = self.frames.shape
        return t, h, w


def make_clip(seed: int, index: int, T_clip: int, H: int, W: int) -> ClipSample:
    scene = generate_scene(Rng(seed, index))
    frames = render_video(scene, T_clip, H, W)
    return ClipSample(frames, codec.encode_video(frames), scene_condition(scene), scene, index)


def make_dataset(n_clips: int, T_clip: int = 8, H: int = 32, W: int = 32, seed: int = 0) -> ToyDataset:
    clips = [make_clip(seed, i, T_clip, H, W) for i in range(n_clips)]
    return ToyDataset(
        np.stack([c.frames for c in clips]),
        np.stack([c.latents for c in clips]),
        np.stack([c.condition.vector for c in clips]),
        [c.scene for c in clips],
        seed,
    )
