"""First-frame SSIM, adjacent-frame consistency and block-matching motion.

All three work on frames in pixel space (``1 x H x W`` or ``H x W``, range
``[0, 1]``).  Motion is reported in pixels per frame at frame resolution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError

SSIM_WINDOW = 7
SSIM_SIGMA = 1.5
BLOCK = 8
SEARCH_RADIUS = 4


def _plane(f) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if f.ndim == 3 and f.shape[0] == 1:
        f = f[0]
    if f.ndim != 2:
        raise ShapeError(f"expected a single-channel frame, got {f.shape}")
    return f


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = len(g)
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=1) @ g
    return np.lib.stride_tricks.sliding_window_view(rows, k, axis=0) @ g


def ssim(a, b, data_range: float = 1.0) -> float:
    a, b = _plane(a), _plane(b)
    if a.shape != b.shape:
        raise ShapeError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if min(a.shape) < SSIM_WINDOW:
        raise ShapeError(f"frames smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    g = gaussian_window()
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def temporal_consistency(video) -> float:
    """Mean cosine similarity of adjacent mean-subtracted frames."""
    frames = [_plane(f) for f in video]
    if len(frames) < 2:
        raise ShapeError("temporal consistency needs at least 2 frames")
    sims = []
    for f, g in zip(frames[:-1], frames[1:]):
        fc, gc = f - f.mean(), g - g.mean()
        nf, ng = np.linalg.norm(fc), np.linalg.norm(gc)
        if nf < 1e-12 or ng < 1e-12:
            both_const = nf < 1e-12 and ng < 1e-12
            sims.append(1.0 if both_const and np.allclose(f, g, rtol=0, atol=1e-12) else 0.0)
        else:
            sims.append(float(np.dot(fc.ravel(), gc.ravel()) / (nf * ng)))
    return float(np.mean(sims))


def _block_flow(f: np.ndarray, g: np.ndarray, block: int, radius: int):
    """Integer displacement and variance weight per block of ``f`` into ``g``."""
    H, W = f.shape
    nby, nbx = H // block, W // block
    f = f[: nby * block, : nbx * block]
    gp = np.pad(g, radius, constant_values=np.nan)
    best_cost = np.full((nby, nbx), np.inf)
    best_mag = np.zeros((nby, nbx))
    # search order: increasing |d| so ties resolve toward the smallest displacement
    offsets = sorted(
        ((dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)),
        key=lambda d: (d[0] ** 2 + d[1] ** 2, d),
    )
    min_valid = block * block // 2
    for dy, dx in offsets:
        shifted = gp[radius + dy: radius + dy + nby * block, radius + dx: radius + dx + nbx * block]
        diff2 = (f - shifted) ** 2
        blocks = diff2.reshape(nby, block, nbx, block).transpose(0, 2, 1, 3).reshape(nby, nbx, -1)
        valid = np.isfinite(blocks)
        count = valid.sum(axis=-1)
        cost = np.where(valid, blocks, 0.0).sum(axis=-1) / np.maximum(count, 1)
        cost = np.where(count >= min_valid, cost, np.inf)
        better = cost < best_cost - 1e-12
        best_cost = np.where(better, cost, best_cost)
        best_mag = np.where(better, np.hypot(dy, dx), best_mag)
    weights = f.reshape(nby, block, nbx, block).transpose(0, 2, 1, 3).reshape(nby, nbx, -1).var(axis=-1)
    return best_mag, weights


def motion_intensity(video, block: int = BLOCK, radius: int = SEARCH_RADIUS) -> float:
    """Mean variance-weighted block displacement magnitude over adjacent pairs."""
    frames = [_plane(f) for f in video]
    if len(frames) < 2:
        raise ShapeError("motion intensity needs at least 2 frames")
    per_pair = []
    for f, g in zip(frames[:-1], frames[1:]):
        mag, wts = _block_flow(f, g, block, radius)
        total = wts.sum()
        per_pair.append(float((mag * wts).sum() / total) if total > 1e-12 else 0.0)
    return float(np.mean(per_pair))


@dataclass
class MetricsReport:
    ssim_first_frame: float
    temporal_consistency: float
    motion_intensity: float
    n_videos: int
    rows: list[dict] = field(default_factory=list)

    HEADER = "# motion_intensity in pixels/frame at frame resolution; temporal_consistency is a pixel-cosine proxy"

    def to_tsv(self) -> str:
        lines = [self.HEADER, "video\tssim_first_frame\ttemporal_consistency\tmotion_intensity"]
        for r in self.rows:
            lines.append(f"{r['video']}\t{r['ssim_first_frame']:.6f}\t{r['temporal_consistency']:.6f}\t{r['motion_intensity']:.6f}")
        lines.append(
            f"mean\t{self.ssim_first_frame:.6f}\t{self.temporal_consistency:.6f}\t{self.motion_intensity:.6f}"
        )
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        doc = {
            "units": {"motion_intensity": "pixels/frame at frame resolution"},
            "n_videos": self.n_videos,
            "mean": {
                "ssim_first_frame": self.ssim_first_frame,
                "temporal_consistency": self.temporal_consistency,
                "motion_intensity": self.motion_intensity,
            },
            "videos": self.rows,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def evaluate(generated, references, names=None) -> MetricsReport:
    generated = list(generated)
    references = list(references)
    if len(generated) != len(references):
        raise ValueError(f"{len(generated)} videos but {len(references)} reference frames")
    if not generated:
        raise ValueError("nothing to evaluate")
    names = list(names) if names is not None else [f"{i:04d}" for i in range(len(generated))]
    rows = []
    for name, video, ref in zip(names, generated, references):
        rows.append({
            "video": name,
            "ssim_first_frame": ssim(video[0], ref),
            "temporal_consistency": temporal_consistency(video),
            "motion_intensity": motion_intensity(video),
        })
    return MetricsReport(
        ssim_first_frame=float(np.mean([r["ssim_first_frame"] for r in rows])),
        temporal_consistency=float(np.mean([r["temporal_consistency"] for r in rows])),
        motion_intensity=float(np.mean([r["motion_intensity"] for r in rows])),
        n_videos=len(rows),
        rows=rows,
    )
