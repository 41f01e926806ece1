"""Single-level orthonormal Haar codec: 1xHxW frame <-> 4x(H/2)x(W/2) latent.

Latent channels are ordered ``[LL, LH, HL, HH]``.  For a 2x2 block
``(a, b; c, d)``::

    LL = (a + b + c + d) / 2      LH = (a - b + c - d) / 2
    HL = (a + b - c - d) / 2      HH = (a - b - c + d) / 2

The transform is its own inverse up to block re-assembly, so decoding is
exact and the l2 norm is preserved.
"""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError


def _check_frame(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame)
    if frame.ndim == 2:
        frame = frame[None]
    if frame.ndim != 3 or frame.shape[0] != 1:
        raise ShapeError(f"frame must be 1xHxW, got {frame.shape}")
    h, w = frame.shape[1:]
    if h % 2 or w % 2:
        raise ShapeError(f"frame extents must be even, got {h}x{w}")
    return frame


def encode(frame: np.ndarray) -> np.ndarray:
    f = _check_frame(frame)[0]
    a = f[0::2, 0::2]
    b = f[0::2, 1::2]
    c = f[1::2, 0::2]
    d = f[1::2, 1::2]
    return np.stack(
        [(a + b + c + d) / 2, (a - b + c - d) / 2, (a + b - c - d) / 2, (a - b - c + d) / 2]
    ).astype(f.dtype, copy=False)


def decode(latent: np.ndarray) -> np.ndarray:
    z = np.asarray(latent)
    if z.ndim != 3 or z.shape[0] != 4:
        raise ShapeError(f"latent must be 4xhxw, got {z.shape}")
    ll, lh, hl, hh = z
    h, w = z.shape[1:]
    out = np.empty((1, 2 * h, 2 * w), dtype=z.dtype)
    out[0, 0::2, 0::2] = (ll + lh + hl + hh) / 2
    out[0, 0::2, 1::2] = (ll - lh + hl - hh) / 2
    out[0, 1::2, 0::2] = (ll + lh - hl - hh) / 2
    out[0, 1::2, 1::2] = (ll - lh - hl + hh) / 2
    return out


def encode_video(frames) -> np.ndarray:
    """Encode a sequence of frames into a ``T x 4 x h x w`` latent clip."""
    return np.stack([encode(f) for f in frames])


def decode_video(latents: np.ndarray) -> np.ndarray:
    """Decode a ``T x 4 x h x w`` latent clip into ``T x 1 x H x W`` frames."""
    return np.stack([decode(z) for z in latents])
