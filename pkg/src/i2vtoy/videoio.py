"""Video-on-disk format: ``frame_%04d.pgm`` (binary P5, maxval 255) + ``manifest.json``."""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

GENERATOR_VERSION = "i2vtoy-video/1"
FRAME_NAME = "frame_{:04d}.pgm"


class VideoFormatError(ValueError):
    pass


def quantize(frame: np.ndarray) -> np.ndarray:
    """``clamp(round(v * 255))`` with round-half-up."""
    return np.clip(np.floor(np.asarray(frame, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_pgm(path, frame: np.ndarray) -> None:
    plane = np.asarray(frame)
    if plane.ndim == 3:
        plane = plane[0]
    pix = quantize(plane)
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())


_HEADER = re.compile(rb"\AP5\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def read_pgm(path) -> np.ndarray:
    """Read a P5 PGM as a ``1 x H x W`` float32 frame in ``[0, 1]``."""
    blob = Path(path).read_bytes()
    m = _HEADER.match(blob)
    if not m:
        raise VideoFormatError(f"{path}: not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise VideoFormatError(f"{path}: maxval {maxval} unsupported")
    data = blob[m.end():]
    if len(data) < w * h:
        raise VideoFormatError(f"{path}: truncated pixel data")
    pix = np.frombuffer(data[: w * h], dtype=np.uint8).reshape(h, w)
    return (pix.astype(np.float32) / np.float32(255.0))[None]


def write_video(directory, frames, **manifest) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    frames = np.asarray(frames)
    for old in d.glob("frame_*.pgm"):
        old.unlink()
    for i, f in enumerate(frames):
        write_pgm(d / FRAME_NAME.format(i), f)
    doc = {
        "frame_count": int(len(frames)),
        "size": [int(frames.shape[-2]), int(frames.shape[-1])],
        "generator_version": GENERATOR_VERSION,
        **manifest,
    }
    (d / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return d


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.exists():
        return {}
    return json.loads(path.read_text())


def read_video(directory) -> tuple[np.ndarray, dict]:
    d = Path(directory)
    manifest = read_manifest(d)
    paths = sorted(d.glob("frame_*.pgm"))
    if not paths:
        raise VideoFormatError(f"{d}: no frames")
    if manifest and manifest.get("frame_count") != len(paths):
        raise VideoFormatError(f"{d}: manifest lists {manifest.get('frame_count')} frames, found {len(paths)}")
    return np.stack([read_pgm(p) for p in paths]), manifest
