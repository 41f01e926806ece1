"""Command-line entry point.

Exit codes: 0 success, 2 config/usage, 3 data/compat, 4 internal invariant violation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import codec, videoio
from .checkpoint import CheckpointError
from .conditioning import GuidanceConfig, SemanticCondition
from .config import RunConfig
from .experiments import held_out_clips, noisy_prior_ab
from .metrics import evaluate
from .sampler import SamplerConfig, generate_long_video, long_video_iterations, sample_i2v
from .tensor import ConfigError, ShapeError
from .toydata import SceneSpec, ToyDataset, make_clip, scene_condition
from .trainer import load_training_checkpoint, save_training_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 2, 3, 4

log = logging.getLogger("i2vtoy")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def workers() -> int:
    raw = os.environ.get("ATMV_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise CliError(f"ATMV_THREADS must be an integer, got {raw!r}", EXIT_USAGE) from None


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}") from None
    return h, w


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- dataset cache -----------------------------------------------------------

def _clip_name(i: int) -> str:
    return f"clip_{i:05d}"


def cmd_gen_data(args) -> int:
    H, W = args.size
    if H % 2 or W % 2 or H < 8 or W < 8:
        raise CliError(f"frame size must be even and >= 8, got {H}x{W}", EXIT_USAGE)
    if args.clips < 1 or args.frames < 2:
        raise CliError("need --clips >= 1 and --frames >= 2", EXIT_USAGE)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create {out}: {exc}", EXIT_USAGE) from exc

    def one(i: int) -> str:
        clip = make_clip(args.seed, i, args.frames, H, W)
        videoio.write_video(out / _clip_name(i), clip.frames, seed=args.seed, index=i, scene=clip.scene.to_dict())
        return _clip_name(i)

    with ThreadPoolExecutor(max_workers=workers()) as pool:
        names = list(pool.map(one, range(args.clips)))
    manifest = {
        "generator_version": videoio.GENERATOR_VERSION,
        "seed": args.seed,
        "n_clips": args.clips,
        "T_clip": args.frames,
        "size": [H, W],
        "clips": names,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(names)} clips to {out}")
    return EXIT_OK


def load_dataset_dir(path) -> ToyDataset:
    root = Path(path)
    top = videoio.read_manifest(root)
    if not top.get("clips"):
        raise CliError(f"{root}: not a dataset directory (manifest.json with clips missing)", EXIT_DATA)
    frames, scenes = [], []
    for name in top["clips"]:
        video, man = videoio.read_video(root / name)
        frames.append(video)
        scenes.append(SceneSpec.from_dict(man["scene"]))
    frames = np.stack(frames)
    latents = np.stack([codec.encode_video(v) for v in frames])
    conditions = np.stack([scene_condition(s).vector for s in scenes])
    return ToyDataset(frames, latents, conditions, scenes, int(top.get("seed", 0)))


# -- training ----------------------------------------------------------------

def cmd_train(args) -> int:
    run = RunConfig.load(args.config) if args.config else RunConfig()
    tcfg = run.stage(args.stage)
    if args.steps is not None:
        tcfg = replace(tcfg, steps=args.steps)
    d = run.dataset
    if args.data:
        dataset = load_dataset_dir(args.data)
    else:
        from .toydata import make_dataset
        dataset = make_dataset(d.n_clips, d.T_clip, d.H, d.W, d.seed)

    model = adam = None
    start = 0
    for path, resume in ((args.init_from, False), (args.resume, True)):
        if not path:
            continue
        loaded = load_training_checkpoint(path)
        model = loaded.model
        if resume and loaded.train_config.stage == tcfg.stage:
            adam, start = loaded.adam, loaded.step
        else:
            adam, start = None, 0
    if model is not None:
        t, H, W = dataset.shape
        if (model.cfg.h, model.cfg.w) != (H // 2, W // 2) or t > model.cfg.T_clip_max:
            raise CliError("checkpoint model does not fit the dataset clip shape", EXIT_DATA)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = train(tcfg, dataset, model=model, model_cfg=run.model, adam=adam, start_step=start, out_dir=out)
    save_training_checkpoint(out / f"{tcfg.stage}.ckpt", res.model, res.adam, tcfg, max(start, tcfg.steps))
    lines = ["step\tloss\tssim_first_frame\ttemporal_consistency\tmotion_intensity"]
    lines += ["\t".join([str(r[0])] + [f"{v:.6f}" for v in r[1:]]) for r in res.metrics_log]
    (out / f"{tcfg.stage}_metrics.tsv").write_text("\n".join(lines) + "\n")
    unchanged = res.spatial_hash_before == res.spatial_hash_after
    print(f"freeze check: spatial hash {res.spatial_hash_after[:16]} "
          f"{'unchanged' if unchanged else 'CHANGED'} during stage {tcfg.stage}")
    if tcfg.stage == "temporal" and not unchanged:
        raise CliError("spatial parameters changed during the temporal stage", EXIT_INTERNAL)
    return EXIT_OK


# -- sampling ----------------------------------------------------------------

def _load_model(path):
    try:
        loaded = load_training_checkpoint(path)
    except (CheckpointError, OSError) as exc:
        raise CliError(f"cannot load checkpoint {path}: {exc}", EXIT_DATA) from exc
    tc = loaded.train_config
    return loaded.model, tc.schedule(), tc.latent_scale


def _condition_for(args, near: Path, width: int) -> SemanticCondition:
    if args.condition:
        vec = np.array([float(v) for v in args.condition.split(",")], dtype=np.float32)
        if vec.shape != (width,):
            raise CliError(f"--condition needs {width} values, got {vec.size}", EXIT_USAGE)
        return SemanticCondition(vec)
    man = videoio.read_manifest(near)
    if "scene" in man:
        return scene_condition(SceneSpec.from_dict(man["scene"]))
    return SemanticCondition.null(width)


def _sampler_config(args) -> SamplerConfig:
    return SamplerConfig(
        K=args.steps, eta=args.eta, guidance=GuidanceConfig(w=args.cfg), seed=args.seed,
        latent_replacement=args.latent_replacement, noisy_prior=getattr(args, "noisy_prior", None),
        prior_schedule=getattr(args, "prior_schedule", "linear"),
    )


def _check_fit(model, H: int, W: int, frames: int):
    if (H, W) != (2 * model.cfg.h, 2 * model.cfg.w):
        raise CliError(f"frames are {H}x{W} but the checkpoint expects {2 * model.cfg.h}x{2 * model.cfg.w}", EXIT_DATA)
    if frames > model.cfg.T_clip_max:
        raise CliError(f"{frames} frames exceed the checkpoint's T_clip_max={model.cfg.T_clip_max}", EXIT_DATA)


def _run_sampler(fn):
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        result = fn()
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    return result


def cmd_sample(args) -> int:
    model, sched, scale = _load_model(args.ckpt)
    image = videoio.read_pgm(args.image)
    _check_fit(model, image.shape[-2], image.shape[-1], args.frames)
    cond = _condition_for(args, Path(args.image).parent, model.cfg.semantic_width)
    scfg = _sampler_config(args)
    res = _run_sampler(lambda: sample_i2v(model, sched, image, cond, args.frames, scfg, scale))
    videoio.write_video(
        args.out, res.frames, seed=args.seed, initial_noise_seed=args.seed, sampler=asdict(scfg),
        T_clip=args.frames, checkpoint_sha256=_sha256(args.ckpt), image_sha256=_sha256(args.image),
        condition=[float(v) for v in cond.vector], condition_is_null=bool(cond.is_null),
    )
    print(f"wrote {args.frames} frames to {args.out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model, sched, scale = _load_model(args.ckpt)
    video, man = videoio.read_video(args.video)
    L = args.context
    if len(video) < L:
        raise CliError(f"input video has {len(video)} frames, context needs {L}", EXIT_USAGE)
    if not 1 <= L < args.frames:
        raise CliError(f"context L={L} must satisfy 1 <= L < T_clip={args.frames}", EXIT_USAGE)
    _check_fit(model, video.shape[-2], video.shape[-1], args.frames)
    cond = _condition_for(args, Path(args.video), model.cfg.semantic_width)
    scfg = _sampler_config(args)
    ctx = [codec.encode(f) for f in video[:L]]
    res = _run_sampler(lambda: generate_long_video(
        model, sched, None, cond, args.total, args.frames, L, scfg, scale, context=ctx))
    videoio.write_video(
        args.out, res.frames, seed=args.seed, sampler=asdict(scfg), T_clip=args.frames, context=L,
        total=args.total, iterations=long_video_iterations(args.total, args.frames, L),
        checkpoint_sha256=_sha256(args.ckpt), condition=[float(v) for v in cond.vector],
    )
    print(f"wrote {len(res.frames)} frames to {args.out}")
    return EXIT_OK


# -- evaluation --------------------------------------------------------------

def _video_dirs(root: Path) -> list[Path]:
    return sorted(p for p in root.iterdir() if p.is_dir() and any(p.glob("frame_*.pgm")))


def _write_report(prefix, report) -> None:
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{prefix}.tsv").write_text(report.to_tsv())
    Path(f"{prefix}.json").write_text(report.to_json())


def cmd_eval(args) -> int:
    gen_root, ref_root = Path(args.generated), Path(args.references)
    gen_dirs = _video_dirs(gen_root)
    ref_dirs = _video_dirs(ref_root)
    ref_files = sorted(ref_root.glob("*.pgm"))
    refs_are_files = not ref_dirs and bool(ref_files)
    n_ref = len(ref_files) if refs_are_files else len(ref_dirs)
    if not gen_dirs:
        raise CliError(f"{gen_root}: no generated videos found", EXIT_USAGE)
    if len(gen_dirs) != n_ref:
        raise CliError(f"{len(gen_dirs)} generated videos but {n_ref} references", EXIT_USAGE)
    with ThreadPoolExecutor(max_workers=workers()) as pool:
        videos = list(pool.map(lambda p: videoio.read_video(p)[0], gen_dirs))
        if refs_are_files:
            refs = list(pool.map(videoio.read_pgm, ref_files))
        else:
            refs = list(pool.map(lambda p: videoio.read_video(p)[0][0], ref_dirs))
    report = evaluate(videos, refs, names=[p.name for p in gen_dirs])
    _write_report(args.out, report)
    print(report.to_tsv(), end="")
    return EXIT_OK


def cmd_ab(args) -> int:
    model, sched, scale = _load_model(args.ckpt)
    H, W = 2 * model.cfg.h, 2 * model.cfg.w
    _check_fit(model, H, W, args.frames)
    clips = held_out_clips(args.seeds, args.frames, H, W, args.data_seed)
    scfg = _sampler_config(args)
    res = _run_sampler(lambda: noisy_prior_ab(model, sched, clips, scfg, scale, args.strength))
    summary = {**res.summary(), "strength": args.strength, "sampler": asdict(scfg)}
    text = json.dumps(summary, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def _sampling_args(p, default_frames: int = 8):
    p.add_argument("--ckpt", required=True)
    p.add_argument("--frames", type=int, default=default_frames, help="clip length T_clip")
    p.add_argument("--steps", type=int, default=50, help="DDIM steps K")
    p.add_argument("--cfg", type=float, default=1.0, help="guidance scale w")
    p.add_argument("--eta", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--latent-replacement", action="store_true")
    p.add_argument("--condition", help="comma-separated semantic vector; default: scene from manifest, else null")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="i2vtoy", description="Toy image-to-video diffusion")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the toy dataset to PGM videos")
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int, default=4096)
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--size", type=_size, default=(32, 32))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--config")
    p.add_argument("--stage", choices=("spatial", "temporal"), required=True)
    p.add_argument("--resume", help="checkpoint to continue from (same stage) or to start the temporal stage from")
    p.add_argument("--init-from", help="spatially pretrained checkpoint for the temporal stage")
    p.add_argument("--data", help="dataset directory from gen-data; default: generate from the config")
    p.add_argument("--steps", type=int, help="override the stage's step count")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="image-to-video sampling")
    _sampling_args(p)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--noisy-prior", type=float, help="noisy-prior baseline strength in [0, 1]")
    p.add_argument("--prior-schedule", choices=("linear", "model"), default="linear",
                   help="schedule whose terminal coefficients build the noisy prior")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("predict", help="long video by iterative frame prediction")
    _sampling_args(p)
    p.add_argument("--video", required=True)
    p.add_argument("--context", type=int, required=True, help="context / overlap length L")
    p.add_argument("--total", type=int, required=True, help="output length N")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("eval", help="score generated videos against reference frames")
    p.add_argument("--generated", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--out", required=True, help="report path prefix; writes .tsv and .json")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ab", help="noisy-prior vs. pure-noise motion experiment")
    _sampling_args(p)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--strength", type=float, default=1.0)
    p.add_argument("--prior-schedule", choices=("linear", "model"), default="linear")
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_ab)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, videoio.VideoFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
