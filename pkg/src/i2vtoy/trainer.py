"""Two-stage training with v-prediction MSE and Adam.

Stage ``spatial_pretrain`` fits single frames (``T_clip = 1``) with the
temporal group frozen; stage ``temporal`` freezes the spatial group and
trains temporal, input-layer and cross-attention parameters on full clips.
"""

from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import metrics as M
from .conditioning import SemanticCondition, assemble_model_input, build_conditions, drop_condition
from .denoiser import Denoiser, DenoiserConfig, init_model
from .schedule import NoiseSchedule, make_schedule, q_sample, v_from
from .tensor import ConfigError, Rng, ShapeError, mse

log = logging.getLogger(__name__)

STAGES = ("spatial_pretrain", "temporal")
TRAINABLE = {
    "spatial_pretrain": ("spatial", "input_layer", "cross_attn"),
    "temporal": ("temporal", "input_layer", "cross_attn"),
}
ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


class MissingPretrainError(ConfigError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "temporal"
    steps: int = 2000
    batch_size: int = 4
    learning_rate: float = 1e-3
    p_drop: float = 0.1
    seed: int = 0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    zsnr: bool = True
    eval_every: int = 500
    eval_samples: int = 2
    eval_steps: int = 20
    p_predict: float = 0.3
    latent_scale: float = 4.0
    grad_clip: float | None = None  # reserved; clipping is not applied

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("steps, batch_size and eval_every must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0 <= self.p_drop < 1:
            raise ConfigError("p_drop must lie in [0, 1)")
        if self.grad_clip is not None:
            raise ConfigError("gradient clipping is reserved and not implemented")

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.T, self.beta_start, self.beta_end, self.zsnr)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


@dataclass
class TrainSample:
    x0: np.ndarray  # scaled latent clip, T x 4 x h x w
    conditioned: tuple[int, ...]
    condition: SemanticCondition


@dataclass
class TrainResult:
    model: Denoiser
    adam: AdamState
    losses: list[float]
    metrics_log: list[tuple]
    null_fraction: float
    spatial_hash_before: str
    spatial_hash_after: str


def adam_update(params: dict, grads: dict, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam; ``params`` maps names to arrays updated in place."""
    state.step += 1
    b1t = 1.0 - ADAM_BETA1 ** state.step
    b2t = 1.0 - ADAM_BETA2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * (g * g)
        m_hat = m / b1t
        v_hat = v / b2t
        p -= (lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)).astype(p.dtype, copy=False)


def training_step(
    model: Denoiser, batch: list[TrainSample], sched: NoiseSchedule, cfg: TrainConfig, rng: Rng,
    backward: bool = True,
):
    """Forward (+ backward) for one batch; returns ``(loss, n_null_conditions)``.

    Gradients accumulate on parameters that currently require grad.
    """
    if not batch:
        raise ConfigError("empty batch")
    frames, _, h, w = batch[0].x0.shape
    ts = rng.integers(1, sched.T + 1, size=len(batch))
    inputs, targets, vectors = [], [], []
    n_null = 0
    for i, item in enumerate(batch):
        if item.x0.shape != (frames, 4, h, w):
            raise ShapeError("batch clips must share a shape")
        item_rng = rng.derive(i)
        eps = item_rng.normal(item.x0.shape)
        t = int(ts[i])
        x_t = q_sample(item.x0, t, eps, sched)
        targets.append(v_from(item.x0, eps, t, sched).value)
        refs = {j: item.x0[j] for j in item.conditioned}
        mask, cond_latent = build_conditions(refs, frames, h, w)
        inputs.append(assemble_model_input(x_t, mask, cond_latent))
        cond = drop_condition(item.condition, cfg.p_drop, item_rng)
        n_null += cond.is_null
        vectors.append(cond.vector)
    tokens = model.tokens(np.stack(vectors))
    pred = model.forward(np.stack(inputs), ts, tokens)
    loss = mse(pred, np.stack(targets).astype(pred.dtype))
    if backward:
        loss.backward()
    return float(loss.data), n_null


def spatial_hash(model: Denoiser) -> str:
    h = hashlib.sha256()
    for name, p in model.named_parameters({"spatial"}):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def _sample_batch(dataset, cfg: TrainConfig, rng: Rng, model_cfg: DenoiserConfig) -> list[TrainSample]:
    idx = dataset.train_idx
    picks = rng.integers(0, len(idx), size=cfg.batch_size)
    batch = []
    for k, p in enumerate(picks):
        i = int(idx[p])
        clip = dataset.latents[i].astype(np.float32) * np.float32(cfg.latent_scale)
        cond = SemanticCondition(np.asarray(dataset.conditions[i], dtype=np.float32))
        if cfg.stage == "spatial_pretrain":
            f = int(rng.integers(0, clip.shape[0]))
            batch.append(TrainSample(clip[f:f + 1], (), cond))
            continue
        T_clip = clip.shape[0]
        if rng.random() < cfg.p_predict and T_clip > 2:
            L = int(rng.integers(2, T_clip))
            conditioned = tuple(range(L))
        else:
            conditioned = (0,)
        batch.append(TrainSample(clip, conditioned, cond))
    return batch


def evaluate_model(model: Denoiser, dataset, cfg: TrainConfig, n: int, K: int, seed: int = 1234):
    """Quick I2V evaluation on validation clips: (ssim, consistency, motion)."""
    from .sampler import SamplerConfig, sample_i2v

    sched = cfg.schedule()
    videos, refs = [], []
    val = dataset.val_idx if len(dataset.val_idx) else dataset.train_idx
    for j in range(min(n, len(val))):
        i = int(val[j])
        ref = dataset.frames[i][0]
        res = sample_i2v(
            model, sched, ref, SemanticCondition(dataset.conditions[i]), dataset.frames.shape[1],
            SamplerConfig(K=K, seed=seed + j), cfg.latent_scale,
        )
        videos.append(np.clip(res.frames, 0, 1))
        refs.append(ref)
    rep = M.evaluate(videos, refs)
    return rep.ssim_first_frame, rep.temporal_consistency, rep.motion_intensity


def train(
    cfg: TrainConfig,
    dataset,
    model: Denoiser | None = None,
    model_cfg: DenoiserConfig | None = None,
    adam: AdamState | None = None,
    start_step: int = 0,
    out_dir: str | Path | None = None,
    on_log=None,
) -> TrainResult:
    sched = cfg.schedule()
    if model is None:
        if cfg.stage == "temporal":
            raise MissingPretrainError(
                "stage 'temporal' trains only temporal and input layers on top of a frozen "
                "spatial network: supply a spatially pretrained model"
            )
        t_clip, H, W = dataset.shape
        model_cfg = model_cfg or DenoiserConfig(h=H // 2, w=W // 2, num_train_timesteps=cfg.T)
        model = init_model(model_cfg, Rng(cfg.seed, 0xD0))
    if model.cfg.num_train_timesteps != sched.T:
        raise ConfigError(f"model expects T={model.cfg.num_train_timesteps}, schedule has {sched.T}")
    model.set_trainable(TRAINABLE[cfg.stage])
    adam = adam or AdamState()
    trainable = dict(model.named_parameters(TRAINABLE[cfg.stage]))
    arrays = {k: p.data for k, p in trainable.items()}
    base = Rng(cfg.seed, STAGES.index(cfg.stage))
    hash_before = spatial_hash(model)
    losses: list[float] = []
    metrics_log: list[tuple] = []
    nulls = total = 0
    t0 = time.time()
    for step in range(start_step, cfg.steps):
        rng = base.derive(step)
        batch = _sample_batch(dataset, cfg, rng.derive(0), model.cfg)
        for p in trainable.values():
            p.grad = None
        loss, n_null = training_step(model, batch, sched, cfg, rng.derive(1))
        nulls += n_null
        total += len(batch)
        grads = {k: p.grad if p.grad is not None else np.zeros_like(p.data) for k, p in trainable.items()}
        adam_update(arrays, grads, adam, cfg.learning_rate)
        losses.append(loss)
        done = step + 1
        if done % cfg.eval_every == 0 or done == cfg.steps:
            recent = float(np.mean(losses[-min(len(losses), 100):]))
            row = (done, recent, float("nan"), float("nan"), float("nan"))
            if cfg.stage == "temporal" and cfg.eval_samples > 0:
                row = (done, recent, *evaluate_model(model, dataset, cfg, cfg.eval_samples, cfg.eval_steps))
            metrics_log.append(row)
            log.info("step %d loss %.4f (%.1fs)", done, recent, time.time() - t0)
            if on_log:
                on_log(row)
            if out_dir is not None:
                save_training_checkpoint(Path(out_dir) / f"{cfg.stage}_step{done:06d}.ckpt", model, adam, cfg, done)
    for p in model.params.values():
        p.grad = None
    hash_after = spatial_hash(model)
    return TrainResult(model, adam, losses, metrics_log, nulls / max(total, 1), hash_before, hash_after)


# -- checkpoints -------------------------------------------------------------

def checkpoint_arrays(model: Denoiser, adam: AdamState | None, cfg: TrainConfig, step: int) -> dict[str, np.ndarray]:
    sched = cfg.schedule()
    arrays = {f"model/{k}": v.data.astype(np.float32) for k, v in model.params.items()}
    if adam is not None:
        arrays.update({f"adam/m/{k}": v.astype(np.float32) for k, v in adam.m.items()})
        arrays.update({f"adam/v/{k}": v.astype(np.float32) for k, v in adam.v.items()})
        arrays["adam/step"] = np.array(adam.step, dtype=np.int64)
    arrays["meta/step"] = np.array(step, dtype=np.int64)
    arrays["meta/train_config"] = ckpt_io.json_array(asdict(cfg))
    arrays["meta/model_config"] = ckpt_io.json_array(model.cfg.to_dict())
    arrays["schedule/a"] = sched.a.astype(np.float32)
    arrays["schedule/s"] = sched.s.astype(np.float32)
    return arrays


def save_training_checkpoint(path, model: Denoiser, adam: AdamState | None, cfg: TrainConfig, step: int) -> None:
    ckpt_io.save_arrays(path, checkpoint_arrays(model, adam, cfg, step))


@dataclass
class LoadedCheckpoint:
    model: Denoiser
    adam: AdamState
    train_config: TrainConfig
    step: int


def load_training_checkpoint(path) -> LoadedCheckpoint:
    arrays = ckpt_io.load_arrays(path)
    try:
        model_cfg = DenoiserConfig(**ckpt_io.array_json(arrays["meta/model_config"]))
        train_cfg = TrainConfig(**ckpt_io.array_json(arrays["meta/train_config"]))
    except (KeyError, TypeError) as exc:
        raise ckpt_io.CheckpointError(f"checkpoint lacks a usable config echo: {exc}") from exc
    model = init_model(model_cfg, Rng(0))
    model.load_state_dict({k[len("model/"):]: v for k, v in arrays.items() if k.startswith("model/")})
    adam = AdamState(
        m={k[len("adam/m/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam/m/")},
        v={k[len("adam/v/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam/v/")},
        step=int(arrays.get("adam/step", 0)),
    )
    return LoadedCheckpoint(model, adam, train_cfg, int(arrays["meta/step"]))


def continue_from(loaded: LoadedCheckpoint, stage: str, **overrides) -> TrainConfig:
    """Training config for ``stage`` inheriting schedule/seed settings of a checkpoint."""
    return replace(loaded.train_config, stage=stage, **overrides)
