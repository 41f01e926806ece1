"""Toy spatio-temporal v-prediction network.

Layout (per clip of ``T`` frames, latent ``4 x h x w``)::

    9-ch input conv                              input_layer
    repeat n_res_blocks:
        residual conv block + timestep embedding spatial
        cross-attention to semantic tokens       cross_attn
        1-D temporal conv, temporal attention    temporal
    norm -> SiLU -> 3x3 conv to 4 channels       spatial

Parameter names follow ``group/layer/role``; the first path component is the
parameter group used for freezing.  Every cross-attention, temporal conv and
temporal attention branch ends in a zero-initialised projection, so a freshly
added temporal stack leaves the spatial network's output untouched.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tc
from .tensor import ConfigError, Rng, ShapeError, Tensor

GROUPS = ("spatial", "temporal", "input_layer", "cross_attn")
NORM_GROUPS = 8


@dataclass(frozen=True)
class DenoiserConfig:
    base_channels: int = 32
    n_res_blocks: int = 2
    n_tokens: int = 4
    d_model: int = 32
    time_embed_dim: int = 64
    T_clip_max: int = 24
    h: int = 16
    w: int = 16
    semantic_width: int = 8
    n_heads: int = 1
    num_train_timesteps: int = 1000
    frame_pos_encoding: bool = True
    temporal_layers: bool = True
    dtype: str = "float32"

    def validate(self) -> None:
        for name in ("base_channels", "n_res_blocks", "n_tokens", "d_model", "time_embed_dim",
                     "T_clip_max", "h", "w", "semantic_width", "n_heads", "num_train_timesteps"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads or self.base_channels % self.n_heads:
            raise ConfigError("attention width not divisible by head count")
        if self.n_heads != 1:
            raise ConfigError("only single-head attention is implemented")
        if self.base_channels % NORM_GROUPS and self.base_channels >= NORM_GROUPS:
            raise ConfigError(f"base_channels must be a multiple of {NORM_GROUPS}")
        if self.time_embed_dim % 2:
            raise ConfigError("time_embed_dim must be even")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype}")

    @property
    def norm_groups(self) -> int:
        return min(NORM_GROUPS, self.base_channels)

    def to_dict(self) -> dict:
        return asdict(self)


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Interleaved ``[sin(f0 t), cos(f0 t), sin(f1 t), ...]`` with geometric ``f``.

    ``t`` may be a scalar or a 1-D array; the result has a trailing ``dim`` axis.
    """
    if dim % 2:
        raise ConfigError(f"embedding dim must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[..., None] * freqs
    out = np.empty(t.shape + (dim,), dtype=np.float64)
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def param_shapes(cfg: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape table for every parameter; the topology lives here."""
    C, E, D = cfg.base_channels, cfg.time_embed_dim, cfg.d_model
    shapes: dict[str, tuple[int, ...]] = {
        "input_layer/conv_in/weight": (C, 9, 3, 3),
        "input_layer/conv_in/bias": (C,),
        "spatial/time_fc1/weight": (E, E),
        "spatial/time_fc1/bias": (E,),
        "spatial/time_fc2/weight": (E, E),
        "spatial/time_fc2/bias": (E,),
        "cross_attn/token_proj/weight": (cfg.semantic_width, cfg.n_tokens * D),
        "cross_attn/token_proj/bias": (cfg.n_tokens * D,),
    }
    for i in range(cfg.n_res_blocks):
        b = f"block{i}"
        shapes.update({
            f"spatial/{b}.norm1/gamma": (C,),
            f"spatial/{b}.norm1/beta": (C,),
            f"spatial/{b}.conv1/weight": (C, C, 3, 3),
            f"spatial/{b}.conv1/bias": (C,),
            f"spatial/{b}.time_proj/weight": (E, C),
            f"spatial/{b}.time_proj/bias": (C,),
            f"spatial/{b}.norm2/gamma": (C,),
            f"spatial/{b}.norm2/beta": (C,),
            f"spatial/{b}.conv2/weight": (C, C, 3, 3),
            f"spatial/{b}.conv2/bias": (C,),
            f"cross_attn/{b}.norm/gamma": (C,),
            f"cross_attn/{b}.norm/beta": (C,),
            f"cross_attn/{b}.q/weight": (C, C),
            f"cross_attn/{b}.k/weight": (D, C),
            f"cross_attn/{b}.v/weight": (D, C),
            f"cross_attn/{b}.out/weight": (C, C),
            f"cross_attn/{b}.out/bias": (C,),
        })
        if cfg.temporal_layers:
            shapes.update({
                f"temporal/{b}.tconv_norm/gamma": (C,),
                f"temporal/{b}.tconv_norm/beta": (C,),
                f"temporal/{b}.tconv/weight": (C, C, 3, 1),
                f"temporal/{b}.tconv/bias": (C,),
                f"temporal/{b}.tattn_norm/gamma": (C,),
                f"temporal/{b}.tattn_norm/beta": (C,),
                f"temporal/{b}.q/weight": (C, C),
                f"temporal/{b}.k/weight": (C, C),
                f"temporal/{b}.v/weight": (C, C),
                f"temporal/{b}.out/weight": (C, C),
                f"temporal/{b}.out/bias": (C,),
            })
            if cfg.frame_pos_encoding:
                shapes[f"temporal/{b}.frame_pos/embedding"] = (cfg.T_clip_max, C)
    shapes.update({
        "spatial/norm_out/gamma": (C,),
        "spatial/norm_out/beta": (C,),
        "spatial/conv_out/weight": (4, C, 3, 3),
        "spatial/conv_out/bias": (4,),
    })
    return shapes


def _init_value(name: str, shape: tuple[int, ...], rng: Rng) -> np.ndarray:
    role = name.rsplit("/", 1)[1]
    layer = name.split("/")[1]
    if role == "gamma":
        return np.ones(shape)
    if role in ("beta", "bias"):
        return np.zeros(shape)
    if role == "embedding":
        return rng.normal(shape, np.float64) * 0.1
    if layer == "conv_out":
        return rng.normal(shape, np.float64) * 1e-6
    if layer.endswith(".out") or layer.endswith(".tconv"):
        return np.zeros(shape)
    if layer == "conv_in":
        w = rng.normal(shape, np.float64) * math.sqrt(2.0 / (4 * 9))
        w[:, 4:] = rng.normal((shape[0], 5) + shape[2:], np.float64) * 1e-6
        return w
    if len(shape) == 4:
        fan_in = shape[1] * shape[2] * shape[3]
        return rng.normal(shape, np.float64) * math.sqrt(2.0 / fan_in)
    return rng.normal(shape, np.float64) / math.sqrt(shape[0])


class Denoiser:
    def __init__(self, cfg: DenoiserConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params

    # -- parameter bookkeeping ---------------------------------------------
    def named_parameters(self, groups=None):
        for name in sorted(self.params):
            if groups is None or name.split("/", 1)[0] in groups:
                yield name, self.params[name]

    def parameters(self, groups=None) -> list[Tensor]:
        return [p for _, p in self.named_parameters(groups)]

    def group_of(self, name: str) -> str:
        return name.split("/", 1)[0]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise ShapeError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ShapeError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=self.params[k].dtype, copy=True)

    def set_trainable(self, groups) -> None:
        groups = set(groups)
        for name, p in self.params.items():
            p.requires_grad = self.group_of(name) in groups
            p.grad = None

    # -- forward pieces ----------------------------------------------------
    def p(self, name: str) -> Tensor:
        return self.params[name]

    def tokens(self, vectors: np.ndarray) -> Tensor:
        """Semantic condition vectors ``[B, width]`` -> tokens ``[B, n_tokens, d_model]``."""
        vectors = np.asarray(vectors, dtype=self.cfg.dtype)
        if vectors.ndim != 2 or vectors.shape[1] != self.cfg.semantic_width:
            raise ShapeError(f"condition width {vectors.shape[-1]} != {self.cfg.semantic_width}")
        b = vectors.shape[0]
        w, bias = self.p("cross_attn/token_proj/weight"), self.p("cross_attn/token_proj/bias")
        out = Tensor(vectors) @ w + bias.reshape(1, -1)
        return out.reshape(b, self.cfg.n_tokens, self.cfg.d_model)

    def _time_features(self, t: np.ndarray) -> Tensor:
        emb = Tensor(timestep_embedding(t, self.cfg.time_embed_dim).astype(self.cfg.dtype))
        h = tc.silu(emb @ self.p("spatial/time_fc1/weight") + self.p("spatial/time_fc1/bias").reshape(1, -1))
        h = h @ self.p("spatial/time_fc2/weight") + self.p("spatial/time_fc2/bias").reshape(1, -1)
        return tc.silu(h)

    def _conv(self, x: Tensor, name: str) -> Tensor:
        w, b = self.p(f"{name}/weight"), self.p(f"{name}/bias")
        return tc.conv2d(x, w) + b.reshape(1, -1, 1, 1)

    def _res_block(self, x: Tensor, temb: Tensor, i: int, frames: int) -> Tensor:
        b = f"spatial/block{i}"
        g = self.cfg.norm_groups
        h = tc.silu(tc.group_norm(x, g, self.p(f"{b}.norm1/gamma"), self.p(f"{b}.norm1/beta")))
        h = self._conv(h, f"{b}.conv1")
        tp = temb @ self.p(f"{b}.time_proj/weight") + self.p(f"{b}.time_proj/bias").reshape(1, -1)
        tp = tc.repeat(tp, frames, axis=0)  # [B*T, C]
        h = h + tp.reshape(tp.shape[0], tp.shape[1], 1, 1)
        h = tc.silu(tc.group_norm(h, g, self.p(f"{b}.norm2/gamma"), self.p(f"{b}.norm2/beta")))
        h = self._conv(h, f"{b}.conv2")
        return x + h

    def cross_attention(self, x: Tensor, tokens: Tensor, i: int) -> Tensor:
        """Residual cross-attention of ``[B*T, C, h, w]`` features to ``[B, n, d]`` tokens."""
        b = f"cross_attn/block{i}"
        n_bt, c, hh, ww = x.shape
        bsz = tokens.shape[0]
        if tokens.shape[-1] != self.cfg.d_model:
            raise ShapeError(f"token width {tokens.shape[-1]} != d_model {self.cfg.d_model}")
        frames = n_bt // bsz
        seq = x.reshape(bsz, frames, c, hh * ww).transpose(0, 1, 3, 2).reshape(bsz, frames * hh * ww, c)
        hn = tc.layer_norm(seq, self.p(f"{b}.norm/gamma"), self.p(f"{b}.norm/beta"))
        q = hn @ self.p(f"{b}.q/weight")
        k = tokens @ self.p(f"{b}.k/weight")
        v = tokens @ self.p(f"{b}.v/weight")
        att = tc.softmax((q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(c)), axis=-1)
        o = (att @ v) @ self.p(f"{b}.out/weight") + self.p(f"{b}.out/bias").reshape(1, 1, c)
        o = o.reshape(bsz, frames, hh * ww, c).transpose(0, 1, 3, 2).reshape(n_bt, c, hh, ww)
        return x + o

    def temporal_conv(self, x: Tensor, i: int, frames: int) -> Tensor:
        b = f"temporal/block{i}"
        n_bt, c, hh, ww = x.shape
        bsz = n_bt // frames
        h = tc.group_norm(x, self.cfg.norm_groups, self.p(f"{b}.tconv_norm/gamma"), self.p(f"{b}.tconv_norm/beta"))
        h = h.reshape(bsz, frames, c, hh * ww).transpose(0, 2, 1, 3)  # [B, C, T, hw]
        h = self._conv(h, f"{b}.tconv")
        h = h.transpose(0, 2, 1, 3).reshape(n_bt, c, hh, ww)
        return x + h

    def temporal_attention(self, x: Tensor, i: int, frames: int) -> Tensor:
        """Residual self-attention across frames at every spatial location."""
        if frames > self.cfg.T_clip_max:
            raise ShapeError(f"clip of {frames} frames exceeds T_clip_max={self.cfg.T_clip_max}")
        b = f"temporal/block{i}"
        n_bt, c, hh, ww = x.shape
        bsz = n_bt // frames
        seq = x.reshape(bsz, frames, c, hh * ww).transpose(0, 3, 1, 2).reshape(bsz * hh * ww, frames, c)
        inp = seq
        if self.cfg.frame_pos_encoding:
            pos = self.p(f"{b}.frame_pos/embedding")[0:frames]
            inp = seq + pos.reshape(1, frames, c)
        hn = tc.layer_norm(inp, self.p(f"{b}.tattn_norm/gamma"), self.p(f"{b}.tattn_norm/beta"))
        q = hn @ self.p(f"{b}.q/weight")
        k = hn @ self.p(f"{b}.k/weight")
        v = hn @ self.p(f"{b}.v/weight")
        att = tc.softmax((q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(c)), axis=-1)
        o = (att @ v) @ self.p(f"{b}.out/weight") + self.p(f"{b}.out/bias").reshape(1, 1, c)
        o = o.reshape(bsz, hh * ww, frames, c).transpose(0, 2, 3, 1).reshape(n_bt, c, hh, ww)
        return x + o

    def forward(self, x9: np.ndarray, t, tokens: Tensor, temporal: bool = True) -> Tensor:
        """Batched forward: ``x9`` is ``[B, T, 9, h, w]``, ``t`` has ``B`` entries.

        Returns the v-prediction ``[B, T, 4, h, w]`` as a graph tensor.
        """
        cfg = self.cfg
        x9 = np.asarray(x9, dtype=cfg.dtype)
        if x9.ndim != 5 or x9.shape[2] != 9 or x9.shape[3:] != (cfg.h, cfg.w):
            raise ShapeError(f"input must be B x T x 9 x {cfg.h} x {cfg.w}, got {x9.shape}")
        bsz, frames = x9.shape[:2]
        t = np.broadcast_to(np.asarray(t), (bsz,))
        if np.any(t < 1) or np.any(t > cfg.num_train_timesteps):
            raise ShapeError(f"timestep outside [1, {cfg.num_train_timesteps}]: {t}")
        if tokens.shape != (bsz, cfg.n_tokens, cfg.d_model):
            raise ShapeError(f"tokens must be {(bsz, cfg.n_tokens, cfg.d_model)}, got {tokens.shape}")
        if frames > cfg.T_clip_max:
            raise ShapeError(f"clip of {frames} frames exceeds T_clip_max={cfg.T_clip_max}")
        temb = self._time_features(t)
        h = self._conv(Tensor(x9.reshape(bsz * frames, 9, cfg.h, cfg.w)), "input_layer/conv_in")
        use_temporal = temporal and cfg.temporal_layers
        for i in range(cfg.n_res_blocks):
            h = self._res_block(h, temb, i, frames)
            h = self.cross_attention(h, tokens, i)
            if use_temporal:
                h = self.temporal_conv(h, i, frames)
                h = self.temporal_attention(h, i, frames)
        h = tc.silu(tc.group_norm(h, cfg.norm_groups, self.p("spatial/norm_out/gamma"), self.p("spatial/norm_out/beta")))
        out = self._conv(h, "spatial/conv_out")
        return out.reshape(bsz, frames, 4, cfg.h, cfg.w)


def init_model(cfg: DenoiserConfig, rng: Rng) -> Denoiser:
    cfg.validate()
    params = {}
    for name, shape in param_shapes(cfg).items():
        # one derived stream per parameter keeps init independent of table order
        sub = rng.derive(zlib.crc32(name.encode("utf-8")))
        params[name] = tc.parameter(_init_value(name, shape, sub).astype(cfg.dtype))
    return Denoiser(cfg, params)


def denoise(model: Denoiser, input9: np.ndarray, t: int, tokens: Tensor, temporal: bool = True) -> Tensor:
    """Single-clip v-prediction: ``[T, 9, h, w]`` -> ``[T, 4, h, w]``."""
    input9 = np.asarray(input9)
    if input9.ndim != 4:
        raise ShapeError(f"expected T x 9 x h x w, got {input9.shape}")
    if tokens.ndim == 2:
        tokens = tokens.reshape(1, *tokens.shape)
    out = model.forward(input9[None], np.array([t]), tokens, temporal=temporal)
    return out.reshape(*out.shape[1:])
