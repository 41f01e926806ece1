"""Toy image-to-video latent diffusion on a numpy autodiff core."""

from .codec import decode, decode_video, encode, encode_video
from .conditioning import GuidanceConfig, SemanticCondition
from .config import DatasetConfig, RunConfig
from .denoiser import Denoiser, DenoiserConfig, init_model
from .metrics import MetricsReport, evaluate
from .sampler import SamplerConfig, generate_long_video, sample, sample_i2v
from .schedule import NoiseSchedule, make_schedule
from .tensor import ConfigError, Rng, ShapeError, Tensor
from .toydata import make_dataset
from .trainer import TrainConfig, load_training_checkpoint, train

__version__ = "0.1.0"
