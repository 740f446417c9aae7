"""DDIM inversion with attention key/value control for reconstruction and editing, at toy scale."""

from .attention_control import ControllerPolicy, KVCache, PolicyKind
from .denoiser import AnalyticGaussianPredictor, DenoiserConfig, ToyDenoiser, predict_noise, train
from .estimator import TICEditor
from .exceptions import ConfigurationError, IntegrityError, NumericError, TiclabError, UsageError
from .latent_codec import LatentCodec
from .pipeline import edit, epsilon_replay, invert, reconstruct, sample, stepwise_error_trace
from .schedule import NoiseSchedule, ddim_invert_step, ddim_sample_step, make_schedule

__version__ = "0.1.0"

__all__ = [
    "AnalyticGaussianPredictor",
    "ConfigurationError",
    "ControllerPolicy",
    "DenoiserConfig",
    "IntegrityError",
    "KVCache",
    "LatentCodec",
    "NoiseSchedule",
    "NumericError",
    "PolicyKind",
    "TICEditor",
    "TiclabError",
    "ToyDenoiser",
    "UsageError",
    "ddim_invert_step",
    "ddim_sample_step",
    "edit",
    "epsilon_replay",
    "invert",
    "make_schedule",
    "predict_noise",
    "reconstruct",
    "sample",
    "stepwise_error_trace",
    "train",
]
