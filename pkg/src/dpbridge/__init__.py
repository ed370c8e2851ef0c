"""Diffusion-bridge dense prediction on procedural toy tasks."""

from .bridge import BridgeCoefficients, bridge_coeffs
from .codec import LinearCodec
from .config import RunConfig, load_config
from .data import ScenarioConfig, gen_pair, perturb
from .denoiser import Denoiser
from .estimator import DPBridgeRegressor
from .sampler import SamplerConfig, accelerated_sample, ancestral_sample
from .schedule import Schedule, make_vp_schedule
from .trainer import TrainConfig

__all__ = [
    "BridgeCoefficients", "DPBridgeRegressor", "Denoiser", "LinearCodec", "RunConfig",
    "SamplerConfig", "ScenarioConfig", "Schedule", "TrainConfig", "accelerated_sample",
    "ancestral_sample", "bridge_coeffs", "gen_pair", "load_config", "make_vp_schedule", "perturb",
]
__version__ = "0.1.0"
